__version__ = "0.1.0"

HEATMAP_FORMAT = "VHM1"
CHECKPOINT_FORMAT = "VPW1"
