"""
Gaze-conditioned perceiver resampler with an analytic backward pass.

Conventions: tokens are rows, ``Linear(X) = X @ W`` with ``W`` stored as
``in × out``. Media tokens ``x`` and latents ``L`` are stacked along the token
axis; gaze tokens ``G`` are stacked with an all-zero block the shape of ``L``
so that they line up with ``x ⊕ L`` when building the keys.

Parameter layout (names are stable, they are the checkpoint index):

    latents                          n_latents × dim
    gaze.proj, gaze.bias             patch_dim × dim, dim
    gaze.ln.gain, gaze.ln.bias       dim
    blocks.<k>.attn.{q,k,v}          dim × dim
    blocks.<k>.attn.gaze_key         dim × dim (no bias)
    blocks.<k>.ff.ln.{gain,bias}     dim
    blocks.<k>.ff.w1, ff.b1          dim × ff_mult·dim, ff_mult·dim
    blocks.<k>.ff.w2, ff.b2          ff_mult·dim × dim, dim
    blocks.<k>.post_ln.{gain,bias}   dim
    final_ln.{gain,bias}             dim
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from gazeqa.errors import ParameterError, ShapeError, shape_of
from gazeqa.gaze import MIN_GRID, Heatmap, PointTrack, heatmap_to_patches, points_to_heatmap, synth_gaze
from gazeqa.numeric import (
    Matrix,
    as_matrix,
    concat_rows,
    gelu,
    gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    softmax_rows,
    softmax_rows_backward,
)


logger = logging.getLogger(__name__)

ATTN_SCALES = ("scaled", "paper_literal")
RESIDUALS = ("nested", "standard")
STAGES = ("frozen", "gaze_only", "perceiver_and_gaze")
INIT_STD = 0.02
OPTIMIZERS = ("sgd", "adamw")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAM_WEIGHT_DECAY = 0.01


@dataclass(frozen=True)
class ResamplerConfig:
    dim: int = 1024
    n_latents: int = 64
    n_media_tokens: int = 256
    n_heads: int = 8
    depth: int = 6
    ff_mult: int = 4
    attn_scale: str = "scaled"
    patch_dim: int = 196
    residual: str = "nested"

    def __post_init__(self):
        for name in ("dim", "n_latents", "n_media_tokens", "n_heads", "depth", "ff_mult", "patch_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.dim % self.n_heads:
            raise ParameterError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.attn_scale not in ATTN_SCALES:
            raise ParameterError(f"attn_scale must be one of {', '.join(ATTN_SCALES)}, got {self.attn_scale!r}")
        if self.residual not in RESIDUALS:
            raise ParameterError(f"residual must be one of {', '.join(RESIDUALS)}, got {self.residual!r}")

    @classmethod
    def desk(cls, **overrides) -> "ResamplerConfig":
        """Small configuration used by the self-checks and the training demo."""
        base = dict(dim=8, n_latents=4, n_media_tokens=9, n_heads=2, depth=2, ff_mult=4, patch_dim=4)
        return cls(**{**base, **overrides})

    @classmethod
    def from_json(cls, data: Mapping) -> "ResamplerConfig":
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def scale(self) -> float:
        return math.sqrt(self.head_dim) if self.attn_scale == "scaled" else 1.0

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hidden = self.dim, self.ff_mult * self.dim
        shapes: dict[str, tuple[int, ...]] = {
            "latents": (self.n_latents, d),
            "gaze.proj": (self.patch_dim, d),
            "gaze.bias": (d,),
            "gaze.ln.gain": (d,),
            "gaze.ln.bias": (d,),
        }
        for k in range(self.depth):
            p = f"blocks.{k}."
            shapes.update({
                p + "attn.q": (d, d),
                p + "attn.k": (d, d),
                p + "attn.v": (d, d),
                p + "attn.gaze_key": (d, d),
                p + "ff.ln.gain": (d,),
                p + "ff.ln.bias": (d,),
                p + "ff.w1": (d, hidden),
                p + "ff.b1": (hidden,),
                p + "ff.w2": (hidden, d),
                p + "ff.b2": (d,),
                p + "post_ln.gain": (d,),
                p + "post_ln.bias": (d,),
            })
        shapes["final_ln.gain"] = (d,)
        shapes["final_ln.bias"] = (d,)
        return shapes


def is_gaze_parameter(name: str) -> bool:
    return name.startswith("gaze.") or name.endswith(".attn.gaze_key")


@dataclass(frozen=True, eq=False)
class ResamplerWeights:
    config: ResamplerConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.parameter_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"weights do not match the configuration (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {shape_of(t)}, expected {'×'.join(map(str, shape))}")
            if not np.all(np.isfinite(t)):
                raise ParameterError(f"{name} contains non-finite values")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.config.parameter_shapes())

    def block(self, k: int) -> dict[str, np.ndarray]:
        prefix = f"blocks.{k}."
        return {n[len(prefix):]: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ResamplerWeights":
        return ResamplerWeights(config=self.config, tensors={**self.tensors, **updates})

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass(frozen=True)
class TrainableMask:
    stage: str
    flags: Mapping[str, bool]

    def __getitem__(self, name: str) -> bool:
        return self.flags[name]

    def trainable(self) -> list[str]:
        return [n for n, on in self.flags.items() if on]

    def issubset(self, other: "TrainableMask") -> bool:
        return set(self.trainable()) <= set(other.trainable())


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    x: Matrix
    gaze: Matrix

    def global_norm(self, names: Iterable[str] | None = None) -> float:
        names = self.params if names is None else names
        return math.sqrt(sum(float((self.params[n] ** 2).sum()) for n in names))


##################################################
#  Initialization and masks
##################################################


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Kaiming normal in fan-in mode for ReLU, rescaled to the requested std."""
    fan_in = shape[0]
    kaiming_std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, kaiming_std, size=shape) * (std / kaiming_std)


def init_weights(config: ResamplerConfig, seed: int, std: float = INIT_STD) -> ResamplerWeights:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.parameter_shapes().items():
        if len(shape) == 2:
            tensors[name] = kaiming_normal(rng, shape, std)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ResamplerWeights(config=config, tensors=tensors)


def trainable_mask(stage: str, config: ResamplerConfig) -> TrainableMask:
    if stage not in STAGES:
        raise ParameterError(f"unknown training stage {stage!r}, expected one of {', '.join(STAGES)}")
    names = config.parameter_shapes()
    if stage == "frozen":
        flags = {n: False for n in names}
    elif stage == "gaze_only":
        flags = {n: is_gaze_parameter(n) for n in names}
    else:
        flags = {n: True for n in names}
    return TrainableMask(stage=stage, flags=flags)


##################################################
#  Forward pass
##################################################


@dataclass
class _AttnCache:
    context: Matrix
    gaze_padded: Matrix
    latents: Matrix
    q: Matrix
    k: Matrix
    v: Matrix
    probs: list[Matrix]


@dataclass
class _FFCache:
    ln: tuple
    pre: Matrix
    act: Matrix


@dataclass
class _BlockCache:
    attn: _AttnCache
    ff: _FFCache
    post_ln: tuple


@dataclass
class _ResamplerCache:
    gaze_in: Matrix
    gaze_ln: tuple
    gaze: Matrix
    latents: list[Matrix] = field(default_factory=list)
    blocks: list[_BlockCache] = field(default_factory=list)
    final_ln: tuple = ()


def _check_width(m: Matrix, cols: int, name: str):
    if m.shape[1] != cols:
        raise ShapeError(f"{name} of shape {shape_of(m)} must have {cols} columns")


def _heads(m: Matrix, config: ResamplerConfig) -> Iterable[slice]:
    hd = config.head_dim
    return (slice(h * hd, (h + 1) * hd) for h in range(config.n_heads))


def _encode_gaze_forward(g_prime: Matrix, weights: ResamplerWeights) -> tuple[Matrix, tuple]:
    config = weights.config
    g_prime = as_matrix(g_prime, "gaze patches")
    if g_prime.shape != (config.n_media_tokens, config.patch_dim):
        raise ShapeError(
            f"gaze patches of shape {shape_of(g_prime)} do not match "
            f"{config.n_media_tokens}×{config.patch_dim}"
        )
    pre = g_prime @ weights["gaze.proj"] + weights["gaze.bias"]
    return layer_norm_forward(pre, weights["gaze.ln.gain"], weights["gaze.ln.bias"])


def encode_gaze(g_prime: Matrix, weights: ResamplerWeights) -> Matrix:
    """``G = LN(Linear(G'))``: one gaze token per heatmap patch."""
    return _encode_gaze_forward(g_prime, weights)[0]


def attn_forward(
        x: Matrix, latents: Matrix, gaze: Matrix, bw: Mapping[str, np.ndarray], config: ResamplerConfig
) -> tuple[Matrix, _AttnCache]:
    x, latents, gaze = as_matrix(x, "media tokens"), as_matrix(latents, "latents"), as_matrix(gaze, "gaze tokens")
    if x.shape[0] != gaze.shape[0]:
        raise ShapeError(f"gaze tokens {shape_of(gaze)} do not line up with media tokens {shape_of(x)}")
    for m, name in ((x, "media tokens"), (latents, "latents"), (gaze, "gaze tokens")):
        _check_width(m, config.dim, name)

    context = concat_rows(x, latents)
    gaze_padded = concat_rows(gaze, np.zeros_like(latents))
    q = latents @ bw["attn.q"]
    k = context @ bw["attn.k"] + gaze_padded @ bw["attn.gaze_key"]
    v = context @ bw["attn.v"]

    out = np.empty_like(q)
    probs = []
    for h in _heads(q, config):
        p = softmax_rows(q[:, h] @ k[:, h].T / config.scale)
        probs.append(p)
        out[:, h] = p @ v[:, h]
    return out, _AttnCache(context, gaze_padded, latents, q, k, v, probs)


def attn(x: Matrix, latents: Matrix, gaze: Matrix, bw: Mapping[str, np.ndarray], config: ResamplerConfig) -> Matrix:
    return attn_forward(x, latents, gaze, bw, config)[0]


def feed_forward_forward(t: Matrix, bw: Mapping[str, np.ndarray]) -> tuple[Matrix, _FFCache]:
    t = as_matrix(t)
    _check_width(t, bw["ff.w1"].shape[0], "feed-forward input")
    normed, ln_cache = layer_norm_forward(t, bw["ff.ln.gain"], bw["ff.ln.bias"])
    pre = normed @ bw["ff.w1"] + bw["ff.b1"]
    act = gelu(pre)
    return act @ bw["ff.w2"] + bw["ff.b2"], _FFCache(ln=(normed, ln_cache), pre=pre, act=act)


def feed_forward(t: Matrix, bw: Mapping[str, np.ndarray]) -> Matrix:
    return feed_forward_forward(t, bw)[0]


def block_forward_cached(
        x: Matrix, latents: Matrix, gaze: Matrix, bw: Mapping[str, np.ndarray], config: ResamplerConfig
) -> tuple[Matrix, _BlockCache]:
    a, attn_cache = attn_forward(x, latents, gaze, bw, config)
    u = latents + a
    f, ff_cache = feed_forward_forward(u, bw)
    z = latents + f if config.residual == "nested" else u + f
    out, post_cache = layer_norm_forward(z, bw["post_ln.gain"], bw["post_ln.bias"])
    return out, _BlockCache(attn=attn_cache, ff=ff_cache, post_ln=post_cache)


def block_forward(
        x: Matrix, latents: Matrix, gaze: Matrix, bw: Mapping[str, np.ndarray], config: ResamplerConfig
) -> Matrix:
    """
    ``LN(L + FF(L + Attn(x, L, G)))``, or ``LN(U + FF(U))`` with
    ``U = L + Attn(x, L, G)`` when the configuration asks for the standard
    two-residual form.
    """
    return block_forward_cached(x, latents, gaze, bw, config)[0]


def _resampler_forward(X: Matrix, g_prime: Matrix, weights: ResamplerWeights) -> tuple[Matrix, _ResamplerCache]:
    config = weights.config
    X = as_matrix(X, "media tokens")
    if X.shape != (config.n_media_tokens, config.dim):
        raise ShapeError(f"media tokens of shape {shape_of(X)} do not match {config.n_media_tokens}×{config.dim}")
    gaze, gaze_ln = _encode_gaze_forward(g_prime, weights)
    cache = _ResamplerCache(gaze_in=as_matrix(g_prime), gaze_ln=gaze_ln, gaze=gaze)
    latents = weights["latents"]
    for k in range(config.depth):
        cache.latents.append(latents)
        latents, block_cache = block_forward_cached(X, latents, gaze, weights.block(k), config)
        cache.blocks.append(block_cache)
    out, cache.final_ln = layer_norm_forward(latents, weights["final_ln.gain"], weights["final_ln.bias"])
    return out, cache


def resampler_forward(X: Matrix, g_prime: Matrix, weights: ResamplerWeights) -> Matrix:
    return _resampler_forward(X, g_prime, weights)[0]


##################################################
#  Backward pass
##################################################


def attn_backward(
        dout: Matrix, cache: _AttnCache, bw: Mapping[str, np.ndarray], config: ResamplerConfig
) -> tuple[Matrix, Matrix, Matrix, dict[str, np.ndarray]]:
    """Returns ``(d_x, d_latents, d_gaze, parameter grads)``."""
    dq = np.zeros_like(cache.q)
    dk = np.zeros_like(cache.k)
    dv = np.zeros_like(cache.v)
    for h, p in zip(_heads(cache.q, config), cache.probs):
        dp = dout[:, h] @ cache.v[:, h].T
        dv[:, h] = p.T @ dout[:, h]
        ds = softmax_rows_backward(p, dp)
        dq[:, h] = ds @ cache.k[:, h] / config.scale
        dk[:, h] = ds.T @ cache.q[:, h] / config.scale

    grads = {
        "attn.q": cache.latents.T @ dq,
        "attn.k": cache.context.T @ dk,
        "attn.v": cache.context.T @ dv,
        "attn.gaze_key": cache.gaze_padded.T @ dk,
    }
    dcontext = dk @ bw["attn.k"].T + dv @ bw["attn.v"].T
    n_media = cache.context.shape[0] - cache.latents.shape[0]
    dx = dcontext[:n_media]
    dlatents = dcontext[n_media:] + dq @ bw["attn.q"].T
    dgaze = (dk @ bw["attn.gaze_key"].T)[:n_media]
    return dx, dlatents, dgaze, grads


def feed_forward_backward(
        dout: Matrix, cache: _FFCache, bw: Mapping[str, np.ndarray]
) -> tuple[Matrix, dict[str, np.ndarray]]:
    normed, ln_cache = cache.ln
    dact = dout @ bw["ff.w2"].T
    dpre = dact * gelu_grad(cache.pre)
    dnormed = dpre @ bw["ff.w1"].T
    dt, dgain, dbias = layer_norm_backward(dnormed, ln_cache, bw["ff.ln.gain"])
    grads = {
        "ff.w2": cache.act.T @ dout,
        "ff.b2": dout.sum(axis=0),
        "ff.w1": normed.T @ dpre,
        "ff.b1": dpre.sum(axis=0),
        "ff.ln.gain": dgain,
        "ff.ln.bias": dbias,
    }
    return dt, grads


def block_backward(
        dout: Matrix, cache: _BlockCache, bw: Mapping[str, np.ndarray], config: ResamplerConfig
) -> tuple[Matrix, Matrix, Matrix, dict[str, np.ndarray]]:
    dz, dgain, dbias = layer_norm_backward(dout, cache.post_ln, bw["post_ln.gain"])
    du, grads = feed_forward_backward(dz, cache.ff, bw)
    if config.residual == "nested":
        dlatents = dz.copy()
    else:
        du = du + dz
        dlatents = np.zeros_like(dz)
    dx, dlat_attn, dgaze, attn_grads = attn_backward(du, cache.attn, bw, config)
    dlatents = dlatents + du + dlat_attn
    grads.update(attn_grads)
    grads["post_ln.gain"] = dgain
    grads["post_ln.bias"] = dbias
    return dx, dlatents, dgaze, grads


def backward(X: Matrix, g_prime: Matrix, weights: ResamplerWeights, upstream: Matrix) -> Gradients:
    """Gradients of ``sum(upstream * resampler_forward(X, g_prime, weights))``."""
    config = weights.config
    out, cache = _resampler_forward(X, g_prime, weights)
    upstream = as_matrix(upstream, "upstream gradient")
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream gradient {shape_of(upstream)} does not match output {shape_of(out)}")

    params: dict[str, np.ndarray] = {}
    dlatents, params["final_ln.gain"], params["final_ln.bias"] = layer_norm_backward(
        upstream, cache.final_ln, weights["final_ln.gain"]
    )
    dx = np.zeros((config.n_media_tokens, config.dim))
    dgaze = np.zeros_like(cache.gaze)
    for k in reversed(range(config.depth)):
        dx_k, dlatents, dgaze_k, grads = block_backward(dlatents, cache.blocks[k], weights.block(k), config)
        dx += dx_k
        dgaze += dgaze_k
        params.update({f"blocks.{k}.{n}": g for n, g in grads.items()})
    params["latents"] = dlatents

    dpre, params["gaze.ln.gain"], params["gaze.ln.bias"] = layer_norm_backward(
        dgaze, cache.gaze_ln, weights["gaze.ln.gain"]
    )
    params["gaze.proj"] = cache.gaze_in.T @ dpre
    params["gaze.bias"] = dpre.sum(axis=0)
    dgaze_in = dpre @ weights["gaze.proj"].T
    return Gradients(params={n: params[n] for n in weights.names()}, x=dx, gaze=dgaze_in)


##################################################
#  Training
##################################################


@dataclass(frozen=True)
class TrainingExample:
    x: Matrix
    gaze: Matrix
    target: Matrix


@dataclass(frozen=True)
class AdamState:
    """First and second moment estimates; every step returns a new state."""
    step: int
    m: Mapping[str, np.ndarray]
    v: Mapping[str, np.ndarray]

    @classmethod
    def zeros(cls, weights: ResamplerWeights) -> "AdamState":
        zeros = MappingProxyType({n: np.zeros_like(weights[n]) for n in weights.names()})
        return cls(step=0, m=zeros, v=zeros)


def _example_loss_and_grads(example: TrainingExample, weights: ResamplerWeights, batch_size: int):
    out = resampler_forward(example.x, example.gaze, weights)
    target = as_matrix(example.target, "target")
    if target.shape != out.shape:
        raise ShapeError(f"target {shape_of(target)} does not match output {shape_of(out)}")
    diff = out - target
    loss = float((diff * diff).mean()) / batch_size
    upstream = 2.0 * diff / (diff.size * batch_size)
    return loss, backward(example.x, example.gaze, weights, upstream)


def _batch_gradients(
        weights: ResamplerWeights,
        mask: TrainableMask,
        batch: Sequence[TrainingExample],
        lr: float,
        clip_norm: float | None,
        jobs: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and the clipped gradients of the trainable parameters."""
    if lr < 0:
        raise ParameterError(f"learning rate must not be negative, got {lr}")
    if not batch:
        raise ParameterError("training batch is empty")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            per_example = list(executor.map(lambda e: _example_loss_and_grads(e, weights, len(batch)), batch))
    else:
        per_example = [_example_loss_and_grads(e, weights, len(batch)) for e in batch]

    loss = sum(loss for loss, _ in per_example)
    trainable = mask.trainable()
    grads = {n: sum(g.params[n] for _, g in per_example) for n in trainable}

    if clip_norm is not None and trainable:
        norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in trainable))
        if norm > clip_norm:
            logger.debug("clipping gradient norm %.4f to %.4f", norm, clip_norm)
            grads = {n: g * (clip_norm / norm) for n, g in grads.items()}
    return loss, grads


def train_step(
        weights: ResamplerWeights,
        mask: TrainableMask,
        batch: Sequence[TrainingExample],
        lr: float,
        clip_norm: float | None = None,
        jobs: int = 1,
) -> tuple[ResamplerWeights, float]:
    """
    One SGD step on the mean squared error between resampler outputs and
    targets. Only parameters enabled in ``mask`` move; the loss is the one
    measured before the update.
    """
    loss, grads = _batch_gradients(weights, mask, batch, lr, clip_norm, jobs)
    if lr == 0 or not grads:
        return weights, loss
    return weights.replace({n: weights[n] - lr * g for n, g in grads.items()}), loss


def adamw_step(
        weights: ResamplerWeights,
        mask: TrainableMask,
        batch: Sequence[TrainingExample],
        lr: float,
        state: AdamState | None = None,
        betas: tuple[float, float] = ADAM_BETAS,
        eps: float = ADAM_EPS,
        weight_decay: float = ADAM_WEIGHT_DECAY,
        clip_norm: float | None = None,
        jobs: int = 1,
) -> tuple[ResamplerWeights, AdamState, float]:
    """
    One AdamW step: bias-corrected Adam on the trainable parameters with weight
    decay applied to the weights directly, not through the gradient. Frozen
    parameters and their moments are carried over untouched. With ``lr == 0``
    neither the weights nor the state advance.
    """
    b1, b2 = betas
    if not (0 <= b1 < 1 and 0 <= b2 < 1):
        raise ParameterError(f"Adam betas must lie in [0, 1), got {betas}")
    if eps <= 0:
        raise ParameterError(f"Adam epsilon must be positive, got {eps}")
    if weight_decay < 0:
        raise ParameterError(f"weight decay must not be negative, got {weight_decay}")
    state = AdamState.zeros(weights) if state is None else state

    loss, grads = _batch_gradients(weights, mask, batch, lr, clip_norm, jobs)
    if lr == 0 or not grads:
        return weights, state, loss

    step = state.step + 1
    m = {**state.m, **{n: b1 * state.m[n] + (1 - b1) * g for n, g in grads.items()}}
    v = {**state.v, **{n: b2 * state.v[n] + (1 - b2) * g * g for n, g in grads.items()}}
    updates = {}
    for n in grads:
        m_hat = m[n] / (1 - b1 ** step)
        v_hat = v[n] / (1 - b2 ** step)
        updates[n] = weights[n] - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * weights[n])
    new_state = AdamState(step=step, m=MappingProxyType(m), v=MappingProxyType(v))
    return weights.replace(updates), new_state, loss


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0, warmup_steps: int = 0) -> float:
    """Linear warmup followed by cosine annealing from ``base_lr`` down to ``min_lr``."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be at least 1, got {total_steps}")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = min(1.0, (step - warmup_steps) / max(1, total_steps - warmup_steps))
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def _grid_shape(n: int) -> tuple[int, int]:
    rows = max(r for r in range(1, math.isqrt(n) + 1) if n % r == 0)
    return rows, n // rows


def gaze_patches(track: PointTrack, config: ResamplerConfig) -> Matrix:
    """
    Renders a gaze track into ``n_media_tokens`` patches of ``patch_dim``
    pixels each. Both counts are laid out as the most square grid they factor
    into. Small grids are rendered at an integer multiple of the resolution
    and sum-pooled back, so the heatmap never drops below the minimum grid.
    Values are scaled to mean one.
    """
    patch_rows, patch_cols = _grid_shape(config.n_media_tokens)
    pixel_rows, pixel_cols = _grid_shape(config.patch_dim)
    height, width = patch_rows * pixel_rows, patch_cols * pixel_cols
    scale = max(1, math.ceil(MIN_GRID / min(height, width)))
    fine = points_to_heatmap(track, height * scale, width * scale)
    pooled = fine.values.reshape(height, scale, width, scale).sum(axis=(1, 3))
    return heatmap_to_patches(Heatmap.from_values(pooled * (height * width)), patch_rows, patch_cols)


def synthetic_batch(config: ResamplerConfig, seed: int, size: int = 4) -> list[TrainingExample]:
    """
    Fixed regression batch: random media tokens, gaze patches rendered from
    synthetic fixations over one scene, every target row set to the same
    random vector.
    """
    rng = np.random.default_rng([seed, 7])
    target_row = rng.normal(0.0, 1.0, size=config.dim)
    target = np.tile(target_row, (config.n_latents, 1))
    return [
        TrainingExample(
            x=rng.normal(0.0, 1.0, size=(config.n_media_tokens, config.dim)),
            gaze=gaze_patches(synth_gaze(seed, variant=i), config),
            target=target,
        )
        for i in range(size)
    ]


##################################################
#  Self-checks
##################################################


@dataclass
class GradientCheckReport:
    attn_scale: str
    residual: str
    coordinates: int
    max_rel_error: float
    worst: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


BackwardFn = Callable[[Matrix, Matrix, ResamplerWeights, Matrix], Gradients]


def check_weights(config: ResamplerConfig, seed: int) -> ResamplerWeights:
    """Weights with large enough values that every path carries signal for finite differences."""
    weights = init_weights(config, seed, std=0.3)
    rng = np.random.default_rng([seed, 1])
    updates = {}
    for name, t in weights.tensors.items():
        if t.ndim == 1:
            base = 1.0 if name.endswith(".gain") else 0.0
            updates[name] = base + rng.uniform(-0.3, 0.3, size=t.shape)
    return weights.replace(updates)


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
        config: ResamplerConfig,
        seed: int = 0,
        samples_per_tensor: int = 64,
        h: float = 1e-5,
        tolerance: float = 1e-4,
        backward_fn: BackwardFn = backward,
) -> GradientCheckReport:
    """
    Central finite differences against the analytic backward pass on a sample
    of coordinates from every parameter tensor and from both inputs.
    """
    rng = np.random.default_rng([seed, 2])
    weights = check_weights(config, seed)
    X = rng.normal(0.0, 1.0, size=(config.n_media_tokens, config.dim))
    g_prime = rng.uniform(0.0, 1.0, size=(config.n_media_tokens, config.patch_dim))
    upstream = rng.normal(0.0, 1.0, size=(config.n_latents, config.dim))
    grads = backward_fn(X, g_prime, weights, upstream)

    def loss(X_, g_, w_):
        return float((resampler_forward(X_, g_, w_) * upstream).sum())

    targets = [(name, weights[name], grads.params[name]) for name in weights.names()]
    targets += [("input.x", X, grads.x), ("input.gaze", g_prime, grads.gaze)]

    worst_err, worst, count = 0.0, "", 0
    for name, base, analytic in targets:
        n = min(samples_per_tensor, base.size)
        for flat in rng.choice(base.size, size=n, replace=False):
            idx = np.unravel_index(flat, base.shape)
            values = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * h
                if name == "input.x":
                    values.append(loss(bumped, g_prime, weights))
                elif name == "input.gaze":
                    values.append(loss(X, bumped, weights))
                else:
                    values.append(loss(X, g_prime, weights.replace({name: bumped})))
            numeric = (values[0] - values[1]) / (2.0 * h)
            err = relative_error(float(analytic[idx]), numeric)
            count += 1
            if err > worst_err:
                worst_err, worst = err, f"{name}{list(map(int, idx))}"
    logger.debug("gradient check (%s, %s): %d coordinates, max relative error %.3e at %s",
                 config.attn_scale, config.residual, count, worst_err, worst)
    return GradientCheckReport(
        attn_scale=config.attn_scale,
        residual=config.residual,
        coordinates=count,
        max_rel_error=worst_err,
        worst=worst,
        tolerance=tolerance,
    )


def zero_gaze_key(weights: ResamplerWeights) -> ResamplerWeights:
    return weights.replace({
        f"blocks.{k}.attn.gaze_key": np.zeros_like(weights[f"blocks.{k}.attn.gaze_key"])
        for k in range(weights.config.depth)
    })


def neutrality_check(config: ResamplerConfig, seed: int = 0, trials: int = 20) -> int:
    """
    Number of trials where zeroed gaze keys still let the gaze input change the
    output (0 means the gaze path is neutral).
    """
    rng = np.random.default_rng([seed, 3])
    failures = 0
    for trial in range(trials):
        weights = zero_gaze_key(check_weights(config, seed + trial))
        X = rng.normal(0.0, 1.0, size=(config.n_media_tokens, config.dim))
        zero = np.zeros((config.n_media_tokens, config.patch_dim))
        noise = rng.uniform(0.0, 1.0, size=zero.shape)
        if not np.array_equal(resampler_forward(X, zero, weights), resampler_forward(X, noise, weights)):
            failures += 1
    return failures
