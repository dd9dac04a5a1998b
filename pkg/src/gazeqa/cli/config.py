from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Iterable

from dotenv import dotenv_values
from tabulate import tabulate_formats


CONFIG_DIR_NAME = "gazeqa"
DOTFILE = f".{CONFIG_DIR_NAME}"
SECRET_KEYS = "VOILA_GEN_API_KEY", "VOILA_JUDGE_API_KEY", "VOILA_SCORER_API_KEY"
VALID_OUTPUT_FORMATS = sorted(tabulate_formats + ["json"])
DEFAULT_OUTPUT_FORMAT = "simple_grid"

DEFAULTS = {
    "seed": 0,
    "grid": 64,
    "sigma": None,
    "rates": "1-40",
    "n_tracks": 100,
    "tau": None,
    "jobs": 1,
    "generator_url": None,
    "judge_url": None,
    "scorer_url": None,
}


class RunConfig(dict):
    """
    Effective configuration of one run: a dict with attribute access, multi-key
    unpacking by call and a chainable ``update`` that accepts callables.
    """

    def __getattr__(self, key):
        return self.get(key)

    def __setattr__(self, key, value):
        super().__setitem__(key, value)

    def __delattr__(self, item):
        self.__delitem__(item)

    def __call__(self, *keys) -> list:
        return [self.get(*k) if isinstance(k, tuple) else self.get(k) for k in keys]

    def _update(self, k, v):
        self[k] = v(self.get(k)) if callable(v) else v

    def update(self, *args, **kwargs):
        if len(args) % 2 != 0:
            raise Exception(
                f"Provide even number of key-value args, need a value for key: {args[-1]!r}"
            )
        for i in range(0, len(args), 2):
            self._update(args[i], args[i + 1])
        for k, v in kwargs.items():
            self._update(k, v)
        return self

    def has(self, k):
        return self.get(k) is not None

    def without(self, *args):
        return RunConfig({k: v for k, v in self.items() if k not in args})

    def to_json(self) -> dict:
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(self.items())}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def __repr__(self):
        return f"RunConfig({dict(self)})"


def load_json_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise Exception(f"config file {path} must hold a JSON object")
    return data


def resolve_config(config_file: str | Path | None = None, **flags) -> RunConfig:
    """Defaults, then the JSON config file, then flags that were actually given."""
    return RunConfig({
        **DEFAULTS,
        **load_json_config(config_file),
        **{k: v for k, v in flags.items() if v is not None},
    })


def find_secrets_file() -> str | None:
    config_file_dir = os.environ.get("XDG_CONFIG_HOME", os.environ["HOME"])
    for path in (
            os.path.join(config_file_dir, CONFIG_DIR_NAME, "env"),
            os.path.join(config_file_dir, DOTFILE),
            os.path.join(os.environ["HOME"], ".config", CONFIG_DIR_NAME, "env"),
            os.path.join(os.environ["HOME"], ".config", DOTFILE),
    ):
        if os.path.isfile(path):
            return path
    return None


def get_secret(key: str, secrets_file: str | Path | None = None) -> str | None:
    """Environment first, then the given or discovered dotenv file."""
    if key not in SECRET_KEYS:
        raise Exception(f"unknown secret {key!r}")
    if os.environ.get(key):
        return os.environ[key]
    path = secrets_file or find_secrets_file()
    return dotenv_values(path).get(key) if path else None


def parse_rates(value: str | Iterable[int]) -> list[int]:
    """``"1-40"``, ``"1,5,10-12"`` or an already parsed list."""
    if not isinstance(value, str):
        return [int(v) for v in value]
    rates = []
    for part in filter(None, (p.strip() for p in value.split(","))):
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if m is None:
            raise ValueError(f"cannot read sampling rates from {part!r}")
        start, end = int(m.group(1)), int(m.group(2) or m.group(1))
        if end < start:
            raise ValueError(f"empty rate range {part!r}")
        rates.extend(range(start, end + 1))
    if not rates:
        raise ValueError("no sampling rates given")
    return rates
