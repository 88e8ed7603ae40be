"""Flat ``key=value`` run configuration.

Values are read in order: built-in defaults, then each config file, then
command-line flags. A later source overrides an earlier one. Unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .diffusion import POOL


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    sketch: str = ""
    video_dir: str = ""
    base_weights: str = ""
    appearance_prompt: str = ""
    motion_prompt: str = ""
    # model and raster
    resolution: int = 64
    d_model: int = 32
    patch: int = 4
    frames: int = 0
    tau: float = 0.01
    samples: int = 16
    # pretraining
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_pool: int = 48
    # stages 1 and 2
    stage_steps: int = 500
    stage_lr: float = 1e-3
    batch_size: int = 4
    rank: int = 4
    lora_alpha: float = 1.0
    eval_draws: int = 256
    # stage 3
    sds_iterations: int = 500
    sds_lr: float = 2e-3
    lambda_a: float = 0.5
    lambda_m: float = 1.0
    t_min: int = -1
    t_max: int = -1
    weighting: str = "constant"
    snapshot_every: int = 0
    fps: int = 8
    # eval and synth
    ablation: bool = True
    motion: str = "translate"
    shape: str = "square"
    builtin_sketch: str = "car"

    def validate(self) -> "RunConfig":
        if self.resolution % (POOL * self.patch):
            raise ConfigError(f"resolution {self.resolution} is not divisible by pool x patch = {POOL * self.patch}")
        for key in ("pretrain_steps", "stage_steps", "sds_iterations", "batch_size", "rank", "eval_draws", "fps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.lambda_a < 0 or self.lambda_m < 0:
            raise ConfigError("lambda values must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.frames < 0 or self.snapshot_every < 0:
            raise ConfigError("frames and snapshot_every must be non-negative")
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def build_config(files=(), overrides: dict | None = None) -> RunConfig:
    values = {}
    for path in files:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    for key, value in (overrides or {}).items():
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={getattr(cfg, k)}\n" for k in FIELDS)
