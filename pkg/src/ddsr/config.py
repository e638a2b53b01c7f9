"""Run configuration as a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Every :class:`TrainConfig`
field is a valid key; unknown keys are rejected. Kernel lists use the
``lambda1/lambda2/theta_degrees`` triple notation separated by ``;``, e.g.
``2.0/1.0/10; 3.5/1.5/30``. Numeric lists are comma separated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ddsr.degradation import SamplerConfig

TABLE2_KERNELS = "2.0/1.0/10; 3.5/1.5/30; 3.5/2.0/45; 3.5/4.5/60; 4.5/5.0/120; 5.0/5.0/180"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    deterministic: bool = True

    # degradation
    scale: int = 4
    kernel_size: int = 21
    lambda_min: float = 0.2
    lambda_max: float = 4.0
    sigma_min: float = 0.0
    sigma_max: float = 25.0
    toy_kernels: str = ""
    toy_noise: str = ""

    # data
    hr_dir: str = ""
    synthetic_count: int = 32
    synthetic_size: int = 128
    patch_size: int = 48
    batch_size: int = 8

    # extractor
    enc_channels: str = "32,64,64,128,128"
    enc_strides: str = "1,2,1,2,1"
    proj_hidden: int = 128
    embed_dim: int = 64
    codebook_size: int = 128
    tau: float = 0.07
    queue_size: int = 512
    momentum: float = 0.999
    exclude_same_class: bool = True
    warmup_batches: int = 8

    # SR network
    sr_channels: int = 64
    sr_blocks: int = 5
    conditioning: str = "predicted"

    # optimization
    lr_extractor: float = 1e-3
    lr_sr: float = 1e-4
    lr_finetune: float = 1e-4
    lambda_noise: float = 1000.0
    lambda_blur: float = 10.0
    steps_stage1: int = 3000
    steps_stage2: int = 5000
    steps_stage3: int = 2000
    divergence_patience: int = 50

    # ablation switches
    use_wavelet: bool = True
    use_constraints: bool = True
    use_ncrp: bool = True
    use_reg: bool = True

    # evaluation
    grid_kernels: str = TABLE2_KERNELS
    grid_noise: str = "10,20"
    grid_width_rescale: float = 0.8
    eval_count: int = 8
    eval_size: int = 96

    def __post_init__(self):
        positive = ["scale", "kernel_size", "patch_size", "batch_size", "embed_dim", "codebook_size",
                    "tau", "queue_size", "sr_channels", "proj_hidden", "lr_extractor", "lr_sr",
                    "lr_finetune", "synthetic_count", "synthetic_size", "eval_count", "eval_size"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.conditioning not in ("predicted", "oracle"):
            raise ConfigError(f"conditioning must be 'predicted' or 'oracle', got {self.conditioning!r}")
        if self.lambda_min > self.lambda_max or self.sigma_min > self.sigma_max:
            raise ConfigError("degradation ranges must have min <= max")
        if len(self.enc_channel_list) != len(self.enc_stride_list):
            raise ConfigError("enc_channels and enc_strides must have the same length")
        self.toy_kernel_list
        self.grid_kernel_list

    # -------------------------------------------------------------- derived
    @property
    def enc_channel_list(self) -> list[int]:
        return _int_list(self.enc_channels, "enc_channels")

    @property
    def enc_stride_list(self) -> list[int]:
        return _int_list(self.enc_strides, "enc_strides")

    @property
    def toy_kernel_list(self) -> list[tuple[float, float, float]]:
        return parse_kernels(self.toy_kernels)

    @property
    def toy_noise_list(self) -> list[float]:
        return _float_list(self.toy_noise, "toy_noise")

    @property
    def grid_kernel_list(self) -> list[tuple[float, float, float]]:
        r = self.grid_width_rescale
        return [(a * r, b * r, th) for a, b, th in parse_kernels(self.grid_kernels)]

    @property
    def grid_noise_list(self) -> list[float]:
        return _float_list(self.grid_noise, "grid_noise")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            lambda_range=(self.lambda_min, self.lambda_max),
            sigma_range=(self.sigma_min, self.sigma_max),
            scale=self.scale,
            kernels=self.toy_kernel_list,
            noise_levels=self.toy_noise_list,
        )

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def to_meta(self) -> dict[str, str]:
        return {k: _format(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(key, kinds[key], raw)
        return cls(**parsed)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def parse_kernels(text: str) -> list[tuple[float, float, float]]:
    """``"2.0/1.0/10; 3.5/1.5/30"`` -> [(2.0, 1.0, 0.1745...), ...]; angles in degrees."""
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = item.split("/")
        if len(parts) != 3:
            raise ConfigError(f"kernel triple must be lambda1/lambda2/theta_deg, got {item!r}")
        try:
            l1, l2, deg = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"non-numeric kernel triple {item!r}") from None
        if l1 <= 0 or l2 <= 0:
            raise ConfigError(f"kernel widths must be positive in {item!r}")
        out.append((l1, l2, math.radians(deg) % math.pi))
    return out


def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None


def _float_list(text: str, name: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw
