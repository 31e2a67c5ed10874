"""Dataclass configurations shared by the model, data pipeline and trainer."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 1
    width: int = 64
    window: int = 8
    heads: int = 4
    cfe_hidden_ratio: int = 4
    # Side length (pixels) of the square patch flattened into one token.
    # 1 gives per-pixel tokens with embedding dim == width.
    token_patch: int = 1
    # Attention logits are divided by this; None means sqrt(embed_dim / heads).
    attn_scale: float | None = None
    ln_eps: float = 1e-5

    # Serial block toggles
    sb_tm: bool = True
    sb_residual: bool = True
    sb_relu: bool = True
    sb_single_conv: bool = False
    # Residual adds the Conv+R output instead of the first conv output.
    sb_residual_from_second: bool = False

    # Parallel block toggles
    subnet1: bool = True
    subnet2: bool = True
    subnet3: bool = True
    subnet1_tm: bool = True
    subnet1_residual: bool = True
    # O_It = CR(C(CR(x)) + x); False gives CR(C(CR(x))) + x
    subnet1_relu_after_residual: bool = True
    subnet2_tm: bool = True
    subnet2_residual: bool = True
    subnet2_fms: bool = True
    subnet3_tm: bool = True
    subnet3_itm: bool = True
    subnet3_first_fms: bool = True
    serial: bool = False

    @property
    def embed_dim(self) -> int:
        return self.width * self.token_patch ** 2

    @property
    def tokens_per_window(self) -> int:
        return self.window ** 2

    @property
    def spatial_multiple(self) -> int:
        return self.window * self.token_patch

    @property
    def scale(self) -> float:
        if self.attn_scale is not None:
            return float(self.attn_scale)
        return (self.embed_dim / self.heads) ** 0.5

    def validate(self) -> ModelConfig:
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.width < 1 or self.heads < 1 or self.cfe_hidden_ratio < 1 or self.token_patch < 1:
            raise ConfigError("width, heads, cfe_hidden_ratio and token_patch must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embedding dim {self.embed_dim} not divisible by heads={self.heads}")
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if self.attn_scale is not None and self.attn_scale <= 0:
            raise ConfigError("attn_scale must be positive")
        return self

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(width=8, window=4, heads=2)
        base.update(overrides)
        return cls(**base).validate()

    @classmethod
    def full(cls, image_channels: int = 3, **overrides) -> ModelConfig:
        return cls(image_channels=image_channels, **overrides).validate()

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw).validate()


@dataclass(frozen=True)
class NoiseSpec:
    """AWGN level in 8-bit units; ``blind`` draws sigma per patch."""

    mode: str = "fixed"
    sigma: float = 25.0
    sigma_min: float = 0.0
    sigma_max: float = 55.0
    seed: int = 0
    clip: bool = False

    def validate(self) -> NoiseSpec:
        if self.mode not in ("fixed", "blind"):
            raise ConfigError(f"noise mode must be 'fixed' or 'blind', got {self.mode!r}")
        if self.mode == "fixed" and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.mode == "blind" and not 0 <= self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 <= sigma_min <= sigma_max")
        return self

    @classmethod
    def blind(cls, lo: float = 0.0, hi: float = 55.0, seed: int = 0) -> NoiseSpec:
        return cls(mode="blind", sigma_min=lo, sigma_max=hi, seed=seed).validate()


DEFAULT_HALVING_EPOCHS = (15, 22, 24, 26, 28, 30, 31)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 33
    lr0: float = 2e-4
    halving_epochs: tuple[int, ...] = DEFAULT_HALVING_EPOCHS
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    grad_clip: float | None = None
    # "sum" is the literal 1/(2n) * squared norm; "pixel_mean" also divides by pixels
    loss_reduction: str = "sum"
    patch_size: int = 48
    patches_per_image: int = 108
    augment: bool = True
    val_count: int = 8

    def validate(self) -> TrainConfig:
        h = tuple(self.halving_epochs)
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("halving epochs must be strictly increasing")
        if h and (h[0] < 1 or h[-1] >= self.epochs):
            raise ConfigError("halving epochs must lie in 1..epochs-1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.loss_reduction not in ("sum", "pixel_mean"):
            raise ConfigError(f"unknown loss_reduction {self.loss_reduction!r}")
        return self


def from_dict(cls, data: dict[str, Any]):
    """Build a config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = dict(data)
    if "halving_epochs" in kw:
        kw["halving_epochs"] = tuple(kw["halving_epochs"])
    try:
        obj = cls(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return obj.validate()


def to_dict(cfg) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    data: str | None = None
    out: str | None = None

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"model", "train", "noise", "data", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            model=from_dict(ModelConfig, raw.get("model", {})),
            train=from_dict(TrainConfig, raw.get("train", {})),
            noise=from_dict(NoiseSpec, raw.get("noise", {})),
            data=raw.get("data"),
            out=raw.get("out"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"model": to_dict(self.model), "train": to_dict(self.train),
                "noise": to_dict(self.noise), "data": self.data, "out": self.out}
