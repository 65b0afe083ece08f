"""Architecture hyperparameters and the named presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from lbnet.errors import ConfigError

FUSION_MODES = ("ff", "sa", "ca")


@dataclass(frozen=True)
class ModelConfig:
    """Every knob needed to build LBNet, LBNet-T or an ablation.

    ``tm_channels`` is the width of the feature map inside the recursive
    transformer (defaults to ``channels``); the symmetric CNN's final fusion
    maps into it and the last transformer-stage conv maps back.  Transformer
    tokens are ``token_kernel`` x ``token_kernel`` patches, so the embedding
    width is ``tm_channels * token_kernel**2``.
    """

    scale: int = 4
    channels: int = 32
    n_lffm: int = 3
    recursions: int = 2
    tm_count: int = 2
    heads: int = 4
    mlp_ratio: float = 1.5
    ca_reduction: int = 4
    sa_kernel: int = 7
    fusion_mode: str = "ca"
    qk_reduction: int = 2
    tm_channels: Optional[int] = None
    token_kernel: int = 3
    use_transformer: bool = True
    share_lffm: bool = True

    @property
    def tm_width(self) -> int:
        return self.channels if self.tm_channels is None else self.tm_channels

    @property
    def token_dim(self) -> int:
        return self.tm_width * self.token_kernel ** 2

    @property
    def attn_dim(self) -> int:
        return self.token_dim // self.qk_reduction

    @property
    def head_dim(self) -> int:
        return self.attn_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.tm_width))

    @property
    def cnn_out_channels(self) -> int:
        """Channels leaving the symmetric CNN (transformer width, or ``channels`` without it)."""
        return self.tm_width if self.use_transformer else self.channels

    def violations(self) -> list:
        v = []
        c = self.channels
        if self.scale not in (2, 3, 4):
            v.append(f"scale must be 2, 3 or 4 (got {self.scale})")
        if c < 2 or c % 2:
            v.append(f"channels ({c}) must be a positive multiple of 2 for the halved branches")
        if self.ca_reduction < 1 or c % self.ca_reduction:
            v.append(f"channels ({c}) must be divisible by ca_reduction ({self.ca_reduction})")
        if self.n_lffm < 1:
            v.append(f"n_lffm must be >= 1 (got {self.n_lffm})")
        if self.recursions < 0:
            v.append(f"recursions must be >= 0 (got {self.recursions})")
        if self.tm_count < 1:
            v.append(f"tm_count must be >= 1 (got {self.tm_count})")
        if self.sa_kernel < 1 or self.sa_kernel % 2 == 0:
            v.append(f"sa_kernel must be odd (got {self.sa_kernel})")
        if self.fusion_mode not in FUSION_MODES:
            v.append(f"fusion_mode must be one of {FUSION_MODES} (got {self.fusion_mode!r})")
        if self.token_kernel < 1 or self.token_kernel % 2 == 0:
            v.append(f"token_kernel must be odd (got {self.token_kernel})")
        if self.tm_width < 1:
            v.append(f"tm_channels must be positive (got {self.tm_width})")
        if self.qk_reduction < 1 or self.token_dim % self.qk_reduction:
            v.append(f"token width ({self.token_dim}) must be divisible by qk_reduction ({self.qk_reduction})")
        elif self.heads < 1 or self.attn_dim % self.heads:
            v.append(f"attention width ({self.attn_dim}) must be divisible by heads ({self.heads})")
        if c % max(self.heads, 1) and self.tm_channels is None:
            v.append(f"channels ({c}) must be divisible by heads ({self.heads})")
        if self.mlp_hidden < 1:
            v.append(f"mlp_ratio ({self.mlp_ratio}) yields an empty hidden layer")
        return v

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems), problems)
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Serialise as ``key = value`` lines (the checkpoint header format)."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(f"bad config line {raw!r}")
            kwargs[key] = _parse_field(types[key], value)
        return cls(**kwargs)


def _parse_field(type_name, value: str):
    type_name = str(type_name)
    if value == "none":
        return None
    if "bool" in type_name:
        if value not in ("True", "False", "true", "false"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value.lower() == "true"
    if "float" in type_name:
        return float(value)
    if "int" in type_name:
        return int(value)
    return value


PRESETS = {
    "lbnet": dict(channels=32, n_lffm=3, recursions=2),
    # The tiny variant narrows the CNN but keeps a wide transformer stage.
    "lbnet-t": dict(channels=18, n_lffm=2, recursions=2, tm_channels=30, heads=3, ca_reduction=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Build a validated config from a named preset plus explicit overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides}).validate()
