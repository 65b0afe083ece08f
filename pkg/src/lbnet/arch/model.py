"""LBNet parameters, building blocks and the end-to-end forward pass.

Parameters live in one ordered ``name -> Tensor`` map.  Block functions take a
:class:`Scope` (the map plus a name prefix) so the same function serves the
top and down passes of the symmetric CNN (weight sharing) and every recursion
of a transformer module.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from lbnet.arch.config import ModelConfig
from lbnet.engine import Tensor, grad_enabled
from lbnet.engine import functional as F
from lbnet.errors import ConfigError, DimensionError

__all__ = [
    "LayerSpec", "LBNetModel", "Scope", "build_model", "count_params", "lbnet_forward",
    "channel_attention", "spatial_attention", "frdab_forward", "lffm_forward",
    "symmetric_cnn_forward", "scaled_dot_product_attention", "transformer_module_forward",
    "transformer_tokens_forward", "recursive_transformer_forward", "lffm_groups",
]


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one parameterised layer, used by the profiler.

    ``site`` is ``"grid"`` for convs over the full LR map, ``"pooled"`` for
    1x1 convs on globally pooled vectors, ``"tokens"`` for per-token linears
    and ``"none"`` for layers without multiply-accumulates (layer norm).
    ``calls`` counts executions per forward pass.
    """

    name: str
    kind: str
    cin: int
    cout: int
    k: int = 1
    groups: int = 1
    site: str = "grid"
    calls: int = 1
    side: str = "cnn"

    @property
    def params(self) -> int:
        if self.kind == "norm":
            return 2 * self.cin
        return self.k * self.k * (self.cin // self.groups) * self.cout + self.cout


class Scope:
    """A view of the parameter map under a dotted prefix."""

    __slots__ = ("params", "prefix")

    def __init__(self, params: Dict[str, Tensor], prefix: str = ""):
        self.params = params
        self.prefix = prefix

    def __call__(self, name: str) -> "Scope":
        return Scope(self.params, f"{self.prefix}{name}.")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def conv(self, name: str, x: Tensor, padding: Optional[int] = None, groups: int = 1) -> Tensor:
        w = self[f"{name}.weight"]
        pad = w.shape[-1] // 2 if padding is None else padding
        return F.conv2d(x, w, self[f"{name}.bias"], padding=pad, groups=groups)

    def linear(self, name: str, x: Tensor) -> Tensor:
        return F.linear(x, self[f"{name}.weight"], self[f"{name}.bias"])

    def norm(self, name: str, x: Tensor) -> Tensor:
        return F.layer_norm(x, self[f"{name}.gamma"], self[f"{name}.beta"])


class LBNetModel:
    """Config, ordered parameter map and per-layer metadata."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]",
                 layers: "OrderedDict[str, LayerSpec]"):
        self.config = config
        self.params = params
        self.layers = layers

    @property
    def scope(self) -> Scope:
        return Scope(self.params)

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_shapes(self) -> "OrderedDict[str, tuple]":
        return OrderedDict((k, v.shape) for k, v in self.params.items())

    def __call__(self, x: Tensor) -> Tensor:
        return lbnet_forward(self, x)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.layers: "OrderedDict[str, LayerSpec]" = OrderedDict()

    def _kaiming(self, shape, fan_in):
        # Kaiming-uniform with a = sqrt(5): bound = 1 / sqrt(fan_in).
        bound = 1.0 / math.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name, cin, cout, k, groups=1, site="grid", calls=1, side="cnn"):
        fan_in = (cin // groups) * k * k
        self.params[f"{name}.weight"] = Tensor(self._kaiming((cout, cin // groups, k, k), fan_in),
                                               requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        self.layers[name] = LayerSpec(name, "conv", cin, cout, k, groups, site, calls, side)

    def linear(self, name, din, dout, calls=1):
        self.params[f"{name}.weight"] = Tensor(self._kaiming((dout, din), din), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(dout), requires_grad=True)
        self.layers[name] = LayerSpec(name, "linear", din, dout, site="tokens", calls=calls,
                                      side="transformer")

    def norm(self, name, dim, calls=1):
        self.params[f"{name}.gamma"] = Tensor(np.ones(dim), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(dim), requires_grad=True)
        self.layers[name] = LayerSpec(name, "norm", dim, dim, site="none", calls=calls,
                                      side="transformer")


def _add_channel_attention(b: _Builder, name: str, c: int, r: int, calls: int) -> None:
    b.conv(f"{name}.squeeze", c, c // r, 1, site="pooled", calls=calls)
    b.conv(f"{name}.excite", c // r, c, 1, site="pooled", calls=calls)


def _add_spatial_attention(b: _Builder, name: str, k: int, calls: int) -> None:
    b.conv(f"{name}.conv", 2, 1, k, calls=calls)


def _add_lffm(b: _Builder, name: str, cfg: ModelConfig, calls: int) -> None:
    c, half = cfg.channels, cfg.channels // 2
    for j in (1, 2, 3):
        fr = f"{name}.frdab.{j}"
        b.conv(f"{fr}.branchA.conv0", c, c, 3, calls=calls)
        b.conv(f"{fr}.branchA.conv1", c, half, 3, calls=calls)
        b.conv(f"{fr}.branchB.conv0", c, c, 3, calls=calls)
        b.conv(f"{fr}.branchB.conv1", c, c, 3, calls=calls)
        b.conv(f"{fr}.branchB.conv2", c, half, 3, calls=calls)
        _add_channel_attention(b, f"{fr}.ca", c, cfg.ca_reduction, calls)
        _add_spatial_attention(b, f"{fr}.sa", cfg.sa_kernel, calls)
        if j < 3:
            b.conv(f"{name}.gc.{j}", (j + 1) * c, c, 1, groups=2, calls=calls)
    b.conv(f"{name}.fuse", 4 * c, c, 1, calls=calls)


def build_model(config: ModelConfig, seed: int = 0) -> LBNetModel:
    """Allocate and initialise every parameter in forward order.

    Conv/linear weights use fan-in Kaiming-uniform init, biases are zero and
    layer-norm affines start at identity.  Identical ``(config, seed)`` pairs
    give bitwise-identical models.
    """
    cfg = config.validate()
    b = _Builder(np.random.default_rng(seed))
    c, n = cfg.channels, cfg.n_lffm
    b.conv("head", 3, c, 3)
    lffm_calls = 2 if cfg.share_lffm else 1
    for i in range(1, n + 1):
        _add_lffm(b, f"lffm.{i}", cfg, lffm_calls)
    if not cfg.share_lffm:
        for i in range(1, n + 1):
            _add_lffm(b, f"lffm_down.{i}", cfg, 1)
    for i in range(1, n + 1):
        if cfg.fusion_mode == "ca":
            _add_channel_attention(b, f"bridge.{i}", c, cfg.ca_reduction, 1)
        elif cfg.fusion_mode == "sa":
            _add_spatial_attention(b, f"bridge.{i}", cfg.sa_kernel, 1)
    b.conv("cnn.fuse", n * c, cfg.cnn_out_channels, 1)
    if cfg.use_transformer:
        w, d = cfg.tm_width, cfg.token_dim
        calls = cfg.recursions + 1
        for t in range(1, cfg.tm_count + 1):
            tm = f"rt.tm.{t}"
            b.norm(f"{tm}.norm1", d, calls)
            b.linear(f"{tm}.reduce", d, cfg.attn_dim, calls)
            b.linear(f"{tm}.qkv", cfg.attn_dim, 3 * cfg.attn_dim, calls)
            b.linear(f"{tm}.proj", cfg.attn_dim, d, calls)
            b.norm(f"{tm}.norm2", d, calls)
            b.linear(f"{tm}.mlp.fc1", d, cfg.mlp_hidden, calls)
            b.linear(f"{tm}.mlp.fc2", cfg.mlp_hidden, d, calls)
            out = c if t == cfg.tm_count else w
            b.conv(f"rt.conv.{t}", w, out, 3)
    b.conv("tail.conv", c, 3 * cfg.scale ** 2, 3)
    return LBNetModel(cfg, b.params, b.layers)


def count_params(model: LBNetModel) -> int:
    """Total element count over the (already de-duplicated) parameter map."""
    return sum(p.numel for p in model.params.values())


def lffm_groups(model: LBNetModel) -> list:
    """Distinct LFFM parameter-group prefixes, e.g. ``["lffm.1", "lffm.2"]``."""
    seen = []
    for name in model.params:
        head = name.split(".")
        if head[0] in ("lffm", "lffm_down"):
            key = f"{head[0]}.{head[1]}"
            if key not in seen:
                seen.append(key)
    return seen


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def channel_attention(x: Tensor, p: Scope) -> Tensor:
    """``x * sigmoid(excite(relu(squeeze(gap(x)))))``."""
    expected = p["squeeze.weight"].shape[1]
    if x.shape[1] != expected:
        raise ConfigError(f"channel attention built for {expected} channels, got {x.shape[1]}")
    s = F.pool_stats(x, "global_avg")
    m = F.sigmoid(p.conv("excite", F.relu(p.conv("squeeze", s))))
    return F.mul(x, m)


def spatial_attention(x: Tensor, p: Scope) -> Tensor:
    """Gate every position by a conv over its channel mean and max."""
    stats = F.concat([F.pool_stats(x, "channel_avg"), F.pool_stats(x, "channel_max")], axis=1)
    return F.mul(x, F.sigmoid(p.conv("conv", stats)))


def frdab_forward(x: Tensor, p: Scope) -> Tensor:
    """Feature refinement dual-attention block.

    Two conv branches (two and three 3x3 layers, each ending at c/2 channels)
    are concatenated; channel- and spatial-attention views of the result are
    added to the block input.
    """
    c = p["branchA.conv0.weight"].shape[1]
    if c % 2:
        raise ConfigError(f"FRDAB needs an even channel count, got {c}")
    if x.shape[1] != c:
        raise ConfigError(f"FRDAB built for {c} channels, got {x.shape[1]}")
    a = F.relu(p.conv("branchA.conv0", x))
    a = F.relu(p.conv("branchA.conv1", a))
    bb = F.relu(p.conv("branchB.conv0", x))
    bb = F.relu(p.conv("branchB.conv1", bb))
    bb = F.relu(p.conv("branchB.conv2", bb))
    u = F.concat([a, bb], axis=1)
    return F.add(x, F.add(channel_attention(u, p("ca")), spatial_attention(u, p("sa"))))


def lffm_forward(x: Tensor, p: Scope) -> Tensor:
    """Dense stack of three FRDABs with grouped 1x1 reducers and a local residual."""
    f1 = frdab_forward(x, p("frdab.1"))
    f2 = frdab_forward(p.conv("gc.1", F.concat([x, f1]), groups=2), p("frdab.2"))
    f3 = frdab_forward(p.conv("gc.2", F.concat([x, f1, f2]), groups=2), p("frdab.3"))
    return F.add(x, p.conv("fuse", F.concat([x, f1, f2, f3])))


def _bridge(x: Tensor, p: Scope, mode: str) -> Tensor:
    if mode == "ca":
        return channel_attention(x, p)
    if mode == "sa":
        return spatial_attention(x, p)
    return x


def symmetric_cnn_forward(f_sf: Tensor, params: Scope, config: ModelConfig) -> Tensor:
    """Top pass, then a down pass through the same LFFMs fed by attention bridges."""
    n = config.n_lffm
    down_prefix = "lffm" if config.share_lffm else "lffm_down"
    top = []
    t = f_sf
    for i in range(1, n + 1):
        t = lffm_forward(t, params(f"lffm.{i}"))
        top.append(t)
    d = top[-1]
    downs = []
    for i in range(1, n + 1):
        bridged = _bridge(top[i - 1], params(f"bridge.{i}"), config.fusion_mode)
        d = lffm_forward(F.add(d, bridged), params(f"{down_prefix}.{i}"))
        downs.append(d)
    return params.conv("cnn.fuse", F.concat(downs) if n > 1 else downs[0])


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over ``(B, heads, L, d)`` operands."""
    if q.shape != k.shape:
        raise DimensionError(f"query and key shapes differ: {q.shape} vs {k.shape}")
    if v.shape[:3] != q.shape[:3]:
        raise DimensionError(f"value shape {v.shape} does not match query {q.shape}")
    kt = F.permute(k, (0, 1, 3, 2))
    length = q.shape[2]
    if grad_enabled() or length <= ATTENTION_BLOCK:
        return _attend(q, kt, v)
    # Inference on large maps: process queries in blocks to bound the score matrix.
    rows = [_attend(Tensor(q.data[:, :, i:i + ATTENTION_BLOCK]), kt, v).data
            for i in range(0, length, ATTENTION_BLOCK)]
    return Tensor(np.concatenate(rows, axis=2))


ATTENTION_BLOCK = 1024


def _attend(q: Tensor, kt: Tensor, v: Tensor) -> Tensor:
    scores = F.scale(F.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    return F.matmul(F.softmax(scores, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, width = x.shape
    return F.permute(F.reshape(x, (n, length, heads, width // heads)), (0, 2, 1, 3))


def transformer_tokens_forward(tokens: Tensor, p: Scope, heads: int) -> Tensor:
    """Pre-norm attention + MLP block acting on ``(N, L, D)`` tokens."""
    n, length, _ = tokens.shape
    h = p.linear("reduce", p.norm("norm1", tokens))
    width = h.shape[-1]
    q, k, v = (_split_heads(t, heads) for t in F.split(p.linear("qkv", h), [width] * 3, axis=2))
    att = F.permute(scaled_dot_product_attention(q, k, v), (0, 2, 1, 3))
    mid = F.add(tokens, p.linear("proj", F.reshape(att, (n, length, width))))
    mlp = p.linear("mlp.fc2", F.gelu(p.linear("mlp.fc1", p.norm("norm2", mid))))
    return F.add(mid, mlp)


def transformer_module_forward(x: Tensor, p: Scope, config: ModelConfig) -> Tensor:
    """Tokenise a feature map into patches, run one transformer block, fold back."""
    n, c, h, w = x.shape
    if c != config.tm_width:
        raise ConfigError(f"transformer module built for {config.tm_width} channels, got {c}")
    k = config.token_kernel
    out = transformer_tokens_forward(F.unfold_tokens(x, k), p, config.heads)
    return F.fold_tokens(out, c, h, w, k)


def recursive_transformer_forward(f_cnn: Tensor, params: Scope, config: ModelConfig,
                                  recursions: Optional[int] = None) -> Tensor:
    """Each module runs ``recursions + 1`` times with shared weights, then a 3x3 conv."""
    s = config.recursions if recursions is None else recursions
    if s < 0:
        raise ConfigError(f"recursions must be >= 0, got {s}")
    x = f_cnn
    for t in range(1, config.tm_count + 1):
        tm = params(f"rt.tm.{t}")
        for _ in range(s + 1):
            x = transformer_module_forward(x, tm, config)
        x = params.conv(f"rt.conv.{t}", x)
    return x


def lbnet_forward(model: LBNetModel, image: Tensor) -> Tensor:
    """Map ``(N, 3, H, W)`` LR images in [0, 1] to ``(N, 3, sH, sW)`` (unclamped)."""
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != 3:
        raise ConfigError(f"LBNet expects RGB input of shape (N, 3, H, W), got {image.shape}")
    p = model.scope
    f_sf = p.conv("head", image)
    f_cnn = symmetric_cnn_forward(f_sf, p, cfg)
    f_rt = recursive_transformer_forward(f_cnn, p, cfg) if cfg.use_transformer else f_cnn
    return F.pixel_shuffle(p.conv("tail.conv", F.add(f_sf, f_rt)), cfg.scale)
