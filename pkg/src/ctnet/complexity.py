"""Closed-form parameter and FLOP accounting.

FLOPs count multiply-accumulates as two operations and cover convolutions,
fully connected layers and the two attention products (Q K^T and A V).
Biases, normalization, softmax and elementwise ops are not counted.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .config import ModelConfig
from .model import fusion_sides

# Published totals for the full model.
PUBLISHED_PARAMS = 49.03e6
PUBLISHED_FLOPS = 6.91e9


@dataclass(frozen=True)
class Layer:
    block: str
    name: str
    kind: str  # conv | tm | itm | fm
    cin: int = 0
    cout: int = 0


def layer_inventory(cfg: ModelConfig) -> list[Layer]:
    c, ic = cfg.width, cfg.image_channels
    sides = fusion_sides(cfg)
    out = [Layer("sb", "conv1", "conv", ic, c)]
    if not cfg.sb_single_conv:
        out += [Layer("sb", "conv2", "conv", c, c), Layer("sb", "conv3", "conv", c, c)]
    if cfg.sb_tm:
        out.append(Layer("sb", "tm", "tm"))
    if cfg.subnet1:
        out += [Layer("subnet1", f"conv{i}", "conv", c, c) for i in range(1, 6)]
        if cfg.subnet1_tm:
            out.append(Layer("subnet1", "tm", "tm"))
    if cfg.subnet2:
        out += [Layer("subnet2", f"conv{i}", "conv", c, c) for i in range(1, 5)]
        if cfg.subnet2_tm:
            out += [Layer("subnet2", f"tm{i}", "tm") for i in range(1, 4)]
    if cfg.subnet3:
        out += [Layer("subnet3", f"conv{i}", "conv", c, c) for i in (1, 2)]
        if cfg.subnet3_tm:
            out += [Layer("subnet3", f"tm{i}", "tm") for i in range(1, 5)]
        if cfg.subnet3_itm:
            out += [Layer("subnet3", f"itm{i}", "itm") for i in (1, 2)]
    for name, s in sides.items():
        block, layer = name.split(".")
        out.append(Layer(block, layer, "fm", (1 + len(s)) * c, c))
    out.append(Layer("rb", "conv", "conv", c, ic))
    return out


def _fcl(din: int, dout: int) -> int:
    return din * dout + dout


def _tm_params(cfg: ModelConfig) -> int:
    d, hid = cfg.embed_dim, cfg.cfe_hidden_ratio * cfg.embed_dim
    return cfg.tokens_per_window * d + 2 * (2 * d) + 4 * _fcl(d, d) + _fcl(d, hid) + _fcl(hid, d)


def layer_params(layer: Layer, cfg: ModelConfig) -> int:
    if layer.kind == "conv":
        return 9 * layer.cin * layer.cout + layer.cout
    if layer.kind == "tm":
        return _tm_params(cfg)
    if layer.kind == "itm":
        return 3 * _fcl(cfg.embed_dim, cfg.embed_dim) + _tm_params(cfg)
    if layer.kind == "fm":
        return 9 * layer.cin + layer.cin * layer.cout + layer.cout
    raise ValueError(layer.kind)


def _padded(n: int, m: int) -> int:
    return n + (-n % m)


def _tm_flops(cfg: ModelConfig, pixels: int) -> int:
    d, hid = cfg.embed_dim, cfg.cfe_hidden_ratio * cfg.embed_dim
    tokens = pixels // cfg.token_patch ** 2
    proj = 2 * tokens * (4 * d * d + 2 * d * hid)
    attn = 4 * tokens * cfg.tokens_per_window * d
    return proj + attn


def layer_flops(layer: Layer, cfg: ModelConfig, pixels: int) -> int:
    if layer.kind == "conv":
        return 2 * 9 * layer.cin * layer.cout * pixels
    if layer.kind == "tm":
        return _tm_flops(cfg, pixels)
    if layer.kind == "itm":
        tokens = pixels // cfg.token_patch ** 2
        return _tm_flops(cfg, pixels) + 2 * tokens * 3 * cfg.embed_dim ** 2
    if layer.kind == "fm":
        return 2 * 9 * layer.cin * pixels + 2 * layer.cin * layer.cout * pixels
    raise ValueError(layer.kind)


def count_parameters(cfg: ModelConfig) -> int:
    return sum(layer_params(l, cfg) for l in layer_inventory(cfg))


def estimate_flops(cfg: ModelConfig, h: int, w: int) -> int:
    m = cfg.spatial_multiple
    pixels = _padded(h, m) * _padded(w, m)
    return sum(layer_flops(l, cfg, pixels) for l in layer_inventory(cfg))


def per_block(cfg: ModelConfig, h: int = 48, w: int = 48) -> "OrderedDict[str, tuple[int, int]]":
    m = cfg.spatial_multiple
    pixels = _padded(h, m) * _padded(w, m)
    table: OrderedDict[str, tuple[int, int]] = OrderedDict()
    for l in layer_inventory(cfg):
        p, f = table.get(l.block, (0, 0))
        table[l.block] = (p + layer_params(l, cfg), f + layer_flops(l, cfg, pixels))
    return table
