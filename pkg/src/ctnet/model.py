"""CTNet: serial block -> parallel block (three interacting sub-networks) -> residual block.

Parameter names follow ``<block>.<layer>[.<sub>...].<leaf>`` where block is
one of ``sb``, ``subnet1``, ``subnet2``, ``subnet3``, ``rb``; layers are
``convK`` (3x3 conv), ``tmK`` (Transformer mechanism), ``itmK``, ``fmK``
(fusion); leaves are ``w``/``b`` for weights and biases, ``g``/``b`` for
LayerNorm gain and shift, ``pos`` for the positional table. Inside a TM:
``pos``, ``mhsa.{ln,q,k,v,o}``, ``cfe.{ln,fc1,fc2}``. Inside an ITM:
``fc_in``, ``tm.*``, ``fc1``, ``fc2``. Inside a fusion: ``dw.w`` (depthwise,
no bias), ``pw.w``, ``pw.b``.

Example: ``subnet2.tm1.mhsa.q.w``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import ParamBuilder, Params, fm_forward, itm_forward, tm_forward
from .config import ModelConfig
from .tensor import Tensor

ActivationTrace = dict  # ordered name -> Tensor


class NumericFailure(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite values first produced at layer {layer!r}")
        self.layer = layer


def fusion_sides(cfg: ModelConfig) -> dict[str, list[str]]:
    """Side inputs of every fusion layer that exists under ``cfg``.

    A fusion with no available side input is dropped from the network.
    """
    sides: dict[str, list[str]] = {}
    if cfg.serial:
        return sides
    if cfg.subnet2 and cfg.subnet1 and cfg.subnet2_fms:
        sides["subnet2.fm1"] = ["O_It"]
        sides["subnet2.fm2"] = ["O_SubNet1"]
    if cfg.subnet3:
        if cfg.subnet2 and cfg.subnet3_first_fms:
            sides["subnet3.fm1"] = ["O_It2"]
            sides["subnet3.fm2"] = ["O_SubNet2"]
        last = [s for s, on in (("O_SubNet1", cfg.subnet1), ("O_SubNet2", cfg.subnet2)) if on]
        if last:
            sides["subnet3.fm3"] = last
    return sides


def _build(cfg: ModelConfig, b: ParamBuilder) -> None:
    c = cfg.width
    sides = fusion_sides(cfg)

    b.conv("sb.conv1", cfg.image_channels, c)
    if not cfg.sb_single_conv:
        b.conv("sb.conv2", c, c)
        b.conv("sb.conv3", c, c)
    if cfg.sb_tm:
        b.tm("sb.tm")

    if cfg.subnet1:
        for i in (1, 2, 3):
            b.conv(f"subnet1.conv{i}", c, c)
        if cfg.subnet1_tm:
            b.tm("subnet1.tm")
        for i in (4, 5):
            b.conv(f"subnet1.conv{i}", c, c)

    if cfg.subnet2:
        for stage in (1, 2):
            b.conv(f"subnet2.conv{2 * stage - 1}", c, c)
            b.conv(f"subnet2.conv{2 * stage}", c, c)
            if cfg.subnet2_tm:
                b.tm(f"subnet2.tm{stage}")
            fm = f"subnet2.fm{stage}"
            if fm in sides:
                b.fm(fm, 1 + len(sides[fm]))
        if cfg.subnet2_tm:
            b.tm("subnet2.tm3")

    if cfg.subnet3:
        for stage in (1, 2):
            b.conv(f"subnet3.conv{stage}", c, c)
            if cfg.subnet3_tm:
                b.tm(f"subnet3.tm{2 * stage - 1}")
                b.tm(f"subnet3.tm{2 * stage}")
            fm = f"subnet3.fm{stage}"
            if fm in sides:
                b.fm(fm, 1 + len(sides[fm]))
        if cfg.subnet3_itm:
            b.itm("subnet3.itm1")
        if "subnet3.fm3" in sides:
            b.fm("subnet3.fm3", 1 + len(sides["subnet3.fm3"]))
        if cfg.subnet3_itm:
            b.itm("subnet3.itm2")

    b.conv("rb.conv", c, cfg.image_channels)


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Kaiming-uniform convs/FCLs, zero biases and positional tables, LN gain 1."""
    b = ParamBuilder(cfg.validate(), seed)
    _build(cfg, b)
    return b.params


def zero_params(cfg: ModelConfig) -> Params:
    """All learnable weights zero; LayerNorm gains stay at 1."""
    params = init_params(cfg, 0)
    for name, p in params.items():
        p.data[...] = 1.0 if name.endswith(".ln.g") else 0.0
    return params


def param_names(cfg: ModelConfig) -> list[str]:
    return list(init_params(cfg, 0))


class _Recorder:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.entries: ActivationTrace = {}

    def __call__(self, name: str, t: Tensor) -> Tensor:
        if not np.isfinite(t.data).all():
            raise NumericFailure(name)
        if self.enabled:
            if name in self.entries:
                raise KeyError(f"duplicate trace entry {name}")
            self.entries[name] = t
        return t


def _c(x: Tensor, params: Params, name: str) -> Tensor:
    return T.conv2d(x, params[name + ".w"], params[name + ".b"])


def _cr(x: Tensor, params: Params, name: str) -> Tensor:
    return T.relu(_c(x, params, name))


def sb_forward(i_n: Tensor, params: Params, cfg: ModelConfig, rec: _Recorder) -> Tensor:
    c1 = rec("sb.conv1", _c(i_n, params, "sb.conv1"))
    if cfg.sb_single_conv:
        o_in_tm = c1
    else:
        c2 = _c(c1, params, "sb.conv2")
        if cfg.sb_relu:
            c2 = T.relu(c2)
        rec("sb.conv2", c2)
        c3 = rec("sb.conv3", _c(c2, params, "sb.conv3"))
        if cfg.sb_residual:
            o_in_tm = T.add(c3, c2 if cfg.sb_residual_from_second else c1)
        else:
            o_in_tm = c3
    rec("O_IN_TM", o_in_tm)
    if not cfg.sb_tm:
        return rec("O_SB", o_in_tm)
    if not rec.enabled:
        return rec("O_SB", tm_forward(o_in_tm, params, "sb.tm", cfg))
    o_sb, o_mhsa, o_in_cfe = tm_forward(o_in_tm, params, "sb.tm", cfg, detail=True)
    rec("O_MHSA", o_mhsa)
    rec("O_IN_CFE", o_in_cfe)
    return rec("O_SB", o_sb)


def subnet1_forward(x: Tensor, params: Params, cfg: ModelConfig, rec: _Recorder):
    """Returns (O_SubNet1, O_It, TM(O_It))."""
    a = rec("subnet1.conv1", _cr(x, params, "subnet1.conv1"))
    a = rec("subnet1.conv2", _c(a, params, "subnet1.conv2"))
    if cfg.subnet1_relu_after_residual:
        if cfg.subnet1_residual:
            a = rec("subnet1.res1", T.add(a, x))
        o_it = rec("O_It", _cr(a, params, "subnet1.conv3"))
    else:
        a = rec("subnet1.conv3", _cr(a, params, "subnet1.conv3"))
        o_it = rec("O_It", T.add(a, x) if cfg.subnet1_residual else a)
    t = rec("subnet1.tm", tm_forward(o_it, params, "subnet1.tm", cfg)) if cfg.subnet1_tm else o_it
    a = rec("subnet1.conv4", _cr(t, params, "subnet1.conv4"))
    a = rec("subnet1.conv5", _c(a, params, "subnet1.conv5"))
    out = T.add(t, a) if cfg.subnet1_residual else a
    return rec("O_SubNet1", out), o_it, t


def subnet2_forward(x: Tensor, params: Params, cfg: ModelConfig, rec: _Recorder,
                    sym: dict[str, Tensor]):
    """Returns (O_SubNet2, O_It2, O_It3); O_It3 is None when its fusion is absent."""
    sides = fusion_sides(cfg)
    o_it3 = None
    h = x
    for stage in (1, 2):
        a = rec(f"subnet2.conv{2 * stage - 1}", _cr(h, params, f"subnet2.conv{2 * stage - 1}"))
        a = rec(f"subnet2.conv{2 * stage}", _c(a, params, f"subnet2.conv{2 * stage}"))
        if cfg.subnet2_residual:
            a = rec(f"subnet2.res{stage}", T.add(a, h))
        if cfg.subnet2_tm:
            a = rec(f"subnet2.tm{stage}", tm_forward(a, params, f"subnet2.tm{stage}", cfg))
        fm = f"subnet2.fm{stage}"
        if fm in sides:
            sym_name = "O_It3" if stage == 1 else "O_It2"
            a = rec(sym_name, fm_forward([a] + [sym[s] for s in sides[fm]], params, fm))
        if stage == 1 and fm in sides:
            o_it3 = a
        h = a
    o_it2 = h
    sym["O_It2"] = o_it2
    out = tm_forward(o_it2, params, "subnet2.tm3", cfg) if cfg.subnet2_tm else o_it2
    return rec("O_SubNet2", out), o_it2, o_it3


def subnet3_forward(x: Tensor, params: Params, cfg: ModelConfig, rec: _Recorder,
                    sym: dict[str, Tensor]) -> Tensor:
    sides = fusion_sides(cfg)
    h = x
    for stage in (1, 2):
        h = rec(f"subnet3.conv{stage}", _cr(h, params, f"subnet3.conv{stage}"))
        if cfg.subnet3_tm:
            for k in (2 * stage - 1, 2 * stage):
                h = rec(f"subnet3.tm{k}", tm_forward(h, params, f"subnet3.tm{k}", cfg))
        fm = f"subnet3.fm{stage}"
        if fm in sides:
            h = rec(fm, fm_forward([h] + [sym[s] for s in sides[fm]], params, fm))
    if cfg.subnet3_itm:
        h = rec("subnet3.itm1", itm_forward(h, params, "subnet3.itm1", cfg))
    if "subnet3.fm3" in sides:
        h = rec("subnet3.fm3", fm_forward([h] + [sym[s] for s in sides["subnet3.fm3"]],
                                           params, "subnet3.fm3"))
    if cfg.subnet3_itm:
        h = rec("subnet3.itm2", itm_forward(h, params, "subnet3.itm2", cfg))
    return h


def pb_forward(o_sb: Tensor, params: Params, cfg: ModelConfig, rec: _Recorder) -> Tensor:
    sym: dict[str, Tensor] = {"O_SB": o_sb}
    latest = o_sb
    branch_outputs = []
    if cfg.subnet1:
        s1, o_it, _ = subnet1_forward(o_sb, params, cfg, rec)
        sym.update(O_SubNet1=s1, O_It=o_it)
        latest = s1
        branch_outputs.append(s1)
    if cfg.subnet2:
        s2, _, _ = subnet2_forward(latest if cfg.serial else o_sb, params, cfg, rec, sym)
        sym["O_SubNet2"] = s2
        latest = s2
        branch_outputs.append(s2)
    if cfg.subnet3:
        o_pb = subnet3_forward(latest if cfg.serial else o_sb, params, cfg, rec, sym)
    elif cfg.serial or not branch_outputs:
        o_pb = latest
    else:
        o_pb = branch_outputs[0]
        for t in branch_outputs[1:]:
            o_pb = T.add(o_pb, t)
    return rec("O_PB", o_pb)


def rb_forward(i_n: Tensor, o_pb: Tensor, params: Params, rec: _Recorder) -> Tensor:
    return T.sub(i_n, rec("rb.conv", _c(o_pb, params, "rb.conv")))


def ctnet_forward(i_n, params: Params, cfg: ModelConfig, trace: bool = False):
    """Denoise an NCHW batch. Returns (I_C, ActivationTrace or None).

    Inputs whose sides are not multiples of ``window * token_patch`` are
    reflection-padded at the bottom/right and the output is cropped back.
    """
    i_n = T.as_tensor(i_n)
    if i_n.ndim != 4 or i_n.shape[1] != cfg.image_channels:
        raise T.ShapeError(f"expected [N,{cfg.image_channels},H,W] input, got {i_n.shape}")
    if not np.isfinite(i_n.data).all():
        raise NumericFailure("input")
    h, w = i_n.shape[2:]
    m = cfg.spatial_multiple
    x = T.reflect_pad(i_n, -h % m, -w % m)
    rec = _Recorder(trace)
    o_sb = sb_forward(x, params, cfg, rec)
    o_pb = pb_forward(o_sb, params, cfg, rec)
    i_c = T.crop(rb_forward(x, o_pb, params, rec), h, w)
    rec("I_C", i_c)
    return i_c, (rec.entries if trace else None)


def trace_names(cfg: ModelConfig) -> list[str]:
    """Documented trace entry list, in forward order, for ``cfg``."""
    sides = fusion_sides(cfg)
    names = ["sb.conv1"]
    if not cfg.sb_single_conv:
        names += ["sb.conv2", "sb.conv3"]
    names.append("O_IN_TM")
    if cfg.sb_tm:
        names += ["O_MHSA", "O_IN_CFE"]
    names.append("O_SB")
    if cfg.subnet1:
        names += ["subnet1.conv1", "subnet1.conv2"]
        if cfg.subnet1_relu_after_residual:
            names += (["subnet1.res1"] if cfg.subnet1_residual else []) + ["O_It"]
        else:
            names += ["subnet1.conv3", "O_It"]
        if cfg.subnet1_tm:
            names.append("subnet1.tm")
        names += ["subnet1.conv4", "subnet1.conv5", "O_SubNet1"]
    if cfg.subnet2:
        for stage in (1, 2):
            names += [f"subnet2.conv{2 * stage - 1}", f"subnet2.conv{2 * stage}"]
            if cfg.subnet2_residual:
                names.append(f"subnet2.res{stage}")
            if cfg.subnet2_tm:
                names.append(f"subnet2.tm{stage}")
            if f"subnet2.fm{stage}" in sides:
                names.append("O_It3" if stage == 1 else "O_It2")
        names.append("O_SubNet2")
    if cfg.subnet3:
        for stage in (1, 2):
            names.append(f"subnet3.conv{stage}")
            if cfg.subnet3_tm:
                names += [f"subnet3.tm{2 * stage - 1}", f"subnet3.tm{2 * stage}"]
            if f"subnet3.fm{stage}" in sides:
                names.append(f"subnet3.fm{stage}")
        if cfg.subnet3_itm:
            names.append("subnet3.itm1")
        if "subnet3.fm3" in sides:
            names.append("subnet3.fm3")
        if cfg.subnet3_itm:
            names.append("subnet3.itm2")
    names += ["O_PB", "rb.conv", "I_C"]
    return names


def params_to_numpy(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_numpy(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}
