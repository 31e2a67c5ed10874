"""Transformer and fusion building blocks of CTNet.

Feature maps are NCHW tensors. A Transformer mechanism (TM) cuts the map
into non-overlapping windows of ``window x window`` tokens, each token being
a ``token_patch x token_patch`` pixel patch flattened over channels, and
runs pre-norm self-attention followed by channel feature enhancement (CFE)
inside every window.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor

Params = dict[str, Tensor]

# axis order taking [N, C, Hb, w, p, Wb, w, p] to [N, Hb, Wb, w, w, C, p, p]
_TOKEN_PERM = (0, 2, 5, 3, 6, 1, 4, 7)


def tokenize(x: Tensor, window: int, patch: int = 1) -> Tensor:
    """[N,C,H,W] -> [N * windows, window**2, C * patch**2]."""
    n, c, h, w = x.shape
    m = window * patch
    if h % m or w % m:
        raise T.ShapeError(f"feature map {h}x{w} is not a multiple of window*patch={m}")
    hb, wb = h // m, w // m
    y = T.reshape(x, (n, c, hb, window, patch, wb, window, patch))
    y = T.permute(y, _TOKEN_PERM)
    return T.reshape(y, (n * hb * wb, window * window, c * patch * patch))


def detokenize(t: Tensor, shape: tuple[int, int, int, int], window: int, patch: int = 1) -> Tensor:
    n, c, h, w = shape
    m = window * patch
    hb, wb = h // m, w // m
    if t.shape != (n * hb * wb, window * window, c * patch * patch):
        raise T.ShapeError(f"token tensor {t.shape} does not match map {shape}")
    y = T.reshape(t, (n, hb, wb, window, window, c, patch, patch))
    y = T.permute(y, tuple(int(i) for i in np.argsort(_TOKEN_PERM)))
    return T.reshape(y, shape)


def _lin(t: Tensor, params: Params, name: str) -> Tensor:
    return T.linear(t, params[name + ".w"], params[name + ".b"])


def _ln(t: Tensor, params: Params, name: str, eps: float) -> Tensor:
    return T.layer_norm(t, params[name + ".g"], params[name + ".b"], eps)


def mhsa_forward(t: Tensor, params: Params, prefix: str, heads: int, scale: float,
                 eps: float = 1e-5) -> Tensor:
    """Multi-head self-attention on tokens [B, T, D]; Q, K, V share one LayerNorm."""
    b, n, d = t.shape
    if d % heads:
        raise T.ShapeError(f"embedding dim {d} not divisible by {heads} heads")
    dh = d // heads
    normed = _ln(t, params, prefix + ".ln", eps)

    def split(name):
        y = _lin(normed, params, f"{prefix}.{name}")
        return T.permute(T.reshape(y, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    logits = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / scale)
    attn = T.softmax(logits)
    mixed = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return _lin(mixed, params, prefix + ".o")


def cfe_forward(y: Tensor, params: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    """FCL(FCL+ReLU(LN(y))) + y."""
    h = T.relu(_lin(_ln(y, params, prefix + ".ln", eps), params, prefix + ".fc1"))
    return T.add(_lin(h, params, prefix + ".fc2"), y)


def tm_tokens(t: Tensor, params: Params, prefix: str, cfg: ModelConfig):
    """TM on tokens. Returns (output, O_MHSA, O_IN_CFE)."""
    t = T.add(t, params[prefix + ".pos"])
    o_mhsa = mhsa_forward(t, params, prefix + ".mhsa", cfg.heads, cfg.scale, cfg.ln_eps)
    o_in_cfe = T.add(o_mhsa, t)
    return cfe_forward(o_in_cfe, params, prefix + ".cfe", cfg.ln_eps), o_mhsa, o_in_cfe


def tm_forward(x: Tensor, params: Params, prefix: str, cfg: ModelConfig, detail: bool = False):
    """Shape-preserving TM on an NCHW map.

    With ``detail`` the detokenized O_MHSA and O_IN_CFE maps are returned too.
    """
    t = tokenize(x, cfg.window, cfg.token_patch)
    out, o_mhsa, o_in_cfe = tm_tokens(t, params, prefix, cfg)
    y = detokenize(out, x.shape, cfg.window, cfg.token_patch)
    if not detail:
        return y
    return (y, detokenize(o_mhsa, x.shape, cfg.window, cfg.token_patch),
            detokenize(o_in_cfe, x.shape, cfg.window, cfg.token_patch))


def itm_forward(x: Tensor, params: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    """FCL with residual, TM, then FCL(FCL+ReLU) with residual from the TM output."""
    t = tokenize(x, cfg.window, cfg.token_patch)
    y1 = T.add(_lin(t, params, prefix + ".fc_in"), t)
    y2, _, _ = tm_tokens(y1, params, prefix + ".tm", cfg)
    y3 = T.add(_lin(T.relu(_lin(y2, params, prefix + ".fc1")), params, prefix + ".fc2"), y2)
    return detokenize(y3, x.shape, cfg.window, cfg.token_patch)


def fm_forward(inputs: list[Tensor], params: Params, prefix: str) -> Tensor:
    """Concatenate along channels, then a depthwise-separable conv back to the base width."""
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != ref:
            raise T.ShapeError(f"fusion inputs differ in shape: {[i.shape for i in inputs]}")
    cat = T.concat_channels(inputs)
    dw = T.depthwise_conv2d(cat, params[prefix + ".dw.w"])
    return T.pointwise_conv2d(dw, params[prefix + ".pw.w"], params[prefix + ".pw.b"])


# -- parameter builders --------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # gain for leaky-relu slope sqrt(5): bound = 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamBuilder:
    """Creates named parameters in a fixed order from one seeded generator."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.params: Params = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(value, requires_grad=True)

    def conv(self, name: str, cin: int, cout: int) -> None:
        self._add(name + ".w", kaiming_uniform(self.rng, (cout, cin, 3, 3), cin * 9))
        self._add(name + ".b", np.zeros(cout))

    def fcl(self, name: str, din: int, dout: int) -> None:
        self._add(name + ".w", kaiming_uniform(self.rng, (dout, din), din))
        self._add(name + ".b", np.zeros(dout))

    def ln(self, name: str, d: int) -> None:
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    def tm(self, name: str) -> None:
        d = self.cfg.embed_dim
        self._add(name + ".pos", np.zeros((self.cfg.tokens_per_window, d)))
        self.ln(name + ".mhsa.ln", d)
        for proj in ("q", "k", "v", "o"):
            self.fcl(f"{name}.mhsa.{proj}", d, d)
        self.ln(name + ".cfe.ln", d)
        hidden = self.cfg.cfe_hidden_ratio * d
        self.fcl(name + ".cfe.fc1", d, hidden)
        self.fcl(name + ".cfe.fc2", hidden, d)

    def itm(self, name: str) -> None:
        d = self.cfg.embed_dim
        self.fcl(name + ".fc_in", d, d)
        self.tm(name + ".tm")
        self.fcl(name + ".fc1", d, d)
        self.fcl(name + ".fc2", d, d)

    def fm(self, name: str, n_inputs: int) -> None:
        c = self.cfg.width
        self._add(name + ".dw.w", kaiming_uniform(self.rng, (n_inputs * c, 1, 3, 3), 9))
        self._add(name + ".pw.w", kaiming_uniform(self.rng, (c, n_inputs * c, 1, 1), n_inputs * c))
        self._add(name + ".pw.b", np.zeros(c))
