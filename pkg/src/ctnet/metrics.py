"""PSNR evaluation and linear-CKA layer similarity."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, NoiseSpec
from .data import add_awgn, keyed_rng
from .imageio import quantize
from .model import ctnet_forward
from .tensor import no_grad

CKA_THRESHOLD = 0.6


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def format_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def denoise(img: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    """[C,H,W] -> [C,H,W] without building a graph."""
    with no_grad():
        out, _ = ctnet_forward(img[None], params, cfg)
    return out.data[0]


@dataclass
class PsnrRow:
    dataset: str
    sigma: float
    image: str
    psnr: float


@dataclass
class PsnrTable:
    rows: list[PsnrRow] = field(default_factory=list)

    def averages(self) -> dict[tuple[str, float], float]:
        out: dict[tuple[str, float], list[float]] = {}
        for r in self.rows:
            out.setdefault((r.dataset, r.sigma), []).append(r.psnr)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "sigma", "image", "psnr"])
        for r in self.rows:
            w.writerow([r.dataset, f"{r.sigma:g}", r.image, format_psnr(r.psnr)])
        return buf.getvalue()


def evaluate(params, cfg: ModelConfig, images: list[tuple[str, np.ndarray]], sigmas,
             dataset: str = "dataset", seed: int = 0, threads: int = 1) -> PsnrTable:
    """PSNR of quantized 8-bit outputs against clean images, per image and sigma.

    The noise field for image ``i`` at level ``sigma`` is keyed by
    (seed, i, round(100 * sigma)).
    """
    if not images:
        raise ValueError("evaluate needs at least one image")

    def one(job):
        (i, (name, clean)), sigma = job
        rng = keyed_rng(seed, i, int(round(sigma * 100)))
        noisy, _ = add_awgn(clean, NoiseSpec(sigma=sigma), rng)
        out = quantize(denoise(noisy, params, cfg)).astype(np.float64) / 255.0
        return PsnrRow(dataset, float(sigma), name, psnr(out, clean))

    jobs = [(item, s) for s in sigmas for item in enumerate(images)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(one, jobs))
    else:
        rows = [one(j) for j in jobs]
    return PsnrTable(rows)


# -- CKA -------------------------------------------------------------------------

class DegenerateActivation(ValueError):
    pass


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between [samples, features] matrices (columns centered here)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need [n, p] and [n, q] matrices, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("linear CKA needs at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise DegenerateActivation("zero-variance activation matrix; CKA undefined")
    return float(np.linalg.norm(y.T @ x) ** 2 / (xx * yy))


@dataclass
class CkaProfile:
    names: list[str]
    matrix: np.ndarray  # NaN where undefined
    ratios: np.ndarray  # fraction of other layers with CKA < threshold
    degenerate: list[str]
    threshold: float = CKA_THRESHOLD

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + self.names)
        for n, row in zip(self.names, self.matrix):
            w.writerow([n] + ["nan" if np.isnan(v) else f"{v:.10f}" for v in row])
        return buf.getvalue()

    def ratios_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "ratio_below_threshold"])
        for n, r in zip(self.names, self.ratios):
            w.writerow([n, "nan" if np.isnan(r) else f"{r:.6f}"])
        return buf.getvalue()

    def heatmap_pgm(self, cell: int = 8) -> bytes:
        """Grayscale rendering, white = CKA 1, black = 0, mid-gray = undefined."""
        m = np.where(np.isnan(self.matrix), 0.5, self.matrix)
        px = np.kron(np.clip(m, 0, 1), np.ones((cell, cell)))
        q = np.floor(px * 255 + 0.5).astype(np.uint8)
        h, w = q.shape
        return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def ratios_from_matrix(m: np.ndarray, threshold: float = CKA_THRESHOLD) -> np.ndarray:
    """Per layer: share of the other defined layers whose CKA is below threshold."""
    n = len(m)
    out = np.full(n, np.nan)
    for i in range(n):
        others = [m[i, j] for j in range(n) if j != i and not np.isnan(m[i, j])]
        if others and not np.isnan(m[i, i]):
            out[i] = sum(v < threshold for v in others) / len(others)
    return out


def cka_matrix(acts: dict[str, np.ndarray]) -> tuple[np.ndarray, list[str]]:
    names = list(acts)
    flat = {}
    degenerate = []
    for n in names:
        a = acts[n]
        f = a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])
        if np.allclose(f, f.mean(axis=0), rtol=0, atol=0):
            degenerate.append(n)
        flat[n] = f - f.mean(axis=0)
    grams = {n: flat[n].T @ flat[n] for n in names if n not in degenerate}
    norms = {n: np.linalg.norm(g) for n, g in grams.items()}
    k = len(names)
    m = np.full((k, k), np.nan)
    for i, a in enumerate(names):
        if a in degenerate:
            continue
        m[i, i] = 1.0
        for j in range(i + 1, k):
            b = names[j]
            if b in degenerate:
                continue
            v = np.linalg.norm(flat[b].T @ flat[a]) ** 2 / (norms[a] * norms[b])
            m[i, j] = m[j, i] = v
    return m, degenerate


def cka_profile(params, cfg: ModelConfig, probes: np.ndarray, layers: list[str] | None = None,
                threshold: float = CKA_THRESHOLD) -> CkaProfile:
    """Pairwise linear CKA over traced activations of a probe batch [N,C,H,W].

    Activations are cropped to the probe size and flattened so that each
    pixel of each image is one sample and each channel one feature.
    """
    with no_grad():
        _, trace = ctnet_forward(probes, params, cfg, trace=True)
    h, w = probes.shape[2:]
    names = layers or list(trace)
    if len(names) < 2:
        raise ValueError("CKA profile needs at least two traced layers")
    acts = {n: trace[n].data[:, :, :h, :w] for n in names}
    m, degenerate = cka_matrix(acts)
    return CkaProfile(names, m, ratios_from_matrix(m, threshold), degenerate, threshold)
