"""Permutation-invariant distances between a latent sample and the prior N(0, I).

Every distance accepts the latent sample either as a tape :class:`Var`
(returns a ``Var``) or as a plain array (returns a float / array). Samples may
carry leading batch axes ``(..., n, D)``; the result then has shape ``(...)``.
Frozen rows are simply constants on the tape, so no gradient reaches them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad

DistanceKind = Literal["mmd_imq", "cramer_wold", "sliced_wasserstein"]
KINDS = ("mmd_imq", "cramer_wold", "sliced_wasserstein")

# Elements of one pairwise (n, n, chunk) block in the Cramer-Wold estimator.
_CW_BLOCK = 1 << 22


def silverman_gamma(n: int) -> float:
    return (4.0 / (3.0 * n)) ** 0.4


@dataclass(frozen=True)
class DistanceSpec:
    kind: DistanceKind = "mmd_imq"
    kernel_scale: float | None = None  # IMQ C; None -> 2 * D
    gamma: float | None = None  # CW bandwidth; None -> Silverman for the sample size
    n_directions: int = 50

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.kernel_scale is not None and self.kernel_scale <= 0:
            raise ValueError("kernel_scale must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")

    @property
    def uses_directions(self) -> bool:
        return self.kind != "mmd_imq"

    def resolve_gamma(self, n: int) -> float:
        return silverman_gamma(n) if self.gamma is None else self.gamma

    def resolve_scale(self, dim: int) -> float:
        return 2.0 * dim if self.kernel_scale is None else self.kernel_scale

    def draw(self, rng: np.random.Generator, n: int, dim: int) -> tuple[np.ndarray, np.ndarray | None]:
        """One prior sample of ``n`` rows, then a fresh direction set if needed."""
        prior = rng.standard_normal((n, dim))
        dirs = sample_unit_directions(self.n_directions, dim, rng) if self.uses_directions else None
        return prior, dirs

    def __call__(self, latents, prior, dirs=None, *, unbiased: bool = True):
        if self.kind == "mmd_imq":
            return mmd_imq(latents, prior, self.resolve_scale(np.shape(prior)[-1]), unbiased=unbiased)
        if dirs is None:
            raise ValueError(f"{self.kind} needs a direction set")
        if self.kind == "cramer_wold":
            n = _values(latents).shape[-2]
            return cramer_wold_mc(latents, dirs, self.resolve_gamma(n))
        return sliced_wasserstein(latents, prior, dirs)


def _values(z) -> np.ndarray:
    return z.value if isinstance(z, ad.Var) else np.asarray(z, dtype=np.float64)


def _on_tape(z):
    """Return (var, standalone) where standalone means the caller passed an array."""
    if isinstance(z, ad.Var):
        return z, False
    tape = ad.Tape()
    return tape.const(np.asarray(z, dtype=np.float64)), True


def _finish(out: ad.Var, standalone: bool):
    if not standalone:
        return out
    return float(out.value) if out.value.shape == () else out.value


def sample_unit_directions(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. directions uniform on the unit sphere in R^dim."""
    if count < 1 or dim < 1:
        raise ValueError("count and dim must be positive")
    draws = rng.standard_normal((count, dim))
    norms = np.linalg.norm(draws, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        draws[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(draws, axis=1)
    return draws / norms[:, None]


def _imq_sum(sqd: ad.Var, c: float) -> ad.Var:
    kernel = ad.scale(ad.reciprocal(ad.shift(ad.sum_axis(sqd, -1), c)), c)
    return ad.sum_axis(kernel, (-2, -1))


def _imq_sum_np(a: np.ndarray, b: np.ndarray, c: float) -> np.ndarray:
    d = a[..., :, None, :] - b[..., None, :, :]
    return (c / (c + np.sum(d * d, axis=-1))).sum(axis=(-2, -1))


def mmd_imq(latents, prior, c: float | None = None, *, unbiased: bool = True):
    """MMD estimate with the inverse multiquadric kernel ``c / (c + |a - b|^2)``.

    With ``unbiased`` the within-sample sums skip the diagonal (U-statistic);
    otherwise the diagonal is kept and the estimate is non-negative.
    """
    z, standalone = _on_tape(latents)
    v = np.asarray(prior, dtype=np.float64)
    n, dim = z.shape[-2], z.shape[-1]
    nv = v.shape[-2]
    if v.shape[-1] != dim or v.shape[:-2] != z.shape[:-2]:
        raise ad.ShapeError(f"latents {z.shape} and prior {v.shape} do not conform")
    c = 2.0 * dim if c is None else float(c)
    if c <= 0:
        raise ValueError("kernel scale must be positive")
    zz = _imq_sum(ad.pairwise_sqdiff(z, z), c)
    vv = _imq_sum_np(v, v, c)
    zv = _imq_sum(ad.pairwise_sqdiff(z, v), c)
    if unbiased:
        if n < 2 or nv < 2:
            raise ValueError("unbiased MMD needs at least two latents and two prior draws")
        # kappa(a, a) == 1 exactly, so the diagonal removes as a constant
        zz_term = ad.scale(ad.shift(zz, -float(n)), 1.0 / (n * (n - 1)))
        vv_term = (vv - nv) / (nv * (nv - 1))
    else:
        zz_term = ad.scale(zz, 1.0 / (n * n))
        vv_term = vv / (nv * nv)
    out = ad.add(ad.scale(zv, -2.0 / (n * nv)), zz_term)
    out = ad.add(out, np.broadcast_to(vv_term, out.shape)) if out.shape else ad.shift(out, float(vv_term))
    return _finish(out, standalone)


def _gauss(var: float) -> float:
    return 1.0 / math.sqrt(2.0 * math.pi * var)


def cramer_wold_mc(latents, dirs, gamma: float | None = None):
    """Sliced smoothed-L2 distance to N(0, I), averaged over the given directions.

    Per direction v with projections p = Z v (n of them):
    A = mean_{i,j} g(p_i - p_j; 2 gamma) (diagonal kept), B = g(0; 2 + 2 gamma),
    C = -2 mean_i g(p_i; 1 + 2 gamma), where g(x; s2) is the N(0, s2) density.
    """
    z, standalone = _on_tape(latents)
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[0] < 1:
        raise ValueError("direction set must be a non-empty (s, D) matrix")
    n = z.shape[-2]
    if gamma is None:
        gamma = silverman_gamma(n)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = dirs.shape[0]
    batch = int(np.prod(z.shape[:-2], dtype=np.int64))
    chunk = max(1, _CW_BLOCK // max(1, n * n * batch))

    acc = None
    for lo in range(0, s, chunk):
        proj = ad.matmul(z, dirs[lo:lo + chunk].T)
        pair = ad.exp(ad.scale(ad.pairwise_sqdiff(proj, proj), -1.0 / (4.0 * gamma)))
        a_term = ad.scale(ad.sum_axis(pair, (-3, -2, -1)), _gauss(2.0 * gamma) / (n * n))
        single = ad.exp(ad.scale(ad.mul(proj, proj), -1.0 / (2.0 * (1.0 + 2.0 * gamma))))
        c_term = ad.scale(ad.sum_axis(single, (-2, -1)), -2.0 * _gauss(1.0 + 2.0 * gamma) / n)
        part = ad.add(a_term, c_term)
        acc = part if acc is None else ad.add(acc, part)
    out = ad.shift(ad.scale(acc, 1.0 / s), _gauss(2.0 * (1.0 + gamma)))
    return _finish(out, standalone)


def sliced_wasserstein(latents, prior, dirs):
    """Squared 1-D 2-Wasserstein distance between projections, averaged over directions."""
    z, standalone = _on_tape(latents)
    v = np.asarray(prior, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = z.shape[-2]
    if v.shape[-2] != n:
        raise ValueError(f"sliced Wasserstein pairs order statistics: {n} latents vs {v.shape[-2]} prior draws")
    if dirs.ndim != 2 or dirs.shape[0] < 1:
        raise ValueError("direction set must be a non-empty (s, D) matrix")
    s = dirs.shape[0]
    target = np.sort(v @ dirs.T, axis=-2, kind="stable")
    gap = ad.sub(ad.sort_rows(ad.matmul(z, dirs.T)), target)
    out = ad.scale(ad.sum_axis(ad.mul(gap, gap), (-2, -1)), 1.0 / (n * s))
    return _finish(out, standalone)
