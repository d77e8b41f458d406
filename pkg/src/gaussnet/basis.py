"""Gaussian-derivative filter bank up to second order.

The six planes are ordered ``(G, Gx, Gy, Gxx, Gxy, Gyy)``.  Row index is ``y``,
column index is ``x``; every plane is an outer product ``fy[j] (x) fx[j]`` of two
1-D factors, which the convolution engine exploits.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

PLANE_NAMES = ("G", "Gx", "Gy", "Gxx", "Gxy", "Gyy")
MODES = ("analytic", "sobel")

# (y-order, x-order) of each plane
_ORDERS = ((0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0))


@dataclass(frozen=True, eq=False)
class GaussBasis:
    sigma: float
    support: int
    mode: str
    fy: tuple  # six 1-D arrays
    fx: tuple

    @property
    def radius(self) -> int:
        return self.support // 2

    @cached_property
    def planes(self) -> np.ndarray:
        """Dense ``(6, support, support)`` array, float64."""
        planes = np.stack([np.outer(a, b) for a, b in zip(self.fy, self.fx)])
        planes.setflags(write=False)
        return planes

    def key(self) -> tuple:
        return (self.mode, round(float(self.sigma), 12), int(self.support))


@dataclass(frozen=True)
class LipschitzEstimate:
    c_g: float
    per_plane_sup: tuple
    basis_sup: float

    def as_dict(self) -> dict:
        return {"c_g": self.c_g, "per_plane_sup": list(self.per_plane_sup), "basis_sup": self.basis_sup}


def default_support(sigma: float) -> int:
    return 2 * math.ceil(3 * sigma) + 1


def gaussian_derivatives_1d(sigma: float, radius: int) -> np.ndarray:
    """Samples of the 1-D density and its first two derivatives on ``-radius..radius``."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g0 = np.exp(-(x**2) / (2 * sigma**2)) / (math.sqrt(2 * math.pi) * sigma)
    g1 = -x / sigma**2 * g0
    g2 = (x**2 / sigma**4 - 1 / sigma**2) * g0
    return np.stack([g0, g1, g2])


def sampled_planes(sigma: float, support: int) -> np.ndarray:
    """Unnormalised samples of the 2-D density derivatives (centre of plane 0 is 1/(2 pi sigma^2))."""
    g = gaussian_derivatives_1d(sigma, support // 2)
    return np.stack([np.outer(g[oy], g[ox]) for oy, ox in _ORDERS])


def _smooth(v):
    return np.convolve(v, [0.25, 0.5, 0.25], mode="same")


def _diff(v):
    # convolution with [1, 0, -1] / 2 gives (v[i+1] - v[i-1]) / 2
    return np.convolve(v, [0.5, 0.0, -0.5], mode="same")


def build_basis(sigma: float, support: int | None = None, mode: str = "analytic") -> GaussBasis:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if support is None:
        support = default_support(sigma)
    support = int(support)
    if support < 3 or support % 2 == 0:
        raise ValueError(f"support must be odd and >= 3, got {support}")
    if mode not in MODES:
        raise ValueError(f"unknown basis mode {mode!r}")
    r = support // 2
    if mode == "analytic":
        g = gaussian_derivatives_1d(sigma, r)
        g = g / g[0].sum()
        f = {0: g[0], 1: g[1], 2: g[2]}
        fy = tuple(f[oy] for oy, _ in _ORDERS)
        fx = tuple(f[ox] for _, ox in _ORDERS)
    else:
        # Sobel-Feldman stencil = smoothing [1,2,1]/4 across, central difference along;
        # sample two extra pixels so the stencil never sees the truncation edge
        g = gaussian_derivatives_1d(sigma, r + 2)[0]
        g = g / g[2:-2].sum()
        s, dg = _smooth(g), _diff(g)
        ss, dd = _smooth(s), _diff(dg)
        sd = _smooth(dg)
        ds = _diff(s)
        cut = slice(2, -2)
        first = {"G": (g, g), "Gx": (s, dg), "Gy": (dg, s), "Gxx": (ss, dd), "Gxy": (sd, ds), "Gyy": (dd, ss)}
        fy = tuple(first[n][0][cut].copy() for n in PLANE_NAMES)
        fx = tuple(first[n][1][cut].copy() for n in PLANE_NAMES)
    return GaussBasis(float(sigma), support, mode, fy, fx)


@lru_cache(maxsize=256)
def cached_basis(sigma: float, support: int | None, mode: str = "analytic") -> GaussBasis:
    return build_basis(sigma, support, mode)


def synthesize_kernel(basis: GaussBasis, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return np.tensordot(w, basis.planes, axes=1)


def estimate_lipschitz(basis_or_planes) -> LipschitzEstimate:
    """Discrete Lipschitz constant: largest unit-shift difference of any plane.

    Values beyond the support are taken as zero, so the outermost ring counts too.
    """
    planes = basis_or_planes.planes if isinstance(basis_or_planes, GaussBasis) else np.asarray(basis_or_planes)
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)))
    dx = np.abs(np.diff(padded, axis=2)).max()
    dy = np.abs(np.diff(padded, axis=1)).max()
    per_plane = tuple(float(v) for v in np.abs(planes).max(axis=(1, 2)))
    return LipschitzEstimate(float(max(dx, dy)), per_plane, float(max(per_plane)))


def sigma_schedule(base_sigma: float, layer_index: int, d: int) -> float:
    """Width for layer ``layer_index`` (1-based) of an un-sub-sampled net mimicking stride ``d``."""
    if layer_index < 1 or d < 1:
        raise ValueError("layer index and factor must be >= 1")
    return base_sigma * d ** (layer_index - 1)


def dump_basis(basis: GaussBasis, out_dir) -> list[Path]:
    """Write one row-major CSV per plane and return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, plane in zip(PLANE_NAMES, basis.planes):
        p = out_dir / f"plane_{name}.csv"
        with open(p, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in plane:
                writer.writerow([repr(float(v)) for v in row])
        paths.append(p)
    return paths
