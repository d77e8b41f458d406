"""Same-size linear convolution under zero extension.

All routes compute ``out(x) = sum_y k(x - y) in(y)`` with the kernel centred on its
middle pixel, so odd kernel sides are required.  Three routes exist:

* ``direct``    tap-by-tap summation over the full 2-D kernel,
* ``separable`` two 1-D passes, for kernels given as outer products,
* ``fft``       zero-padded (never circular) transforms, padded to a power of two.
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .basis import GaussBasis

METHODS = ("direct", "separable", "fft")
FFT_THRESHOLD = 15  # kernels wider than this go through the FFT under method="auto"

COUNTERS: Counter = Counter()
_SPECTRA: dict = {}
_SPECTRA_LOCK = threading.Lock()


def reset_counters() -> None:
    COUNTERS.clear()


def clear_spectrum_cache() -> None:
    with _SPECTRA_LOCK:
        _SPECTRA.clear()


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@dataclass(frozen=True)
class ConvPlan:
    input_shape: tuple
    kernel_size: int
    method: str
    padded_size: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel side must be odd")
        if self.method == "fft":
            side = max(self.input_shape[-2:])
            if self.padded_size is None or self.padded_size < side + self.kernel_size - 1:
                raise ValueError("fft plan must pad to at least input + kernel - 1 (linear convolution)")

    def check(self, m: np.ndarray, kernel_size: int) -> None:
        if tuple(m.shape[-2:]) != tuple(self.input_shape[-2:]) or kernel_size != self.kernel_size:
            raise ValueError(
                f"plan for {self.input_shape[-2:]} / k={self.kernel_size} used with "
                f"{m.shape[-2:]} / k={kernel_size}"
            )


def make_plan(input_shape, kernel_size: int, method: str = "auto") -> ConvPlan:
    if method == "auto":
        method = "fft" if kernel_size > FFT_THRESHOLD else "direct"
    padded = None
    if method == "fft":
        padded = _next_pow2(max(input_shape[-2:]) + kernel_size - 1)
    return ConvPlan(tuple(int(v) for v in input_shape), int(kernel_size), method, padded)


# ----------------------------------------------------------------------------- direct routes


@lru_cache(maxsize=512)
def _band(kbytes: bytes, length: int, n: int, dtype: str) -> np.ndarray:
    k = np.frombuffer(kbytes, dtype=np.float64)
    r = length // 2
    band = np.zeros((n, n), dtype=dtype)
    # out[i] = sum_j in[j] band[j, i] with band[j, i] = k[i - j + r]
    for t in range(length):
        off = t - r
        j = np.arange(max(0, -off), min(n, n - off))
        band[j, j + off] = k[t]
    band.setflags(write=False)
    return band


def band_matrix(k, n: int, dtype=np.float64) -> np.ndarray:
    """``n x n`` matrix ``B`` with ``x @ B`` = same-size convolution of rows of ``x`` with ``k``."""
    k = np.ascontiguousarray(k, dtype=np.float64)
    return _band(k.tobytes(), len(k), int(n), np.dtype(dtype).str)


def conv1d(m: np.ndarray, k, axis: int) -> np.ndarray:
    """Same-size 1-D convolution of every row (axis=-1) or column (axis=-2)."""
    if axis == -1:
        return np.matmul(m, band_matrix(k, m.shape[-1], m.dtype))
    if axis == -2:
        return np.matmul(band_matrix(k, m.shape[-2], m.dtype).T, m)
    raise ValueError("axis must be -1 or -2")


def conv1d_adjoint(g: np.ndarray, k, axis: int) -> np.ndarray:
    if axis == -1:
        return np.matmul(g, band_matrix(k, g.shape[-1], g.dtype).T)
    if axis == -2:
        return np.matmul(band_matrix(k, g.shape[-2], g.dtype), g)
    raise ValueError("axis must be -1 or -2")


def conv_separable(m: np.ndarray, ky, kx) -> np.ndarray:
    return conv1d(conv1d(m, kx, axis=-1), ky, axis=-2)


def conv_separable_adjoint(g: np.ndarray, ky, kx) -> np.ndarray:
    return conv1d_adjoint(conv1d_adjoint(g, ky, axis=-2), kx, axis=-1)


def conv_direct(m: np.ndarray, kernel) -> np.ndarray:
    """Convolve every channel of ``m`` with one 2-D kernel."""
    kernel = np.asarray(kernel, dtype=m.dtype)
    ky, kx = kernel.shape
    if ky % 2 == 0 or kx % 2 == 0:
        raise ValueError("kernel sides must be odd")
    ry, rx = ky // 2, kx // 2
    h, w = m.shape[-2:]
    mp = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(ry, ry), (rx, rx)])
    out = np.zeros_like(m)
    for ty in range(ky):
        for tx in range(kx):
            v = kernel[ty, tx]
            if v == 0:
                continue
            y0, x0 = 2 * ry - ty, 2 * rx - tx
            out += v * mp[..., y0:y0 + h, x0:x0 + w]
    return out


# ----------------------------------------------------------------------------- fft route


def _spectrum(kernel: np.ndarray, size: int) -> np.ndarray:
    key = (kernel.shape, kernel.tobytes(), size)
    spec = _SPECTRA.get(key)
    if spec is None:
        spec = np.fft.rfft2(kernel.astype(np.float64), s=(size, size))
        COUNTERS["kernel_fft"] += 1
        with _SPECTRA_LOCK:
            _SPECTRA.setdefault(key, spec)
    return spec


def _forward_fft(m: np.ndarray, size: int) -> np.ndarray:
    COUNTERS["fft_forward"] += int(np.prod(m.shape[:-2]))
    return np.fft.rfft2(m.astype(np.float64), s=(size, size))


def _inverse_fft(spec: np.ndarray, size: int, h: int, w: int, r: int, dtype) -> np.ndarray:
    COUNTERS["fft_inverse"] += int(np.prod(spec.shape[:-2]))
    full = np.fft.irfft2(spec, s=(size, size))
    return full[..., r:r + h, r:r + w].astype(dtype)


def conv_fft(m: np.ndarray, kernel, plan: ConvPlan | None = None) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[0] != kernel.shape[1]:
        raise ValueError("fft route expects square kernels")
    k = kernel.shape[0]
    if plan is None:
        plan = make_plan(m.shape, k, "fft")
    if plan.method != "fft":
        raise ValueError("conv_fft needs an fft plan")
    plan.check(m, k)
    h, w = m.shape[-2:]
    spec = _forward_fft(m, plan.padded_size) * _spectrum(kernel, plan.padded_size)
    return _inverse_fft(spec, plan.padded_size, h, w, k // 2, m.dtype)


def convolve(m: np.ndarray, kernel, method: str = "auto") -> np.ndarray:
    kernel = np.asarray(kernel)
    plan = make_plan(m.shape, kernel.shape[0], method if method != "separable" else "direct")
    if plan.method == "fft":
        return conv_fft(m, kernel, plan)
    return conv_direct(m, kernel)


# ----------------------------------------------------------------------------- basis filtering


def resolve_method(basis: GaussBasis, method: str = "auto") -> str:
    if method == "auto":
        return "fft" if basis.support > FFT_THRESHOLD else "separable"
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return method


def _groups(factors):
    """Group plane indices that share an identical factor."""
    groups: list[tuple[np.ndarray, list[int]]] = []
    for j, f in enumerate(factors):
        for g, idx in groups:
            if g.shape == f.shape and np.array_equal(g, f):
                idx.append(j)
                break
        else:
            groups.append((f, [j]))
    return groups


def basis_responses(m: np.ndarray, basis: GaussBasis, method: str = "auto") -> np.ndarray:
    """Filter each channel with the six planes; returns ``(b, c, 6, h, w)``."""
    method = resolve_method(basis, method)
    b, c, h, w = m.shape
    out = np.empty((b, c, 6, h, w), dtype=m.dtype)
    if method == "separable":
        groups = _groups(basis.fx)
        bands = np.concatenate([band_matrix(fx, w, m.dtype) for fx, _ in groups], axis=1)
        xr = np.matmul(m, bands)
        for g, (_, idx) in enumerate(groups):
            part = xr[..., g * w:(g + 1) * w]
            for j in idx:
                out[:, :, j] = conv1d(part, basis.fy[j], axis=-2)
    elif method == "direct":
        for j, plane in enumerate(basis.planes):
            out[:, :, j] = conv_direct(m, plane)
    else:
        plan = make_plan(m.shape, basis.support, "fft")
        size = plan.padded_size
        xs = _forward_fft(m, size)
        for j, plane in enumerate(basis.planes):
            out[:, :, j] = _inverse_fft(xs * _spectrum(plane, size), size, h, w, basis.radius, m.dtype)
    return out


def basis_responses_adjoint(g: np.ndarray, basis: GaussBasis, method: str = "auto") -> np.ndarray:
    """Adjoint of :func:`basis_responses`: ``(b, c, 6, h, w) -> (b, c, h, w)``."""
    method = resolve_method(basis, method)
    b, c, _, h, w = g.shape
    if method == "separable":
        out = np.zeros((b, c, h, w), dtype=g.dtype)
        for fx, idx in _groups(basis.fx):
            acc = np.zeros_like(out)
            for j in idx:
                acc += conv1d_adjoint(g[:, :, j], basis.fy[j], axis=-2)
            out += conv1d_adjoint(acc, fx, axis=-1)
        return out
    planes = basis.planes[:, ::-1, ::-1]
    if method == "direct":
        out = np.zeros((b, c, h, w), dtype=g.dtype)
        for j in range(6):
            out += conv_direct(g[:, :, j], planes[j])
        return out
    plan = make_plan((b, c, h, w), basis.support, "fft")
    size = plan.padded_size
    spec = np.zeros((b, c, size, size // 2 + 1), dtype=np.complex128)
    for j in range(6):
        spec += _forward_fft(g[:, :, j], size) * _spectrum(np.ascontiguousarray(planes[j]), size)
    return _inverse_fft(spec, size, h, w, basis.radius, g.dtype)


def check_basis_weights(weights: np.ndarray, channels: int) -> None:
    if weights.ndim != 2 or weights.shape[1] != 6 * channels:
        raise ValueError(f"weights must be (m, 6*{channels}), got {weights.shape}")


def mix(responses: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``out[b, k] = sum_{c, j} W[k, 6c + j] responses[b, c, j]``."""
    b, c, _, h, w = responses.shape
    flat = responses.reshape(b, c * 6, h * w)
    out = np.matmul(weights.astype(responses.dtype), flat)
    return out.reshape(b, weights.shape[0], h, w)


def conv_basis(m: np.ndarray, basis: GaussBasis, weights, method: str = "auto") -> np.ndarray:
    """Filter each input channel with the six planes once, then mix by ``W (m x 6n)``."""
    weights = np.asarray(weights)
    check_basis_weights(weights, m.shape[1])
    return mix(basis_responses(m, basis, method), weights)


# ----------------------------------------------------------------------------- dense multi-channel kernels


def _im2col(m: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = m.shape
    r = k // 2
    mp = np.pad(m, ((0, 0), (0, 0), (r, r), (r, r)))
    cols = np.empty((b, c, k * k, h, w), dtype=m.dtype)
    for ty in range(k):
        for tx in range(k):
            y0, x0 = 2 * r - ty, 2 * r - tx
            cols[:, :, ty * k + tx] = mp[:, :, y0:y0 + h, x0:x0 + w]
    return cols


def conv_channels(m: np.ndarray, kernels, cols: np.ndarray | None = None) -> np.ndarray:
    """Full cross-channel convolution with ``kernels`` of shape ``(m, n, k, k)``."""
    kernels = np.asarray(kernels)
    mo, n, k, _ = kernels.shape
    if m.shape[1] != n:
        raise ValueError(f"kernel expects {n} input channels, map has {m.shape[1]}")
    if cols is None:
        cols = _im2col(m, k)
    b, _, _, h, w = cols.shape
    kr = kernels.reshape(mo, n * k * k).astype(m.dtype)
    out = np.matmul(kr, cols.reshape(b, n * k * k, h * w))
    return out.reshape(b, mo, h, w)


def conv_channels_backward(cols: np.ndarray, kernels: np.ndarray, g: np.ndarray):
    """Gradients of :func:`conv_channels` w.r.t. input and kernels."""
    mo, n, k, _ = kernels.shape
    b, _, _, h, w = cols.shape
    gf = g.reshape(b, mo, h * w)
    dk = np.einsum("bop,bqp->oq", gf, cols.reshape(b, n * k * k, h * w), optimize=True)
    dcols = np.matmul(kernels.reshape(mo, n * k * k).T.astype(g.dtype), gf).reshape(b, n, k * k, h, w)
    r = k // 2
    dxp = np.zeros((b, n, h + 2 * r, w + 2 * r), dtype=g.dtype)
    for ty in range(k):
        for tx in range(k):
            y0, x0 = 2 * r - ty, 2 * r - tx
            dxp[:, :, y0:y0 + h, x0:x0 + w] += dcols[:, :, ty * k + tx]
    dx = dxp[:, :, r:r + h, r:r + w] if r else dxp
    return dx, dk.reshape(kernels.shape).astype(kernels.dtype)
