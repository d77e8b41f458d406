"""Layer stacks: GaussNet layers, pixel-kernel baselines and pooling heads.

Every layer runs ``pad -> convolve -> affine -> ReLU [-> blur] [+ skip] -> sub-sample``.
The zero pad keeps responses from being truncated at the map edge, which is what
makes the covariance statements hold exactly on finite maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import conv
from .basis import GaussBasis, cached_basis, estimate_lipschitz
from .tensor import (
    average_subsample,
    average_subsample_adjoint,
    crop,
    subsample,
    subsample_adjoint,
    sup_norm,
    zero_pad,
)

KINDS = ("gauss", "gauss-sub", "gauss-residual", "pixel", "pixel-sub", "pixel-antialias-sub")
GAUSS_KINDS = ("gauss", "gauss-sub", "gauss-residual")
PIXEL_KINDS = ("pixel", "pixel-sub", "pixel-antialias-sub")
UNSTRIDED_KINDS = ("gauss", "pixel")
POOLINGS = ("global-average", "gauss-windowed-average")
SUBSAMPLE_MODES = ("point", "average")


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    weights: np.ndarray
    sigma: float = 0.763
    d: int = 1
    affine_scale: np.ndarray | None = None
    affine_shift: np.ndarray | None = None
    skip: np.ndarray | None = None
    support: int | str | None = None
    pad: int | None = None
    basis_mode: str = "analytic"
    method: str = "auto"
    subsample_mode: str = "point"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be an integer >= 1")
        if self.kind in UNSTRIDED_KINDS and self.d != 1:
            raise ValueError(f"{self.kind} layers do not sub-sample; use d=1")
        if self.subsample_mode not in SUBSAMPLE_MODES:
            raise ValueError(f"unknown sub-sample mode {self.subsample_mode!r}")
        w = np.asarray(self.weights)
        n, m = self.in_channels, self.out_channels
        if self.is_gauss:
            if w.shape != (m, 6 * n):
                raise ValueError(f"{self.kind} weights must be ({m}, {6 * n}), got {w.shape}")
            if self.sigma <= 0:
                raise ValueError("sigma must be positive")
        else:
            if w.ndim != 4 or w.shape[:2] != (m, n) or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise ValueError(f"{self.kind} weights must be ({m}, {n}, k, k) with odd k, got {w.shape}")
        if self.kind == "gauss-residual":
            if self.skip is None and n != m:
                raise ValueError("residual layers need in_channels == out_channels or a skip projection")
            if self.skip is not None and np.shape(self.skip) != (m, n):
                raise ValueError(f"skip projection must be ({m}, {n})")
        elif self.skip is not None:
            raise ValueError("only residual layers take a skip projection")
        if self.affine_scale is None:
            object.__setattr__(self, "affine_scale", np.ones(m, dtype=np.float32))
        if self.affine_shift is None:
            object.__setattr__(self, "affine_shift", np.zeros(m, dtype=np.float32))
        if np.shape(self.affine_scale) != (m,) or np.shape(self.affine_shift) != (m,):
            raise ValueError("affine parameters must have one entry per output channel")

    @property
    def is_gauss(self) -> bool:
        return self.kind in GAUSS_KINDS

    @property
    def kernel_size(self) -> int:
        return self.basis().support if self.is_gauss else int(np.shape(self.weights)[-1])

    @property
    def margin(self) -> int:
        if self.pad is not None:
            return int(self.pad)
        blur = math.ceil(3 * self.sigma)
        if self.is_gauss:
            return self.support // 2 if isinstance(self.support, int) else blur
        k = int(np.shape(self.weights)[-1]) // 2
        return k + blur if self.kind == "pixel-antialias-sub" else k

    def basis(self, padded_side: int | None = None) -> GaussBasis:
        """Gauss planes (gauss kinds) or the anti-alias blur (its plane 0)."""
        support = self.support if self.is_gauss else None
        if support == "map":
            if padded_side is None:
                raise ValueError("map-sized support needs the padded map side")
            support = padded_side if padded_side % 2 else padded_side + 1
        return cached_basis(float(self.sigma), support, self.basis_mode)

    def output_size(self, size: tuple[int, int]) -> tuple[int, int]:
        p = self.margin
        return tuple(math.ceil((s + 2 * p) / self.d) for s in size)

    def parameters(self) -> dict:
        params = {"weights": self.weights, "affine_scale": self.affine_scale, "affine_shift": self.affine_shift}
        if self.skip is not None:
            params["skip"] = self.skip
        return params


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple
    head_weight: np.ndarray
    head_bias: np.ndarray
    pooling: str = "global-average"
    window_sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"channel mismatch: {a.out_channels} -> {b.in_channels}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        feats = self.layers[-1].out_channels
        if np.ndim(self.head_weight) != 2 or np.shape(self.head_weight)[1] != feats:
            raise ValueError(f"head weight must be (classes, {feats})")
        if np.shape(self.head_bias) != (np.shape(self.head_weight)[0],):
            raise ValueError("head bias must have one entry per class")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def classes(self) -> int:
        return int(np.shape(self.head_weight)[0])

    def parameters(self) -> dict:
        """Ordered ``name -> array`` view of every learnable tensor."""
        params = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                params[f"layers.{i}.{name}"] = arr
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def with_parameters(self, params: dict) -> "NetworkSpec":
        layers = []
        for i, layer in enumerate(self.layers):
            updates = {name: params[f"layers.{i}.{name}"] for name in layer.parameters()}
            layers.append(replace(layer, **updates))
        return replace(self, layers=tuple(layers), head_weight=params["head.weight"], head_bias=params["head.bias"])

    def feature_sizes(self, size: tuple[int, int]) -> list[tuple[int, int]]:
        sizes = []
        for layer in self.layers:
            size = layer.output_size(size)
            sizes.append(size)
        return sizes


# ----------------------------------------------------------------------------- forward / backward


@dataclass
class _LayerCache:
    padded_size: tuple
    xp: np.ndarray
    features: np.ndarray  # basis responses or im2col columns
    z: np.ndarray
    a: np.ndarray
    basis: GaussBasis | None
    pre_sub_size: tuple


def _relu(a):
    return np.maximum(a, 0)


def _subsample(layer: LayerSpec, y):
    if layer.subsample_mode == "average":
        return average_subsample(y, layer.d)
    return subsample(y, layer.d)


def layer_forward(layer: LayerSpec, x: np.ndarray, keep: bool = False):
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(f"layer expects {layer.in_channels} channels, got map of shape {x.shape}")
    dtype = x.dtype
    xp = zero_pad(x, layer.margin)
    basis = None
    if layer.is_gauss:
        basis = layer.basis(max(xp.shape[-2:]))
        feats = conv.basis_responses(xp, basis, layer.method)
        z = conv.mix(feats, np.asarray(layer.weights, dtype=dtype))
    else:
        feats = conv._im2col(xp, layer.kernel_size)
        z = conv.conv_channels(xp, np.asarray(layer.weights, dtype=dtype), feats)
    scale = np.asarray(layer.affine_scale, dtype=dtype)[None, :, None, None]
    shift = np.asarray(layer.affine_shift, dtype=dtype)[None, :, None, None]
    a = z * scale + shift
    y = _relu(a)
    if layer.kind == "pixel-antialias-sub":
        blur = layer.basis()
        y = conv.conv_separable(y, blur.fy[0], blur.fx[0])
    if layer.kind == "gauss-residual":
        y = y + (xp if layer.skip is None else _project(layer.skip, xp))
    out = _subsample(layer, y)
    if not keep:
        return out
    return out, _LayerCache(xp.shape[-2:], xp, feats, z, a, basis, y.shape[-2:])


def _project(skip, x):
    b, c, h, w = x.shape
    return np.matmul(np.asarray(skip, dtype=x.dtype), x.reshape(b, c, h * w)).reshape(b, -1, h, w)


def layer_backward(layer: LayerSpec, cache: _LayerCache, g_out: np.ndarray):
    """Return ``(grad wrt layer input, {param name: grad})``."""
    dtype = g_out.dtype
    if layer.subsample_mode == "average":
        g_y = average_subsample_adjoint(g_out, layer.d, cache.pre_sub_size)
    else:
        g_y = subsample_adjoint(g_out, layer.d, cache.pre_sub_size)
    grads = {}
    g_xp = None
    if layer.kind == "gauss-residual":
        if layer.skip is None:
            g_xp = g_y
        else:
            b, c, h, w = cache.xp.shape
            gy = g_y.reshape(b, -1, h * w)
            grads["skip"] = np.einsum("bop,bip->oi", gy, cache.xp.reshape(b, c, h * w), optimize=True)
            g_xp = np.matmul(np.asarray(layer.skip, dtype=dtype).T, gy).reshape(b, c, h, w)
    if layer.kind == "pixel-antialias-sub":
        blur = layer.basis()
        g_y = conv.conv_separable_adjoint(g_y, blur.fy[0], blur.fx[0])
    g_a = g_y * (cache.a > 0)
    grads["affine_shift"] = g_a.sum(axis=(0, 2, 3), dtype=np.float64)
    grads["affine_scale"] = (g_a * cache.z).sum(axis=(0, 2, 3), dtype=np.float64)
    g_z = g_a * np.asarray(layer.affine_scale, dtype=dtype)[None, :, None, None]
    weights = np.asarray(layer.weights, dtype=dtype)
    if layer.is_gauss:
        resp = cache.features
        b, c, _, h, w = resp.shape
        gz = g_z.reshape(b, -1, h * w)
        grads["weights"] = np.einsum("bkp,bqp->kq", gz, resp.reshape(b, c * 6, h * w), optimize=True)
        d_resp = np.matmul(weights.T, gz).reshape(b, c, 6, h, w)
        g_conv = conv.basis_responses_adjoint(d_resp, cache.basis, layer.method)
    else:
        g_conv, grads["weights"] = conv.conv_channels_backward(cache.features, weights, g_z)
    g_xp = g_conv if g_xp is None else g_xp + g_conv
    return crop(g_xp, layer.margin), grads


def forward_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    return layer_forward(layer, x)


def forward_features(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Final feature map before pooling."""
    for layer in net.layers:
        x = layer_forward(layer, x)
    return x


def window(size: tuple[int, int], window_sigma: float | None) -> np.ndarray:
    h, w = size
    if window_sigma is None:
        window_sigma = 0.5 * max(h, w)
    if window_sigma <= 0:
        raise ValueError("window_sigma must be positive")
    yy = np.arange(h) - (h - 1) / 2
    xx = np.arange(w) - (w - 1) / 2
    return np.exp(-(yy[:, None] ** 2 + xx[None, :] ** 2) / (2 * window_sigma**2))


def gauss_windowed_average(m: np.ndarray, window_sigma: float | None = None) -> np.ndarray:
    """Per-channel average weighted by a Gaussian centred on the map centre."""
    wts = window(m.shape[-2:], window_sigma)
    return np.tensordot(m.astype(np.float64), wts, axes=([-2, -1], [0, 1])) / wts.sum()


def pool(net: NetworkSpec, m: np.ndarray) -> np.ndarray:
    if net.pooling == "global-average":
        h, w = m.shape[-2:]
        return m.sum(axis=(-2, -1), dtype=np.float64) / (h * w)
    return gauss_windowed_average(m, net.window_sigma)


def pool_adjoint(net: NetworkSpec, g: np.ndarray, size: tuple[int, int], dtype) -> np.ndarray:
    if net.pooling == "global-average":
        wts = np.full(size, 1.0 / (size[0] * size[1]))
    else:
        wts = window(size, net.window_sigma)
        wts = wts / wts.sum()
    return (g[:, :, None, None] * wts[None, None]).astype(dtype)


def forward_network(net: NetworkSpec, x: np.ndarray):
    """Return ``(features, logits)``, both ``(batch, .)`` float64 arrays."""
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ValueError(f"network expects {net.in_channels} input channels, got shape {x.shape}")
    feats = pool(net, forward_features(net, x))
    logits = feats @ np.asarray(net.head_weight, dtype=np.float64).T + np.asarray(net.head_bias, dtype=np.float64)
    return feats, logits


def classify(net: NetworkSpec, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Arg-max class per image; ties resolve to the lowest index."""
    out = [np.argmax(forward_network(net, x[i:i + batch_size])[1], axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ----------------------------------------------------------------------------- certificates


@dataclass(frozen=True)
class LayerFactor:
    n_pixels: int
    w_sup: float
    basis_sup: float


@dataclass(frozen=True)
class LipschitzCertificate:
    per_layer: tuple
    c_g: float
    input_sup: float
    bound: float

    def as_dict(self) -> dict:
        return {
            "c_g": self.c_g,
            "input_sup": self.input_sup,
            "bound": self.bound,
            "per_layer": [{"N": f.n_pixels, "w_sup": f.w_sup, "basis_sup": f.basis_sup} for f in self.per_layer],
        }


def weight_sup(layer: LayerSpec) -> float:
    """Induced infinity norm of the mixing matrix with the affine scale folded in.

    For a gauss layer this is the largest absolute row sum of ``diag(scale) W``; for a
    pixel layer, the largest per-output sum over input channels of the entrywise
    kernel maximum (the entrywise max itself for single-channel kernels).
    """
    scale = np.abs(np.asarray(layer.affine_scale, dtype=np.float64))
    w = np.abs(np.asarray(layer.weights, dtype=np.float64))
    if layer.is_gauss:
        rows = w.sum(axis=1)
    else:
        rows = w.max(axis=(2, 3)).sum(axis=1)
    return float(np.max(rows * scale))


def certify_bound(net: NetworkSpec, x: np.ndarray) -> LipschitzCertificate:
    """Shift-sensitivity constant ``C`` with ``|F(T_s I) - F(I)| <= C |s|``.

    ``C = C_G ||I|| prod_{i>=2} ||DG||_i prod_i ||W_i|| N_i``; for one layer this is
    ``C_G N ||I|| ||W||``.
    """
    for layer in net.layers:
        if not layer.is_gauss:
            raise ValueError(f"{layer.kind} layers admit no shift-sensitivity bound (pixel kernels are not smooth)")
        if layer.kind == "gauss-residual":
            raise ValueError("residual layers carry an unsmoothed skip path and are not certified")
    size = tuple(x.shape[-2:])
    factors = []
    c_g = None
    for layer in net.layers:
        padded = max(s + 2 * layer.margin for s in size)
        est = estimate_lipschitz(layer.basis(padded))
        if c_g is None:
            c_g = est.c_g
        size = layer.output_size(size)
        factors.append(LayerFactor(size[0] * size[1], weight_sup(layer), est.basis_sup))
    input_sup = sup_norm(x)
    bound = c_g * input_sup
    for i, f in enumerate(factors):
        bound *= f.w_sup * f.n_pixels * (f.basis_sup if i > 0 else 1.0)
    return LipschitzCertificate(tuple(factors), float(c_g), input_sup, float(bound))


def antialias_bound(kernel_sup: float, input_sup: float, n_pixels: int, c_g: float) -> float:
    if min(kernel_sup, input_sup, n_pixels, c_g) < 0:
        raise ValueError("bound factors must be non-negative")
    return n_pixels * c_g * kernel_sup * input_sup


def certify_antialias(layer: LayerSpec, x: np.ndarray) -> float:
    """Bound for a single anti-aliased pixel layer followed by global average pooling."""
    if layer.kind != "pixel-antialias-sub":
        raise ValueError("expects a pixel-antialias-sub layer")
    c_g = estimate_lipschitz(layer.basis().planes[:1]).c_g
    h, w = layer.output_size(x.shape[-2:])
    return antialias_bound(weight_sup(layer), sup_norm(x), h * w, c_g)


def count_parameters(net: NetworkSpec, include_affine: bool = True, include_head: bool = True) -> int:
    total = 0
    for layer in net.layers:
        total += int(np.size(layer.weights))
        if layer.skip is not None:
            total += int(np.size(layer.skip))
        if include_affine:
            total += 2 * layer.out_channels
    if include_head:
        total += int(np.size(net.head_weight) + np.size(net.head_bias))
    return total


# ----------------------------------------------------------------------------- construction


def init_layer(kind: str, in_channels: int, out_channels: int, rng: np.random.Generator, *,
               kernel_size: int = 3, dtype=np.float32, **options) -> LayerSpec:
    """Uniform ``[-a, a]`` initialisation with ``a = 1 / sqrt(taps * in_channels)``."""
    if kind in GAUSS_KINDS:
        a = 1.0 / math.sqrt(6 * in_channels)
        w = rng.uniform(-a, a, size=(out_channels, 6 * in_channels))
    else:
        a = 1.0 / math.sqrt(kernel_size * kernel_size * in_channels)
        w = rng.uniform(-a, a, size=(out_channels, in_channels, kernel_size, kernel_size))
    skip = options.pop("skip", None)
    if kind == "gauss-residual" and in_channels != out_channels and skip is None:
        skip = np.eye(out_channels, in_channels)
    if skip is not None:
        skip = np.asarray(skip, dtype=dtype)
    options.setdefault("affine_scale", np.ones(out_channels, dtype=dtype))
    options.setdefault("affine_shift", np.zeros(out_channels, dtype=dtype))
    return LayerSpec(kind, in_channels, out_channels, w.astype(dtype), skip=skip, **options)


def build_network(description: dict, seed: int = 0, dtype=np.float32) -> NetworkSpec:
    """Initialise a network from a JSON-style description.

    ``{"in_channels": 1, "classes": 4, "pooling": ..., "window_sigma": ...,
    "layers": [{"kind": "gauss-sub", "out_channels": 8, "sigma": 0.763, "d": 2}, ...]}``
    """
    rng = np.random.default_rng(seed)
    channels = int(description.get("in_channels", 1))
    layers = []
    for entry in description["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        out = int(entry.pop("out_channels"))
        k = int(entry.pop("kernel_size", 3))
        if entry.pop("has_skip", False) and "skip" not in entry:
            entry["skip"] = np.eye(out, channels)
        layers.append(init_layer(kind, channels, out, rng, kernel_size=k, dtype=dtype, **entry))
        channels = out
    classes = int(description.get("classes", 10))
    return NetworkSpec(
        tuple(layers),
        np.zeros((classes, channels), dtype=dtype),
        np.zeros(classes, dtype=dtype),
        pooling=description.get("pooling", "global-average"),
        window_sigma=description.get("window_sigma"),
    )


LAYER_OPTION_KEYS = ("sigma", "d", "support", "pad", "basis_mode", "method", "subsample_mode")


def describe(net: NetworkSpec) -> dict:
    """Inverse of :func:`build_network` for the architecture (weights excluded)."""
    layers = []
    for layer in net.layers:
        entry = {"kind": layer.kind, "out_channels": layer.out_channels}
        if not layer.is_gauss:
            entry["kernel_size"] = layer.kernel_size
        for key in LAYER_OPTION_KEYS:
            entry[key] = getattr(layer, key)
        entry["has_skip"] = layer.skip is not None
        layers.append(entry)
    return {
        "in_channels": net.in_channels,
        "classes": net.classes,
        "pooling": net.pooling,
        "window_sigma": net.window_sigma,
        "layers": layers,
    }
