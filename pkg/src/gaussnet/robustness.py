"""Shift-robustness measurements and empirical checks of the sensitivity bounds.

Two shift conventions are in play and every report says which one it used:

* ``replicate`` fill builds the shifted benchmark sets (Delta1 / Delta2);
* ``zero`` fill on inputs with an empty border is used to check certificates.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .basis import estimate_lipschitz
from .layers import (
    LayerSpec,
    NetworkSpec,
    build_network,
    certify_antialias,
    certify_bound,
    classify,
    forward_network,
    weight_sup,
)
from .tensor import sup_norm, translate
from .train import data_init, train

log = logging.getLogger(__name__)

UNIT_SHIFTS = tuple((sx, sy) for sy in (-1, 0, 1) for sx in (-1, 0, 1) if (sx, sy) != (0, 0))
SWEEP_SIGMAS = (0.3, 0.76, 1.3, 2.3)


def shift_magnitude(shift) -> int:
    """l-infinity size of a shift; all eight unit shifts have magnitude 1."""
    return max(abs(int(shift[0])), abs(int(shift[1])))


def shifts_within(max_shift: int) -> list[tuple[int, int]]:
    r = range(-max_shift, max_shift + 1)
    return [(sx, sy) for sy in r for sx in r if (sx, sy) != (0, 0)]


@dataclass(frozen=True, eq=False)
class ShiftedTestSet:
    base: object  # LabeledDataset
    shifts: tuple = UNIT_SHIFTS
    fill: str = "replicate"

    def __post_init__(self):
        if len(self.shifts) != 8 or len(set(self.shifts)) != 8:
            raise ValueError("a shifted test set uses exactly eight distinct shifts")

    def images(self, shift) -> np.ndarray:
        return translate(self.base.images, shift, self.fill)


@dataclass
class RobustnessReport:
    delta1: float
    delta2: float
    per_shift_change_rate: list
    test_error: float
    fill: str = "replicate"
    bound_margins: list | None = None
    sigma: float | None = None
    epoch: int | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def net_classifier(net: NetworkSpec, batch_size: int = 250):
    return lambda images: classify(net, images, batch_size)


def change_matrix(classifier, testset: ShiftedTestSet):
    """``(base predictions, bool array (8, n) of class changes)``."""
    base = np.asarray(classifier(testset.base.images))
    changes = np.stack([np.asarray(classifier(testset.images(s))) != base for s in testset.shifts])
    return base, changes


def delta1(classifier, testset: ShiftedTestSet) -> float:
    """Probability that a unit shift changes the predicted class."""
    _, changes = change_matrix(classifier, testset)
    return float(changes.mean()) if changes.size else 0.0


def delta2(classifier, testset: ShiftedTestSet) -> float:
    """Probability that at least one of the eight shifts changes the predicted class."""
    _, changes = change_matrix(classifier, testset)
    return float(changes.any(axis=0).mean()) if changes.size else 0.0


def evaluate(classifier, testset: ShiftedTestSet, **fields) -> RobustnessReport:
    base, changes = change_matrix(classifier, testset)
    if changes.shape[1] == 0:
        return RobustnessReport(0.0, 0.0, [0.0] * 8, float("nan"), testset.fill, **fields)
    err = float(np.mean(base != testset.base.labels))
    return RobustnessReport(
        float(changes.mean()),
        float(changes.any(axis=0).mean()),
        [float(v) for v in changes.mean(axis=1)],
        err,
        testset.fill,
        **fields,
    )


# ----------------------------------------------------------------------------- certificates


@dataclass(frozen=True)
class BoundMargin:
    input_index: int
    shift: tuple
    empirical: float
    theoretical: float

    @property
    def violated(self) -> bool:
        return self.empirical > self.theoretical


@dataclass
class CertificationResult:
    margins: list
    certificate: list  # one LipschitzCertificate per input

    @property
    def violations(self) -> list:
        return [m for m in self.margins if m.violated]

    @property
    def passed(self) -> bool:
        return not self.violations

    def worst_ratio(self) -> float:
        ratios = [m.empirical / m.theoretical for m in self.margins if m.theoretical > 0]
        return max(ratios, default=0.0)


def _require_interior(inputs: np.ndarray, shift) -> np.ndarray:
    moved = translate(inputs, shift, "zero")
    lost = np.abs(inputs).sum(axis=(1, 2, 3)) - np.abs(moved).sum(axis=(1, 2, 3))
    if np.any(np.abs(lost) > 1e-6 * (1 + np.abs(inputs).sum(axis=(1, 2, 3)))):
        raise ValueError(f"shift {shift} pushes input support off the map; pad the inputs first")
    return moved


def feature_shift_differences(net: NetworkSpec, inputs: np.ndarray, shifts) -> np.ndarray:
    """``|F(T_s I) - F(I)|`` (max over feature channels), shape ``(len(shifts), n)``."""
    base = forward_network(net, inputs)[0]
    out = np.empty((len(shifts), len(inputs)))
    for k, s in enumerate(shifts):
        moved = _require_interior(inputs, s)
        out[k] = np.abs(forward_network(net, moved)[0] - base).max(axis=1)
    return out


def certify_insensitivity(net: NetworkSpec, inputs: np.ndarray, max_shift: int = 1,
                          shifts=None) -> CertificationResult:
    """Compare empirical feature changes with ``bound * |s|`` for every input and shift.

    Shifts use zero fill; inputs must keep their support on the map.
    """
    shifts = list(shifts) if shifts is not None else shifts_within(max_shift)
    certs = [certify_bound(net, inputs[i:i + 1]) for i in range(len(inputs))]
    diffs = feature_shift_differences(net, inputs, shifts)
    margins = []
    for k, s in enumerate(shifts):
        mag = shift_magnitude(s)
        for i, cert in enumerate(certs):
            margins.append(BoundMargin(i, tuple(s), float(diffs[k, i]), cert.bound * mag))
    result = CertificationResult(margins, certs)
    for v in result.violations[:5]:
        log.warning("bound violated: input %d shift %s empirical %.3g > %.3g", v.input_index, v.shift,
                    v.empirical, v.theoretical)
    return result


def certify_antialias_layer(layer: LayerSpec, inputs: np.ndarray, max_shift: int = 1) -> CertificationResult:
    """Empirical check of the anti-aliased layer bound ``N C_G ||K|| ||I|| |s|``."""
    net = single_layer_net(layer)
    shifts = shifts_within(max_shift)
    diffs = feature_shift_differences(net, inputs, shifts)
    bounds = [certify_antialias(layer, inputs[i:i + 1]) for i in range(len(inputs))]
    margins = [BoundMargin(i, tuple(s), float(diffs[k, i]), bounds[i] * shift_magnitude(s))
               for k, s in enumerate(shifts) for i in range(len(inputs))]
    return CertificationResult(margins, bounds)


def single_layer_net(layer: LayerSpec, pooling: str = "global-average") -> NetworkSpec:
    m = layer.out_channels
    return NetworkSpec((layer,), np.zeros((1, m), np.float32), np.zeros(1, np.float32), pooling=pooling)


def interior_inputs(n: int, size: int, margin: int, channels: int = 1, seed: int = 0) -> np.ndarray:
    """Uniform [0, 1] content in the centre with a zero border of ``margin`` pixels."""
    rng = np.random.default_rng(seed)
    x = np.zeros((n, channels, size, size), dtype=np.float32)
    inner = size - 2 * margin
    x[:, :, margin:size - margin, margin:size - margin] = rng.uniform(0, 1, (n, channels, inner, inner))
    return x


# ----------------------------------------------------------------------------- negative control


def alternating_columns(size: int = 16, block: int = 8, channels: int = 1) -> np.ndarray:
    """Centred ``block x block`` patch of alternating 1/0 columns (ones on even map columns)."""
    x = np.zeros((1, channels, size, size), dtype=np.float32)
    lo = (size - block) // 2
    lo -= lo % 2
    cols = np.arange(lo, lo + block)
    patch = (cols % 2 == 0).astype(np.float32)
    x[:, :, lo:lo + block, lo:lo + block] = patch[None, :]
    return x


def pooled_shift_ratio(net: NetworkSpec, inputs: np.ndarray, shift=(1, 0)) -> np.ndarray:
    """Per-input ``max_c |F(T_s I) - F(I)| / |s|``."""
    return feature_shift_differences(net, inputs, [shift])[0] / shift_magnitude(shift)


def negative_control(pixel_net: NetworkSpec, trials: int = 100, seed: int = 0, size: int = 16,
                     margin: int = 2, shift=(1, 0)) -> float:
    """Largest ``|F(T_s I) - F(I)| / |s|`` over random inputs and random +-1 kernels.

    Every pixel layer's weights are redrawn from {-1, +1} on each trial; the search
    always includes the alternating-column witness.
    """
    if not any(layer.kind in ("pixel-sub", "pixel-antialias-sub") and layer.d > 1 for layer in pixel_net.layers):
        raise ValueError("negative control needs a strided pixel layer")
    rng = np.random.default_rng(seed)
    channels = pixel_net.in_channels
    witness = alternating_columns(size, size - 2 * margin, channels)
    worst = float(pooled_shift_ratio(pixel_net, witness, shift)[0])
    for _ in range(trials):
        layers = []
        for layer in pixel_net.layers:
            if layer.is_gauss:
                layers.append(layer)
                continue
            w = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=np.shape(layer.weights))
            layers.append(replace(layer, weights=w))
        net = replace(pixel_net, layers=tuple(layers))
        x = interior_inputs(1, size, margin, channels, seed=int(rng.integers(2**31)))
        ratios = pooled_shift_ratio(net, np.concatenate([x, witness]), shift)
        worst = max(worst, float(ratios.max()))
    return worst


@dataclass(frozen=True)
class WitnessReport:
    pixel_difference: float  # pooled |F(T_s I) - F(I)| of the strided pixel layer
    matched_certificate: float  # C_G N ||I|| ||W|| with the pixel layer's N, ||I||, ||W||
    gauss_difference: float
    gauss_certificate: float
    sigma: float

    @property
    def ratio(self) -> float:
        return self.pixel_difference / self.matched_certificate

    def as_dict(self) -> dict:
        return dict(asdict(self), ratio=self.ratio)


def witness_study(sigma: float = 4.0, size: int = 16, margin: int = 2, d: int = 2, shift=(1, 0)) -> WitnessReport:
    """Alternating columns through a stride-``d`` delta-kernel pixel layer and through a
    Gaussian layer with the same ``||W|| = 1``.

    The pixel layer picks the bright columns before the shift and the dark ones after,
    so its pooled output moves by the full column contrast.
    """
    x = alternating_columns(size, size - 2 * margin)
    delta = np.zeros((1, 1, 3, 3), np.float64)
    delta[0, 0, 1, 1] = 1.0
    pixel = LayerSpec("pixel-sub", 1, 1, delta, d=d)
    gauss = LayerSpec("gauss-sub", 1, 1, np.eye(1, 6), sigma=sigma, d=d)
    pixel_diff = float(pooled_shift_ratio(single_layer_net(pixel), x, shift)[0])
    gauss_net = single_layer_net(gauss)
    gauss_diff = float(pooled_shift_ratio(gauss_net, x, shift)[0])
    c_g = estimate_lipschitz(gauss.basis()).c_g
    n_pix = int(np.prod(pixel.output_size(x.shape[-2:])))
    matched = c_g * n_pix * sup_norm(x) * weight_sup(pixel)
    return WitnessReport(pixel_diff, matched, gauss_diff, certify_bound(gauss_net, x).bound, float(sigma))


def shift_sensitivity(sigma: float, inputs: np.ndarray, d: int = 2, shift=(1, 0), weights=None) -> float:
    """Largest pooled feature change of one stride-``d`` Gaussian layer with fixed weights."""
    weights = np.eye(1, 6) if weights is None else np.asarray(weights, np.float64).reshape(1, 6)
    layer = LayerSpec("gauss-sub", 1, 1, weights, sigma=sigma, d=d)
    return float(pooled_shift_ratio(single_layer_net(layer), inputs, shift).max())


# ----------------------------------------------------------------------------- training studies


@dataclass
class History:
    """Per-epoch metrics of one training run plus the parameters seen after each epoch."""

    net: NetworkSpec
    metrics: list
    snapshots: dict
    seconds: float = 0.0

    def network_at(self, epoch: int) -> NetworkSpec:
        return self.net.with_parameters(self.snapshots[epoch])

    def row(self, epoch: int) -> dict:
        return next(r for r in self.metrics if r["epoch"] == epoch)


def delta_fields(net: NetworkSpec, testset: ShiftedTestSet) -> dict:
    rep = evaluate(net_classifier(net), testset)
    return {"delta1": rep.delta1, "delta2": rep.delta2, "test_error": rep.test_error,
            "per_shift_change_rate": rep.per_shift_change_rate}


def robustness_history(net_desc: dict, train_set, test_set, epochs: int, seed: int, train_kwargs=None,
                       testset: ShiftedTestSet | None = None, init_samples: int = 256,
                       delta_every: int = 1) -> History:
    """Train one architecture, recording accuracy every epoch and Delta1/Delta2 every
    ``delta_every`` epochs (0 disables; snapshots allow filling them in later)."""
    train_kwargs = dict(train_kwargs or {})
    testset = testset or ShiftedTestSet(test_set)
    net = build_network(net_desc, seed=seed)
    if init_samples:
        net = data_init(net, train_set.images[:init_samples])
    snapshots = {0: net.parameters()}

    def on_epoch(epoch, current):
        snapshots[epoch] = current.parameters()
        if delta_every and epoch % delta_every == 0:
            return delta_fields(current, testset)
        return {}

    result = train(net, train_set, epochs, seed=seed, test_set=test_set, on_epoch=on_epoch, **train_kwargs)
    return History(result.net, result.metrics, snapshots, result.seconds)


def select_matched_epochs(histories: dict, tolerance: float = 0.02) -> dict:
    """Pick one epoch per architecture so that test accuracies are comparable.

    Candidate bands are ``[t, t + tolerance]`` with ``t`` any observed accuracy; the
    highest band holding an epoch of every architecture wins, and each architecture
    contributes its latest epoch inside it.  If no band fits, each architecture takes
    the epoch closest to the lowest of the best accuracies.
    """
    eps = 1e-9
    for t in sorted({r["test_acc"] for rows in histories.values() for r in rows}, reverse=True):
        chosen = {}
        for name, rows in histories.items():
            inside = [r for r in rows if t - eps <= r["test_acc"] <= t + tolerance + eps]
            if not inside:
                break
            chosen[name] = inside[-1]
        else:
            return chosen
    target = min(max(r["test_acc"] for r in rows) for rows in histories.values())
    return {name: min(rows, key=lambda r: abs(r["test_acc"] - target)) for name, rows in histories.items()}


@dataclass
class Comparison:
    rows: list  # one dict per (seed, architecture) at the matched epoch
    histories: dict  # (seed, architecture) -> History

    def mean(self, name: str, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows if r["architecture"] == name]))

    def accuracy_spread(self) -> float:
        """Largest within-seed gap between matched test accuracies."""
        spreads = []
        for seed in sorted({r["seed"] for r in self.rows}):
            accs = [r["test_acc"] for r in self.rows if r["seed"] == seed]
            spreads.append(max(accs) - min(accs))
        return max(spreads)


def compare_architectures(architectures: dict, train_set, test_set, epochs, seeds=(0, 1, 2),
                          train_kwargs=None, tolerance: float = 0.02, init_samples: int = 256) -> Comparison:
    """Train every architecture for every seed, then measure Delta at accuracy-matched epochs.

    ``epochs`` is one budget for all, or a mapping from architecture name to its budget.
    """
    budgets = {name: int(epochs[name]) if isinstance(epochs, dict) else int(epochs) for name in architectures}
    testset = ShiftedTestSet(test_set)
    rows, histories = [], {}
    for seed in seeds:
        runs = {name: robustness_history(desc, train_set, test_set, budgets[name], seed, train_kwargs, testset,
                                         init_samples, delta_every=0)
                for name, desc in architectures.items()}
        chosen = select_matched_epochs({n: h.metrics for n, h in runs.items()}, tolerance)
        for name, history in runs.items():
            histories[(seed, name)] = history
            row = chosen[name]
            fields = delta_fields(history.network_at(row["epoch"]), testset)
            rows.append({"seed": seed, "architecture": name, "epoch": row["epoch"],
                         "test_acc": row["test_acc"], "train_loss": row["train_loss"],
                         "delta1": fields["delta1"], "delta2": fields["delta2"]})
    return Comparison(rows, histories)


def sigma_sweep(net_template: dict, sigmas=SWEEP_SIGMAS, train_set=None, test_set=None, epochs: int = 5,
                seed: int = 0, train_kwargs=None) -> list:
    """Train one GaussNet per sigma; return one report (final epoch) per sigma.

    The per-epoch history travels in ``report.extra["history"]``.
    """
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("sigma list is empty")
    testset = ShiftedTestSet(test_set)
    reports = []
    for sigma in sigmas:
        desc = dict(net_template)
        desc["layers"] = [dict(l, sigma=sigma) if l["kind"].startswith("gauss") else dict(l) for l in net_template["layers"]]
        result = robustness_history(desc, train_set, test_set, epochs, seed, train_kwargs, testset)
        if result.metrics:
            last = result.metrics[-1]
            rep = RobustnessReport(last["delta1"], last["delta2"], last["per_shift_change_rate"], last["test_error"],
                                   testset.fill, sigma=float(sigma), epoch=last["epoch"])
        else:
            rep = evaluate(net_classifier(result.net), testset, sigma=float(sigma), epoch=0)
        rep.extra["history"] = result.metrics
        rep.extra["seed"] = seed
        reports.append(rep)
    return reports
