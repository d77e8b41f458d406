"""Batch front end: ``gaussnet <verb> --config cfg.json --out dir``.

Every verb writes its reports into ``--out`` (JSON for machines, CSV for plots,
PNG figures rendered from the same rows).  Wall-clock timings go to stderr only,
so re-running a command with the same config and seed rewrites identical bytes.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import plotting
from .basis import MODES, PLANE_NAMES, build_basis, estimate_lipschitz
from .data import derive_zp, load_cifar10, synth_shapes
from .layers import GAUSS_KINDS, build_network, count_parameters
from .robustness import (
    SWEEP_SIGMAS,
    ShiftedTestSet,
    certify_insensitivity,
    compare_architectures,
    evaluate,
    interior_inputs,
    net_classifier,
    robustness_history,
)
from .serialize import atomic_write_text, load_network, save_network
from .train import data_init, train

log = logging.getLogger("gaussnet")

DATASETS = ("shapes", "cifar10", "cifar10-zp")


def _arch(sub: str, last: str, sigma: float, channels=(8, 16, 16, 16), **extra) -> dict:
    layers = [dict(kind=sub, out_channels=c, sigma=sigma, d=2, **extra) for c in channels[:-1]]
    layers.append(dict(kind=last, out_channels=channels[-1], sigma=sigma))
    return {"in_channels": 1, "classes": 4, "pooling": "gauss-windowed-average", "window_sigma": None,
            "layers": layers}


GAUSSNET4 = _arch("gauss-sub", "gauss", 1.3, subsample_mode="average")
PIXEL4 = _arch("pixel-sub", "pixel", 0.763)
ANTIALIAS4 = _arch("pixel-antialias-sub", "pixel", 0.763)

DEFAULT_CONFIG = {
    "network": GAUSSNET4,
    "dataset": {"name": "shapes", "train": 2000, "test": 500, "size": 32, "classes": 4,
                "train_seed": 1, "test_seed": 2, "noise": 0.1, "radius": [3.0, 7.0]},
    "seed": 0,
    "epochs": 10,
    "optimizer": {"lr": 3e-3, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8, "batch_size": 50},
    "init_samples": 256,
    "track_robustness": False,
    "certify": {"inputs": 100, "size": 24, "margin": 4, "max_shift": 2, "seed": 0},
    "sweep": {"sigmas": list(SWEEP_SIGMAS), "seeds": [0, 1, 2]},
    "compare": {"architectures": {"gaussnet": dict(GAUSSNET4, epochs=20), "antialias": dict(ANTIALIAS4, epochs=20),
                                 "pixel": dict(PIXEL4, epochs=30)},
                "seeds": [0, 1, 2], "tolerance": 0.02},
}

CONFIG_HELP = f"""config keys (JSON; anything omitted takes the default shown):
{json.dumps(DEFAULT_CONFIG, indent=1)}

layer keys: kind, out_channels, sigma (gauss kinds; blur sigma for pixel-antialias-sub),
d (sub-sample factor), support (odd int, "map" or null = 2*ceil(3 sigma)+1),
pad (zero-pad margin; null = ceil(3 sigma) for gauss, (k-1)/2 for pixel kinds),
basis_mode (analytic | sobel), method (auto | direct | separable | fft),
subsample_mode (point | average), kernel_size (pixel kinds).
A compare architecture may carry its own "epochs" budget (default: the top-level epochs).
Delta1/Delta2 shifts use replicate fill; certification shifts use zero fill."""


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------- config


# Sub-documents replaced wholesale rather than merged key by key.
_WHOLE = ("network", "architectures")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(value, dict) and isinstance(base[key], dict) and key not in _WHOLE:
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(cfg: dict) -> dict:
    """Check a merged config before any compute; raises ConfigError."""
    ds = cfg["dataset"]
    if ds.get("name") not in DATASETS:
        raise ConfigError(f"dataset.name must be one of {DATASETS}")
    if not isinstance(cfg["epochs"], int) or cfg["epochs"] < 0:
        raise ConfigError("epochs must be a non-negative integer")
    if int(cfg["optimizer"]["batch_size"]) < 1 or float(cfg["optimizer"]["lr"]) <= 0:
        raise ConfigError("optimizer.batch_size and optimizer.lr must be positive")
    nets = [cfg["network"]] + list(cfg["compare"]["architectures"].values())
    for desc in nets:
        try:
            build_network(desc, seed=0)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid network: {exc}") from exc
    for name, desc in cfg["compare"]["architectures"].items():
        budget = desc.get("epochs", 0)
        if not isinstance(budget, int) or budget < 0:
            raise ConfigError(f"compare.architectures.{name}.epochs must be a non-negative integer")
    if not cfg["sweep"]["sigmas"] or min(cfg["sweep"]["sigmas"]) <= 0:
        raise ConfigError("sweep.sigmas must be a non-empty list of positive values")
    return cfg


def load_config(path=None, seed: int | None = None) -> dict:
    override = {}
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, override)
    if seed is not None:
        cfg["seed"] = seed
    return validate_config(cfg)


def make_datasets(cfg: dict, root=None):
    ds = cfg["dataset"]
    if ds["name"] == "shapes":
        kw = dict(size=ds["size"], classes=ds["classes"], noise=ds["noise"], radius=tuple(ds["radius"]))
        return (synth_shapes(ds["train"], seed=ds["train_seed"], **kw),
                synth_shapes(ds["test"], seed=ds["test_seed"], **kw))
    if root is None:
        raise ConfigError(f"dataset {ds['name']} needs --dataset-root")
    train_set, test_set = load_cifar10(root, "train"), load_cifar10(root, "test")
    train_set = train_set.subset(np.arange(min(len(train_set), ds["train"])))
    test_set = test_set.subset(np.arange(min(len(test_set), ds["test"])))
    if ds["name"] == "cifar10-zp":
        train_set, test_set = derive_zp(train_set), derive_zp(test_set)
    return train_set, test_set


# ----------------------------------------------------------------------------- output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj) -> Path:
    atomic_write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


def write_csv(path, rows: list, columns: list) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(c, "") for c in columns])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


@contextmanager
def phase(name: str, timings: dict):
    start = time.perf_counter()
    yield
    timings[name] = time.perf_counter() - start
    log.info("phase %s: %.3f s", name, timings[name])


def _optimizer(cfg: dict) -> dict:
    opt = cfg["optimizer"]
    return {"lr": float(opt["lr"]), "beta1": float(opt["beta1"]), "beta2": float(opt["beta2"]),
            "epsilon": float(opt["epsilon"]), "batch_size": int(opt["batch_size"])}


METRIC_COLUMNS = ["epoch", "train_loss", "train_acc", "test_acc"]
DELTA_COLUMNS = ["delta1", "delta2"]


# ----------------------------------------------------------------------------- verbs


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    with phase("data", timings):
        train_set, test_set = make_datasets(cfg, args.dataset_root)
    net = build_network(cfg["network"], seed=cfg["seed"])
    if cfg["init_samples"]:
        net = data_init(net, train_set.images[:cfg["init_samples"]])
    with phase("train", timings):
        if cfg["track_robustness"]:
            history = robustness_history(cfg["network"], train_set, test_set, cfg["epochs"], cfg["seed"],
                                         _optimizer(cfg), init_samples=cfg["init_samples"])
            net, rows, state = history.net, history.metrics, None
        else:
            result = train(net, train_set, cfg["epochs"], seed=cfg["seed"], test_set=test_set, **_optimizer(cfg))
            net, rows, state = result.net, result.metrics, result.state
    save_network(out / "checkpoint.gnet", net, state, meta={"config": cfg})
    columns = METRIC_COLUMNS + (DELTA_COLUMNS if cfg["track_robustness"] else [])
    write_csv(out / "metrics.csv", rows, columns)
    if rows:
        plotting.plot_training(rows, out / "metrics.png")
        if cfg["track_robustness"]:
            plotting.plot_deltas({"net": rows}, out / "deltas.png")
    print(f"wrote {out / 'checkpoint.gnet'} after {cfg['epochs']} epochs")
    return 0


def _checkpoint_config(args, meta: dict) -> dict:
    if args.config is not None:
        return load_config(args.config, args.seed)
    if "config" in meta:
        return validate_config(_merge(DEFAULT_CONFIG, meta["config"]))
    return load_config(None, args.seed)


def cmd_robustness(args) -> int:
    try:
        net, _, meta = load_network(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    cfg = _checkpoint_config(args, meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    if args.mode == "benchmark":
        _, test_set = make_datasets(cfg, args.dataset_root)
        testset = ShiftedTestSet(test_set)
        with phase("infer", timings):
            report = evaluate(net_classifier(net), testset)
        write_json(out / "robustness.json", report.as_dict())
        rows = [{"shift_x": s[0], "shift_y": s[1], "change_rate": r}
                for s, r in zip(testset.shifts, report.per_shift_change_rate)]
        write_csv(out / "per_shift.csv", rows, ["shift_x", "shift_y", "change_rate"])
        plotting.plot_per_shift(report.per_shift_change_rate, testset.shifts, out / "per_shift.png")
        print(f"delta1={report.delta1:.4f} delta2={report.delta2:.4f} test_error={report.test_error:.4f}")
        return 0

    bad = sorted({layer.kind for layer in net.layers if layer.kind not in GAUSS_KINDS or layer.kind == "gauss-residual"})
    if bad:
        print(f"refusing to certify: {', '.join(bad)} layers have no shift-sensitivity bound "
              "(pixel kernels are not smooth, and residual skips bypass the Gaussian smoothing)", file=sys.stderr)
        return 2
    c = cfg["certify"]
    inputs = interior_inputs(c["inputs"], c["size"], c["margin"], net.in_channels, c["seed"])
    if c["max_shift"] >= c["margin"]:
        raise ConfigError("certify.margin must exceed certify.max_shift so shifted inputs stay interior")
    with phase("certify", timings):
        result = certify_insensitivity(net, inputs, c["max_shift"])
    rows = [{"input": m.input_index, "shift_x": m.shift[0], "shift_y": m.shift[1], "empirical": m.empirical,
             "theoretical": m.theoretical, "violated": int(m.violated)} for m in result.margins]
    columns = ["input", "shift_x", "shift_y", "empirical", "theoretical", "violated"]
    write_csv(out / "margins.csv", rows, columns)
    write_csv(out / "violations.csv", [r for r in rows if r["violated"]], columns)
    write_json(out / "certify.json", {"fill": "zero", "checks": len(rows), "violations": len(result.violations),
                                      "worst_ratio": result.worst_ratio(), "passed": result.passed,
                                      "certificate": result.certificate[0].as_dict() if result.certificate else None})
    plotting.plot_margins([r["empirical"] for r in rows], [r["theoretical"] for r in rows], out / "margins.png")
    print(f"{len(rows)} checks, {len(result.violations)} violations, worst ratio {result.worst_ratio():.3g}")
    return 0 if result.passed else 1


def _parse_sigmas(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --sigmas value {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    sigmas = _parse_sigmas(args.sigmas) if args.sigmas else list(cfg["sweep"]["sigmas"])
    if not sigmas or min(sigmas) <= 0:
        raise ConfigError("sigmas must be positive")
    seeds = [cfg["seed"]] if args.seed is not None else list(cfg["sweep"]["seeds"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_datasets(cfg, args.dataset_root)
    testset = ShiftedTestSet(test_set)
    rows, timings = [], {}
    for sigma in sigmas:
        desc = copy.deepcopy(cfg["network"])
        for layer in desc["layers"]:
            if layer["kind"] in GAUSS_KINDS:
                layer["sigma"] = sigma
        for seed in seeds:
            with phase(f"sigma={sigma} seed={seed}", timings):
                history = robustness_history(desc, train_set, test_set, cfg["epochs"], seed, _optimizer(cfg),
                                             testset, cfg["init_samples"])
            rows += [dict(r, sigma=sigma, seed=seed) for r in history.metrics]
    columns = ["sigma", "seed"] + METRIC_COLUMNS + DELTA_COLUMNS
    write_csv(out / "sweep.csv", rows, columns)
    summary = []
    for sigma in sigmas:
        mine = [r for r in rows if r["sigma"] == sigma]
        last = [r for r in mine if r["epoch"] == cfg["epochs"]]
        summary.append({"sigma": sigma, "mean_delta1": float(np.mean([r["delta1"] for r in mine])) if mine else None,
                        "mean_delta2": float(np.mean([r["delta2"] for r in mine])) if mine else None,
                        "final_delta1": float(np.mean([r["delta1"] for r in last])) if last else None,
                        "final_test_acc": float(np.mean([r["test_acc"] for r in last])) if last else None})
    write_json(out / "sweep.json", {"fill": testset.fill, "seeds": seeds, "epochs": cfg["epochs"], "per_sigma": summary})
    if rows:
        series = {}
        for sigma in sigmas:
            per_epoch = {}
            for r in rows:
                if r["sigma"] == sigma:
                    per_epoch.setdefault(r["epoch"], []).append(r)
            series[f"sigma={sigma}"] = [{"epoch": e, "delta1": np.mean([r["delta1"] for r in rs]),
                                         "delta2": np.mean([r["delta2"] for r in rs])} for e, rs in sorted(per_epoch.items())]
        plotting.plot_deltas(series, out / "sweep.png")
        plotting.plot_deltas({"mean over epochs": [{"sigma": s["sigma"], "delta1": s["mean_delta1"],
                                                    "delta2": s["mean_delta2"]} for s in summary]},
                             out / "sweep_sigma.png", x_key="sigma", x_label="sigma")
    for s in summary:
        print(f"sigma={s['sigma']}: mean delta1={s['mean_delta1']}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.seed)
    comp_cfg = cfg["compare"]
    seeds = [cfg["seed"]] if args.seed is not None else list(comp_cfg["seeds"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_datasets(cfg, args.dataset_root)
    timings = {}
    with phase("compare", timings):
        budgets = {name: desc.get("epochs", cfg["epochs"]) for name, desc in comp_cfg["architectures"].items()}
        comp = compare_architectures(comp_cfg["architectures"], train_set, test_set, budgets, seeds,
                                     _optimizer(cfg), comp_cfg["tolerance"], cfg["init_samples"])
    write_csv(out / "compare.csv", comp.rows, ["seed", "architecture", "epoch", "test_acc", "train_loss", "delta1", "delta2"])
    names = list(comp_cfg["architectures"])
    summary = {n: {k: comp.mean(n, k) for k in ("test_acc", "delta1", "delta2")} for n in names}
    write_json(out / "compare.json", {"seeds": seeds, "accuracy_spread": comp.accuracy_spread(), "mean": summary})
    plotting.plot_grouped_bars(summary, ("delta1", "delta2"), out / "compare.png")
    for n in names:
        s = summary[n]
        print(f"{n}: test_acc={s['test_acc']:.4f} delta1={s['delta1']:.4f} delta2={s['delta2']:.4f}")
    return 0


def cmd_certify_basis(args) -> int:
    if args.sigma <= 0:
        raise ConfigError("--sigma must be positive")
    try:
        basis = build_basis(args.sigma, args.support, args.basis_mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est = estimate_lipschitz(basis)
    write_json(out / "lipschitz.json", dict(est.as_dict(), sigma=basis.sigma, support=basis.support, mode=basis.mode))
    rows = [{"plane": n, "sup_abs": v} for n, v in zip(PLANE_NAMES, est.per_plane_sup)]
    write_csv(out / "lipschitz.csv", rows, ["plane", "sup_abs"])
    from .basis import dump_basis

    dump_basis(basis, out)
    plotting.plot_basis(basis.planes, PLANE_NAMES, out / "basis.png")
    print(f"C_G={est.c_g:.6g} basis_sup={est.basis_sup:.6g}")
    return 0


def network_info(desc: dict, input_size=(32, 32)) -> dict:
    net = build_network(desc, seed=0)
    sizes = net.feature_sizes(tuple(input_size))
    layers, activations = [], net.in_channels * input_size[0] * input_size[1]
    for layer, size in zip(net.layers, sizes):
        weights = int(np.size(layer.weights))
        pixel_equivalent = layer.in_channels * layer.out_channels * 9
        layers.append({"kind": layer.kind, "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                       "weights": weights, "pixel3x3_weights": pixel_equivalent,
                       "ratio": weights / pixel_equivalent, "output_size": list(size)})
        activations += layer.out_channels * size[0] * size[1]
    total = count_parameters(net)
    return {"layers": layers, "parameters": total,
            "parameters_conv_only": count_parameters(net, include_affine=False, include_head=False),
            "model_mb": total * 4 / 2**20, "activation_mb_per_image": activations * 4 / 2**20,
            "input_size": list(input_size)}


def cmd_info(args) -> int:
    cfg = load_config(args.config, args.seed)
    size = cfg["dataset"]["size"] if cfg["dataset"]["name"] == "shapes" else 32
    info = network_info(cfg["network"], (size, size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "info.json", info)
    write_csv(out / "info.csv", info["layers"], ["kind", "in_channels", "out_channels", "weights", "pixel3x3_weights", "ratio"])
    for row in info["layers"]:
        print(f"{row['kind']:>20} {row['in_channels']:>4}->{row['out_channels']:<4} weights={row['weights']}"
              f" (3x3 pixel: {row['pixel3x3_weights']})")
    print(f"parameters={info['parameters']} model={info['model_mb']:.4f} MB "
          f"activations={info['activation_mb_per_image']:.4f} MB/image")
    return 0


# ----------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (see `gaussnet --help` for keys and defaults)")
    common.add_argument("--seed", type=int, help="overrides config seed (and restricts multi-seed verbs to it)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--dataset-root", help="directory holding CIFAR-10 binary batches")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress and phase timings to stderr")

    parser = argparse.ArgumentParser(prog="gaussnet", description=__doc__, epilog=CONFIG_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train a network, write checkpoint and metrics.csv")
    p = sub.add_parser("robustness", parents=[common], help="Delta1/Delta2 benchmark or certificate check")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("benchmark", "certify"), default="benchmark",
                   help="benchmark: replicate-fill Delta1/Delta2; certify: zero-fill bound margins")
    p = sub.add_parser("sweep", parents=[common], help="train one GaussNet per sigma; one CSV row per (sigma, epoch)")
    p.add_argument("--sigmas", help=f"comma-separated list (default {','.join(map(str, SWEEP_SIGMAS))})")
    sub.add_parser("compare", parents=[common], help="accuracy-matched Delta comparison of several architectures")
    p = sub.add_parser("certify-basis", parents=[common], help="dump basis planes and their Lipschitz estimate")
    p.add_argument("--sigma", type=float, default=0.763)
    p.add_argument("--support", type=int, default=None, help="odd support (default 2*ceil(3 sigma)+1)")
    p.add_argument("--basis-mode", choices=MODES, default="analytic")
    sub.add_parser("info", parents=[common], help="parameter counts and memory estimates")
    return parser


COMMANDS = {"train": cmd_train, "robustness": cmd_robustness, "sweep": cmd_sweep, "compare": cmd_compare,
            "certify-basis": cmd_certify_basis, "info": cmd_info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
