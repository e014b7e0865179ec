"""Command-line entry point: synth, train, eval, ablate, hampel, gradcheck.

Config resolution order is defaults < --config JSON file < explicit flags.
Every command echoes its fully resolved configuration to
<out>/run_config.json so a run can be replayed exactly.

Exit codes: 0 ok, 2 invalid config, 3 I/O failure, 4 numeric failure,
5 check/oracle failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data as D
from . import evaluation as E
from . import layers as L
from . import model as M
from . import preprocess as P
from . import train as TR
from .tensor import (
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    TensorFileError,
    grad_check,
    param_grad_check,
    set_default_dtype,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file is not valid JSON: {exc}", EXIT_CONFIG)
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object", EXIT_CONFIG)
    return cfg


def _resolve(defaults: dict, file_cfg: dict, flags: dict, known=None) -> dict:
    """Layer config sources: defaults < file < explicit flags.

    ``known`` is the full key universe for unknown-key detection when the file
    feeds several sections (model + train) at once.
    """
    universe = set(defaults) | set(known or ())
    unknown = set(file_cfg) - universe
    if unknown:
        raise CliError(f"unknown config keys {sorted(unknown)}", EXIT_CONFIG)
    merged = dict(defaults)
    for k, v in file_cfg.items():
        if k in merged:
            merged[k] = v
    for k, v in flags.items():
        if v is not None:
            merged[k] = v
    return merged


def _echo_run_config(out_dir, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=1)


def _apply_precision(precision: str) -> None:
    set_default_dtype(np.float32 if precision == "f32" else np.float64)


_MODEL_DEFAULTS = {k: v for k, v in asdict(M.ModelConfig()).items()}
_TRAIN_DEFAULTS = {k: v for k, v in asdict(TR.TrainConfig()).items()}
_SYNTH_DEFAULTS = {k: v for k, v in asdict(D.SyntheticSpec()).items()}


def _add_common(parser):
    parser.add_argument("--config", default=None, help="JSON config file (defaults < file < flags)")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f64")
    parser.add_argument("--out", default="out", help="output directory")


def _model_cfg_from(merged: dict) -> M.ModelConfig:
    keys = set(_MODEL_DEFAULTS)
    d = {k: v for k, v in merged.items() if k in keys}
    d["kernel_sizes"] = tuple(d["kernel_sizes"])
    return M.ModelConfig(**d)


def _train_cfg_from(merged: dict) -> TR.TrainConfig:
    keys = set(_TRAIN_DEFAULTS)
    d = {k: v for k, v in merged.items() if k in keys}
    d["betas"] = tuple(d["betas"])
    return TR.TrainConfig(**d)


def _synth_spec_from(merged: dict) -> D.SyntheticSpec:
    keys = set(_SYNTH_DEFAULTS)
    return D.SyntheticSpec(**{k: v for k, v in merged.items() if k in keys})


def cmd_synth(args) -> int:
    flags = {
        "n_counts": args.counts,
        "samples_per_count": args.per_count,
        "noise_std": args.noise_std,
        "l_w": args.lw,
        "d_w": args.dw,
        "h": args.height,
        "w": args.width,
        "c": args.channels,
        "p": args.patch,
        "seed": args.seed,
    }
    merged = _resolve(_SYNTH_DEFAULTS, _load_config_file(args.config), flags)
    try:
        spec = D.SyntheticSpec(**merged)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}", EXIT_CONFIG)
    _echo_run_config(args.out, {"command": "synth", "spec": asdict(spec)})
    ds = D.generate(spec)
    D.split(ds, seed=spec.seed)
    try:
        D.save(ds, args.out)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO)
    print(f"dataset {spec.dataset_id()}: {len(ds)} samples -> {args.out}")
    print(f"  counts 0..{spec.n_counts} x {spec.samples_per_count}, "
          f"csi {spec.l_w}x{spec.d_w}, image {spec.h}x{spec.w}x{spec.c} (p={spec.p})")
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"  split 8:1:1 -> {sizes}")
    return EXIT_OK


def _load_dataset(path) -> D.Dataset:
    try:
        return D.load(path)
    except (D.DataError, TensorFileError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_IO)


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_flags = {
        "d_model": args.d_model,
        "n_heads": args.n_heads,
        "n_layers": args.n_layers,
        "d_ff": args.d_ff,
        "attention_kernel": args.kernel,
        "streams": args.streams,
        "use_multiscale": False if args.no_multiscale else None,
        "seed": args.seed,
    }
    train_flags = {
        "lr": args.lr,
        "max_epochs": args.epochs,
        "batch_size": args.batch,
        "early_stop_patience": args.patience,
        "seed": args.seed,
    }
    ds = _load_dataset(args.data)
    spec = ds.spec
    model_defaults = dict(
        _MODEL_DEFAULTS, l_w=spec.l_w, d_w=spec.d_w, l_v=spec.l_v, d_v=spec.d_v
    )
    try:
        universe = set(model_defaults) | set(_TRAIN_DEFAULTS)
        model_cfg = _model_cfg_from(_resolve(model_defaults, file_cfg, model_flags, known=universe))
        train_cfg = _train_cfg_from(_resolve(_TRAIN_DEFAULTS, file_cfg, train_flags, known=universe))
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG)
    _echo_run_config(
        args.out,
        {"command": "train", "model": {**asdict(model_cfg), "kernel_sizes": list(model_cfg.kernel_sizes)},
         "train": {**asdict(train_cfg), "betas": list(train_cfg.betas)}, "data": str(args.data)},
    )
    train_set, val_set, _test = D.subsets_from_manifest(ds)
    model = M.build(model_cfg)
    ckpt_path = os.path.join(args.out, "best.tfck")
    log_path = os.path.join(args.out, "epochs.csv")

    def progress(epoch, stats):
        mark = " *" if stats.is_best else ""
        print(f"epoch {epoch:3d}  train_l1 {stats.train_l1:.4f}  val_mae {stats.val_mae:.4f}{mark}")

    best, state = TR.fit(model, train_set, val_set, train_cfg, checkpoint_path=ckpt_path,
                         on_epoch_end=progress)
    TR.write_epoch_log(state, log_path)
    print(f"best epoch {state.best_epoch}: val MAE {state.best_val_mae:.4f}")
    print(f"checkpoint -> {ckpt_path}\nepoch log  -> {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    try:
        model = TR.load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(f"missing checkpoint: {exc}", EXIT_IO)
    except TensorFileError as exc:
        raise CliError(f"bad checkpoint: {exc}", EXIT_IO)
    subsets = {s.name: s for s in D.subsets_from_manifest(ds)}
    if args.split not in subsets:
        raise CliError(f"unknown split {args.split!r}", EXIT_CONFIG)
    report = E.evaluate(model, subsets[args.split], args.batch)
    _echo_run_config(args.out, {"command": "eval", "checkpoint": str(args.checkpoint),
                                "split": args.split, "batch": args.batch})
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    else:
        print(f"{args.split}: {report.format_row()}  (m={report.m}, mape_excluded={report.mape_excluded})")
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    ds = _load_dataset(args.data)
    spec = ds.spec
    model_defaults = dict(_MODEL_DEFAULTS, l_w=spec.l_w, d_w=spec.d_w, l_v=spec.l_v, d_v=spec.d_v)
    model_flags = {"d_model": args.d_model, "n_layers": args.n_layers, "seed": args.seed}
    train_flags = {"lr": args.lr, "max_epochs": args.epochs, "batch_size": args.batch,
                   "early_stop_patience": args.patience, "seed": args.seed}
    try:
        universe = set(model_defaults) | set(_TRAIN_DEFAULTS)
        model_cfg = _model_cfg_from(_resolve(model_defaults, file_cfg, model_flags, known=universe))
        train_cfg = _train_cfg_from(_resolve(_TRAIN_DEFAULTS, file_cfg, train_flags, known=universe))
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG)
    _echo_run_config(args.out, {"command": "ablate",
                                "model": {**asdict(model_cfg), "kernel_sizes": list(model_cfg.kernel_sizes)},
                                "train": {**asdict(train_cfg), "betas": list(train_cfg.betas)}})
    train_set, val_set, test_set = D.subsets_from_manifest(ds)

    def progress(row, report):
        print(f"{row:<20} {report.format_row()}")

    report = E.ablation_study(model_cfg, train_set, val_set, test_set, train_cfg, progress=progress)
    print()
    print(report.to_table())
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(report.to_csv())
    if args.json:
        print(report.to_json())
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        fh.write(report.to_json())
    if report.errors:
        raise CliError(f"{len(report.errors)} ablation rows failed", EXIT_CHECK)
    return EXIT_OK


def _read_series(path) -> np.ndarray:
    try:
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rows.append([float(cell) for cell in line.replace(",", " ").split()])
    except OSError as exc:
        raise CliError(f"cannot read series: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CliError(f"non-numeric series value: {exc}", EXIT_CONFIG)
    if not rows:
        raise CliError("empty series file", EXIT_CONFIG)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise CliError("ragged series file", EXIT_CONFIG)
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, 0] if width == 1 else arr


def cmd_hampel(args) -> int:
    series = _read_series(args.input)
    try:
        filtered, mask = P.hampel_filter(series, half_width=args.k, n_sigmas=args.nsigma,
                                         sigma_mode="mad" if args.mode == "mad" else "sample_std")
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    out_dir = os.path.dirname(args.output) or "."
    os.makedirs(out_dir, exist_ok=True)
    fil2 = np.atleast_2d(filtered.T).T
    mask2 = np.atleast_2d(mask.T).T
    try:
        np.savetxt(args.output, fil2, delimiter=",", fmt="%.12g")
        np.savetxt(args.output + ".mask", mask2.astype(int), delimiter=",", fmt="%d")
    except OSError as exc:
        raise CliError(f"cannot write output: {exc}", EXIT_IO)
    print(f"filtered {series.shape[0]} rows, {int(mask.sum())} outliers replaced")
    print(f"series -> {args.output}\nmask   -> {args.output}.mask")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Gradient self-check battery: layer ops plus the tiny end-to-end model."""
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    e2e_tol = args.tol
    failures = []

    def check(name, fn, x, tol):
        rep = grad_check(fn, Tensor(x), tol=tol)
        status = "pass" if rep.passed else "FAIL"
        print(f"  {name:<28} {status}  max_rel_err={rep.max_rel_err:.3e}")
        if not rep.passed:
            failures.append(name)

    print("layer gradients (tol 1e-4):")
    from .tensor import mul, reduce_sum

    def weighted(out, w):
        # non-degenerate functional: plain sums vanish for normalized rows
        return reduce_sum(mul(out, w))

    lin = L.LinearLayer.init(rng, 4, 3)
    w53 = Tensor(rng.normal(size=(5, 3)))
    check("linear/input", lambda x: weighted(L.linear(x, lin), w53), rng.normal(size=(5, 4)), 1e-4)
    ln = L.LayerNormParams.init(6)
    w46 = Tensor(rng.normal(size=(4, 6)))
    check("layer_norm/input", lambda x: weighted(L.layer_norm(x, ln), w46), rng.normal(size=(4, 6)), 1e-4)
    conv = L.Conv1dParams.init(rng, 3, 4, 4)
    w64 = Tensor(rng.normal(size=(6, 4)))
    check("conv1d/input", lambda x: weighted(L.conv1d(x, conv), w64), rng.normal(size=(6, 4)), 1e-4)
    kv = Tensor(rng.normal(size=(5, 4)))
    vv = Tensor(rng.normal(size=(5, 4)))
    w34 = Tensor(rng.normal(size=(3, 4)))
    for kernel in ("softmax", "linear"):
        check(
            f"attention[{kernel}]/query",
            lambda x: weighted(L.attention(x, kv, vv, kernel=kernel), w34),
            rng.normal(size=(3, 4)),
            1e-4,
        )
    ffn_p = L.FeedForwardParams.init(rng, 4, 8)
    check("ffn/input", lambda x: weighted(L.ffn(x, ffn_p), w34), rng.normal(size=(3, 4)) + 0.3, 1e-4)

    print(f"end-to-end tiny model (tol {e2e_tol:g}):")
    cfg = M.tiny_config(seed=args.seed if args.seed is not None else 0)
    tiny = M.build(cfg)
    xw = rng.normal(size=(cfg.l_w, cfg.d_w))
    xv = rng.normal(size=(cfg.l_v, cfg.d_v))
    label = np.array([3.0])

    def loss_fn():
        return M.l1_loss(M.forward(tiny, xw, xv), label)

    params = tiny.named_parameters()
    worst = 0.0
    for name in sorted(params):
        tiny.zero_grads()
        rep = param_grad_check(loss_fn, params[name], tol=e2e_tol)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append(f"end_to_end/{name}")
            print(f"  end_to_end/{name:<40} FAIL max_rel_err={rep.max_rel_err:.3e}")
    print(f"  end_to_end over {len(params)} tensors: max_rel_err={worst:.3e}")

    if failures:
        print(f"gradcheck FAILED: {failures}")
        return EXIT_CHECK
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transfusion",
        description="Multimodal (CSI + image) crowd-count regression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--counts", type=int, default=None, help="max crowd count (labels 0..counts)")
    p.add_argument("--per-count", dest="per_count", type=int, default=None)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=None)
    p.add_argument("--lw", type=int, default=None, help="CSI sequence length")
    p.add_argument("--dw", type=int, default=None, help="CSI feature dim")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--streams", choices=M.STREAM_MODES, default=None)
    p.add_argument("--kernel", choices=L.ATTENTION_KERNELS, default=None)
    p.add_argument("--no-multiscale", action="store_true")
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=None)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=None)
    p.add_argument("--d-ff", dest="d_ff", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the five-row ablation study")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("hampel", help="Hampel-filter a numeric series file")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--k", type=int, default=5, help="window half-width")
    p.add_argument("--nsigma", type=float, default=3.0)
    p.add_argument("--mode", choices=("mad", "std"), default="mad")
    p.set_defaults(fn=cmd_hampel)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_precision(args.precision)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, ShapeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TensorFileError, D.DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TapeError, TR.OptimizerError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
