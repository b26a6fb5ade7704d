"""``entroprune`` command-line interface.

Exit codes: 0 ok, 2 config error, 3 data error, 4 verification failure,
5 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import container
from .bench import DEFAULT_BUDGET, bench
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, LabeledTensorDataset, SynthSpec, load_dataset, save_dataset,
                   split_dataset, synthesize)
from .dilution import (MaskSchedule, NumericError, TrainConfig, evaluate, train, train_dilute)
from .entropy import entropy_profile
from .fuser import VerificationError, fuse, transplant_curve, transplant_csv, verify_equivalence
from .nose import (SelectionState, first_n_select, masking_study, nose_select, random_select,
                   ratio_to_count, spearman, study_to_csv)
from .pipeline import (BENCH_DATA, BENCH_DECAY_EPOCHS, BENCH_DILUTE, BENCH_HOLDOUT, BENCH_MODEL,
                       BENCH_TRAIN, PROBE_SIZE, removal_sweep, sweep_csv)
from .spectral import compare_spectra, deltas_csv, spectrum_report
from .vit import ConfigError as ModelConfigError
from .vit import ModeError, ViTConfig, ViTModel, load_checkpoint, param_count, save_checkpoint

log = logging.getLogger("entroprune")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dtype(args):
    return np.float64 if args.dtype == "f64" else np.float32


def _load_model(path: str, args) -> ViTModel:
    try:
        model = load_checkpoint(path)
    except (OSError, container.ContainerError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_DATA) from exc
    if args.dtype and model.dtype != np.dtype(_dtype(args)):
        model = model.astype(_dtype(args))
    return model


def _load_data(path: str | None, args, which: str = "train") -> LabeledTensorDataset:
    path = path or args.cfg.get("data", which)
    if path is None:
        raise CliError(f"no {which} dataset given (argument or data.{which} in config)",
                       EXIT_CONFIG)
    try:
        return load_dataset(path, which)
    except (OSError, container.ContainerError, DataError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}", EXIT_DATA) from exc


def _seed(args, section: str = "run") -> int:
    if args.seed is not None:
        return args.seed
    return args.cfg.get(section, "seed", args.cfg.get("run", "seed", 0))


def _model_config(args, ds: LabeledTensorDataset) -> ViTConfig:
    m = args.cfg.section("model")
    H, W, C = ds.image_shape
    size = m.get("image_size", H)
    if (size, size, m.get("in_chans", C)) != (H, W, C):
        raise CliError(f"model.image_size/in_chans do not match data {H}x{W}x{C}", EXIT_CONFIG)
    patch = m.get("patch_size", BENCH_MODEL.patch_hw[0])
    try:
        return ViTConfig(
            image_hw=(H, W), patch_hw=(patch, patch), in_chans=C,
            embed_dim=m.get("embed_dim", BENCH_MODEL.embed_dim),
            depth=m.get("depth", BENCH_MODEL.depth), heads=m.get("heads", BENCH_MODEL.heads),
            mlp_ratio=m.get("mlp_ratio", BENCH_MODEL.mlp_ratio),
            num_classes=m.get("num_classes", ds.num_classes),
            seed=_seed(args), ln_eps=m.get("ln_eps", BENCH_MODEL.ln_eps))
    except ModelConfigError as exc:
        raise CliError(f"model config: {exc}", EXIT_CONFIG) from exc


def _train_config(args, section: str, base: TrainConfig) -> TrainConfig:
    s = args.cfg.section(section)
    kw = {k: s[k] for k in ("lr", "min_lr", "weight_decay", "epochs", "warmup_epochs",
                            "batch_size") if k in s}
    if "beta1" in s or "beta2" in s:
        kw["betas"] = (s.get("beta1", base.betas[0]), s.get("beta2", base.betas[1]))
    if getattr(args, "epochs", None):
        kw["epochs"] = args.epochs
    return dataclasses.replace(base, seed=_seed(args), **kw)


def _probe(ds: LabeledTensorDataset, args) -> np.ndarray:
    size = getattr(args, "probe_size", None) or args.cfg.get("select", "probe_size", PROBE_SIZE)
    return ds.images[:size]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset_synth(args) -> int:
    d = args.cfg.section("data")
    spec = SynthSpec(
        classes=args.classes or d.get("classes", BENCH_DATA.classes),
        per_class=args.per_class or d.get("per_class", BENCH_DATA.per_class),
        image_size=args.image_size or d.get("image_size", BENCH_DATA.image_size),
        noise=args.noise if args.noise is not None else d.get("noise", BENCH_DATA.noise),
        seed=args.seed if args.seed is not None else d.get("seed", BENCH_DATA.seed),
    )
    holdout = args.holdout if args.holdout is not None else d.get("holdout", BENCH_HOLDOUT)
    try:
        ds = synthesize(spec)
    except DataError as exc:
        raise CliError(f"invalid synthesis spec: {exc}", EXIT_CONFIG) from exc
    tr, te = split_dataset(ds, holdout)
    out = _out(args)
    save_dataset(tr, out / "train.eltd")
    save_dataset(te, out / "test.eltd")
    _write(out / "dataset.json", json.dumps({"spec": dataclasses.asdict(spec), "holdout": holdout,
                                             "train": len(tr), "test": len(te)}, indent=2))
    _emit({"train": str(out / "train.eltd"), "test": str(out / "test.eltd"),
           "train_samples": len(tr), "test_samples": len(te)})
    return EXIT_OK


def cmd_dataset_info(args) -> int:
    ds = _load_data(args.path, args)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    _emit({"samples": len(ds), "image_shape": list(ds.image_shape),
           "num_classes": ds.num_classes, "class_counts": counts.tolist()})
    return EXIT_OK


def cmd_train(args) -> int:
    tr = _load_data(args.data, args, "train")
    config = _model_config(args, tr)
    cfg = _train_config(args, "train", BENCH_TRAIN)
    model = ViTModel(config, _dtype(args))
    trainlog = train(model, tr, cfg)
    out = _out(args)
    save_checkpoint(model, out / "model.ckpt")
    _write(out / "train_log.csv", trainlog.to_csv())
    result = {"checkpoint": str(out / "model.ckpt"), "train_top1": trainlog.final_train_accuracy,
              "config": config.to_dict(), "train": cfg.to_dict()}
    test_path = args.test or args.cfg.get("data", "test")
    if test_path:
        result["test"] = evaluate(model, _load_data(test_path, args, "test"))
    _write(out / "train.json", json.dumps(result, indent=2))
    _emit(result)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args)
    ds = _load_data(args.data, args, "test")
    res = evaluate(model, ds)
    res["samples"] = len(ds)
    _write(_out(args) / "eval.json", json.dumps(res, indent=2))
    _emit(res)
    return EXIT_OK


def cmd_entropy(args) -> int:
    model = _load_model(args.checkpoint, args)
    ds = _load_data(args.data, args)
    report = entropy_profile(model, _probe(ds, args), batch_size=args.batch_size,
                             seed=_seed(args), dataset_id=str(args.data or "config"))
    out = _out(args)
    _write(out / "entropy.csv", report.to_csv())
    _write(out / "entropy.json", report.to_json())
    _emit(json.loads(report.to_json()))
    return EXIT_OK


def _count(args, depth: int) -> int:
    n = args.n if args.n is not None else args.cfg.get("select", "n")
    ratio = args.ratio if args.ratio is not None else args.cfg.get("select", "ratio")
    if n is not None and ratio is not None:
        raise CliError("give either --n or --ratio, not both", EXIT_CONFIG)
    if ratio is not None:
        try:
            return ratio_to_count(ratio, depth)
        except ValueError as exc:
            raise CliError(f"select.ratio: {exc}", EXIT_CONFIG) from exc
    if n is None:
        raise CliError("select needs --n or --ratio", EXIT_CONFIG)
    if not 0 <= n <= depth:
        raise CliError(f"select.n: {n} outside [0, {depth}]", EXIT_CONFIG)
    return n


def cmd_select(args) -> int:
    model = _load_model(args.checkpoint, args)
    ds = _load_data(args.data, args)
    depth = model.config.depth
    n = _count(args, depth)
    method = args.method or args.cfg.get("select", "method", "nose")
    target = args.target or args.cfg.get("select", "target", "last_block")
    if method == "nose":
        state = nose_select(model, n, _probe(ds, args), target=target, batch_size=args.batch_size)
    else:
        chosen = (random_select(depth, n, _seed(args)) if method == "random"
                  else first_n_select(n, depth))
        state = SelectionState(chosen, [i for i in range(depth) if i not in chosen], [], 0.0,
                               method, target)
    out = _out(args)
    _write(out / "selection.json", state.to_json())
    _write(out / "selection.csv", state.to_csv())
    _emit({"method": method, "n": n, "selected": state.selected,
           "trace_steps": len(state.trace)})
    return EXIT_OK


def _selected_layers(args) -> list[int]:
    if args.layers:
        return [int(x) for x in args.layers.split(",") if x.strip()]
    if not args.selection:
        raise CliError("dilute needs a selection report or --layers", EXIT_CONFIG)
    try:
        return SelectionState.from_json(Path(args.selection).read_text()).selected
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read selection {args.selection}: {exc}", EXIT_DATA) from exc


def cmd_dilute(args) -> int:
    model = _load_model(args.checkpoint, args)
    tr = _load_data(args.data, args, "train")
    layers = _selected_layers(args)
    dsec = args.cfg.section("dilute")
    cfg = _train_config(args, "dilute", BENCH_DILUTE)
    comp = dsec.get("compensation", True) if args.compensation is None else args.compensation
    cfg = dataclasses.replace(cfg, selected_layers=layers, compensation=comp)
    steps = math.ceil(len(tr) / cfg.batch_size)
    kind = args.schedule or dsec.get("schedule", "linear")
    gran = args.granularity or dsec.get("granularity", "iteration")
    decay = args.decay_steps if args.decay_steps is not None else dsec.get("decay_steps")
    if decay is None:
        decay = BENCH_DECAY_EPOCHS * (steps if gran == "iteration" else 1)
    try:
        schedule = MaskSchedule(kind, decay, gran)
        diluted, trainlog = train_dilute(model, cfg, schedule, tr)
    except (ValueError, IndexError) as exc:
        raise CliError(f"dilute: {exc}", EXIT_CONFIG) from exc
    out = _out(args)
    save_checkpoint(diluted, out / "diluted.ckpt")
    _write(out / "dilute_log.csv", trainlog.to_csv())
    _emit({"checkpoint": str(out / "diluted.ckpt"), "layers": layers, "compensation": comp,
           "schedule": kind, "decay_steps": decay, "granularity": gran,
           "train_top1": trainlog.final_train_accuracy})
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = _load_model(args.checkpoint, args)
    fused = fuse(model)
    out = _out(args)
    save_checkpoint(fused, out / "fused.ckpt")
    result = {"checkpoint": str(out / "fused.ckpt"), "fused_blocks": fused.fused_blocks(),
              "params_before": model.num_parameters(), "params_after": fused.num_parameters()}
    if args.data:
        ds = _load_data(args.data, args, "test")
        tol = args.tol or (1e-10 if fused.dtype == np.float64 else 1e-5)
        images = ds.images[:args.verify_size]
        try:
            report = verify_equivalence(model, fused, images, tol, strict=True)
        except VerificationError as exc:
            _write(out / "fusion.json", exc.report.to_json())
            raise CliError(str(exc), EXIT_VERIFY) from exc
        _write(out / "fusion.json", report.to_json())
        result["end_to_end_deviation"] = report.end_to_end
    _emit(result)
    return EXIT_OK


def cmd_verify(args) -> int:
    a = _load_model(args.a, args)
    b = _load_model(args.b, args)
    ds = _load_data(args.data, args, "test")
    tol = args.tol or (1e-10 if a.dtype == np.float64 else 1e-5)
    report = verify_equivalence(a, b, ds.images[:args.verify_size], tol, strict=False)
    _write(_out(args) / "verify.json", report.to_json())
    _emit(json.loads(report.to_json()))
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_spectrum(args) -> int:
    model = _load_model(args.checkpoint, args)
    ds = _load_data(args.data, args)
    images = _probe(ds, args)
    out = _out(args)
    rep = spectrum_report(model, images, args.batch_size)
    _write(out / "spectrum.json", rep.to_json())
    _write(out / "spectrum_profile.csv", rep.profile_csv())
    _write(out / "spectrum_bands.csv", rep.bands_csv())
    result = {"bands": rep.bands()}
    if args.compare:
        other = _load_model(args.compare, args)
        rows = compare_spectra(model, other, images, args.batch_size)
        _write(out / "spectrum_deltas.csv", deltas_csv(rows))
        result["deltas"] = [r.delta for r in rows]
    _emit(result)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load_model(args.checkpoint, args)
    if args.reps < 3:
        raise CliError("bench needs --reps >= 3", EXIT_CONFIG)
    res = bench(model, args.batch, args.reps, args.budget).to_dict()
    res["fused_blocks"] = model.fused_blocks()
    res["param_ratio_vs_dense"] = model.num_parameters() / param_count(model.config).total
    _write(_out(args) / "bench.json", json.dumps(res, indent=2))
    _emit(res)
    return EXIT_OK


def cmd_study_masking(args) -> int:
    model = _load_model(args.checkpoint, args)
    ds = _load_data(args.data, args, "test")
    counts = [int(c) for c in args.counts.split(",")]
    rows = masking_study(model, counts, args.repeats, _seed(args), ds.images, ds.labels,
                         _probe(ds, args), batch_size=args.batch_size)
    out = _out(args)
    _write(out / "masking_study.csv", study_to_csv(rows))
    rho = spearman([r.te_mean for r in rows], [r.acc_mean for r in rows])
    _write(out / "masking_study.json", json.dumps(
        {"rows": [dataclasses.asdict(r) for r in rows], "spearman_te_acc": rho}, indent=2))
    _emit({"spearman_te_acc": rho, "rows": [[r.count, r.acc_mean, r.te_mean] for r in rows]})
    return EXIT_OK


def cmd_study_sweep(args) -> int:
    model = _load_model(args.checkpoint, args)
    tr = _load_data(args.data, args, "train")
    te = _load_data(args.test, args, "test")
    cfg = _train_config(args, "dilute", BENCH_DILUTE)
    method = args.method or args.cfg.get("select", "method", "nose")
    rows = removal_sweep(model, tr, te, method, probe=_probe(tr, args), cfg=cfg, seed=_seed(args))
    _write(_out(args) / "removal_sweep.csv", sweep_csv(rows))
    _emit([dataclasses.asdict(r) for r in rows])
    return EXIT_OK


def cmd_study_transplant(args) -> int:
    donor = _load_model(args.donor, args)
    host = _load_model(args.host, args)
    ds = _load_data(args.data, args, "test")
    rows = transplant_curve(donor, host, ds.images, ds.labels)
    _write(_out(args) / "transplant.csv", transplant_csv(rows))
    _emit(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--dtype", choices=("f32", "f64"), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="entroprune", parents=[common],
                                description="Entropy-guided attention-layer removal for ViTs")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, parent=sub):
        sp = parent.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    ds = sub.add_parser("dataset", help="synthesize or inspect datasets")
    dsub = ds.add_subparsers(dest="dataset_command", required=True)
    sp = add("synth", cmd_dataset_synth, "write train.eltd / test.eltd", dsub)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--holdout", type=float)
    sp = add("info", cmd_dataset_info, "summarize a dataset file", dsub)
    sp.add_argument("path")

    sp = add("train", cmd_train, "train a dense model")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--test")
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "top-1 / top-5 accuracy")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")

    sp = add("entropy", cmd_entropy, "per-layer entropy report")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--probe-size", type=int)
    sp.add_argument("--batch-size", type=int, default=256)

    sp = add("select", cmd_select, "choose attention layers to remove")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--method", choices=("nose", "random", "first_n"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--target", choices=("last_block", "logits"))
    sp.add_argument("--probe-size", type=int)
    sp.add_argument("--batch-size", type=int, default=256)

    sp = add("dilute", cmd_dilute, "dilute selected attention layers to identity")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--selection", help="selection.json written by `select`")
    sp.add_argument("--layers", help="comma-separated layer indices instead of a report")
    sp.add_argument("--schedule", choices=("linear", "cosine"))
    sp.add_argument("--decay-steps", type=int)
    sp.add_argument("--granularity", choices=("epoch", "iteration"))
    sp.add_argument("--epochs", type=int)
    comp = sp.add_mutually_exclusive_group()
    comp.add_argument("--compensation", dest="compensation", action="store_true", default=None)
    comp.add_argument("--no-compensation", dest="compensation", action="store_false")

    sp = add("fuse", cmd_fuse, "remove fully diluted attention layers")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", help="verify against the diluted model on this dataset")
    sp.add_argument("--tol", type=float)
    sp.add_argument("--verify-size", type=int, default=256)

    sp = add("verify", cmd_verify, "compare two models tap by tap")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--tol", type=float)
    sp.add_argument("--verify-size", type=int, default=256)

    sp = add("spectrum", cmd_spectrum, "DFT band analysis of block outputs")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--compare", help="second checkpoint for band deltas")
    sp.add_argument("--probe-size", type=int)
    sp.add_argument("--batch-size", type=int, default=256)

    sp = add("bench", cmd_bench, "throughput and memory-bound proxy")
    sp.add_argument("checkpoint")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="bytes")

    st = sub.add_parser("study", help="experiments")
    ssub = st.add_subparsers(dest="study_command", required=True)
    sp = add("masking", cmd_study_masking, "random masking: accuracy vs transfer entropy", ssub)
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--counts", default="1,2,3,4")
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--probe-size", type=int)
    sp.add_argument("--batch-size", type=int, default=256)
    sp = add("removal-sweep", cmd_study_sweep, "select+dilute+fuse+eval for N = 1..depth-2", ssub)
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("test", nargs="?")
    sp.add_argument("--method", choices=("nose", "random", "first_n"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--probe-size", type=int)
    sp = add("transplant", cmd_study_transplant, "donor blocks into host, accuracy per index",
             ssub)
    sp.add_argument("donor")
    sp.add_argument("host")
    sp.add_argument("data", nargs="?")
    return p


def _resolve_globals(args) -> None:
    if args.config:
        args.cfg = load_config(args.config)
    else:
        args.cfg = RunConfig()
    run = args.cfg.section("run")
    if args.out is None:
        args.out = run.get("out", "entroprune-out")
    if args.dtype is None:
        args.dtype = run.get("dtype")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve_globals(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ModeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, container.ContainerError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
