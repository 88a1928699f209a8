"""Command-line entry point: `rectseg <subcommand> ...`.

Every subcommand writes plain files (Netpbm images, CSV, checkpoints, SVG
figures) under --out and prints a short delimited summary on stdout. Errors
print one line to stderr, `rectseg-error:<kind>: <message>`, and exit
nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import plotting
from . import synthdata as sd
from .config import ConfigError, format_config, load_config
from .evaluation import IoUReport, evaluate_checkpoint, predict
from .experiment import (SPLITS, compare_modes, images_of, labels_of, make_datasets, pretrain,
                         run_pipeline, split_seed, weak_iters)
from .loss import loss_floor_probe
from .model import forward, load_checkpoint, save_checkpoint
from .pseudo import generate_pseudo_labels, load_pseudo_labels, save_pseudo_labels, threshold_filter
from .train import ExperimentConfig, TrainingDiverged, adapt
from .uncertainty import (certainty, export_heatmap, kl_variance, mc_dropout_variance,
                          mse_variance, uncertainty_gap)

log = logging.getLogger("rectseg")

DEFAULT_TAUS = (0.99, 0.95, 0.9, 0.8, 0.7, 0.0)
N_HEATMAPS = 4


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


# -- small file helpers --------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_arrays(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def dataset_digest(ds: Sequence[sd.LabeledImage]) -> str:
    return sha256_arrays(x for d in ds for x in (d.image, d.labels, d.ignore))


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])
    return path


def read_rows(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_rows(run_id: str, split: str, report: IoUReport):
    rows = [(run_id, split, f"class{c}", v) for c, v in enumerate(report.iou)]
    rows.append((run_id, split, "mIoU", report.miou))
    return rows


METRIC_HEADER = ("run_id", "split", "class_or_mIoU", "value")
UNCERTAINTY_HEADER = ("method", "right", "wrong", "gap")


def run_id_for(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:12]


def _emit(rows: Iterable[Sequence], out=None):
    w = csv.writer(out or sys.stdout, lineterminator="\n")
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v) for v in r])


def write_manifest(out: Path, cfg: ExperimentConfig, inputs: Dict[str, str], started: float) -> Path:
    """Run manifest: id, resolved config file, input checksums, output checksums, wall clock."""
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    lines = [f"run_id={run_id_for(cfg)}", "config=config.resolved.txt",
             f"config_sha256={sha256_file(out / 'config.resolved.txt')}"]
    lines += [f"input={name} sha256={digest}" for name, digest in sorted(inputs.items())]
    lines += [f"output={p.relative_to(out).as_posix()} sha256={sha256_file(p)}" for p in outputs]
    lines.append(f"wall_clock_seconds={time.time() - started:.1f}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _load_data(data_dir: Optional[str], cfg: ExperimentConfig) -> Dict[str, List[sd.LabeledImage]]:
    if data_dir is None:
        return make_datasets(cfg)
    root = Path(data_dir)
    missing = [s for s in SPLITS if not (root / s / "manifest.txt").exists()]
    if missing:
        raise CLIError("input", f"{root}: missing dataset splits {missing}")
    return {s: sd.load_dataset(root / s) for s in SPLITS}


def _dataset_arg(path: str) -> List[sd.LabeledImage]:
    if not (Path(path) / "manifest.txt").exists():
        raise CLIError("input", f"{path}: not a dataset directory (no manifest.txt)")
    return sd.load_dataset(path)


def _checkpoint_arg(path: str):
    if not Path(path).exists():
        raise CLIError("input", f"{path}: checkpoint not found")
    return load_checkpoint(path)


def _config(args) -> ExperimentConfig:
    extra = {}
    if getattr(args, "shift_preset", None):
        extra["shift_preset"] = args.shift_preset
    return load_config(args.config, seed=args.seed, **extra)


# -- artefact writers shared by the stage commands and the pipeline --------------------

def export_heatmaps(out: Path, net, ds: Sequence[sd.LabeledImage], alpha: float, beta: float,
                    n: int = N_HEATMAPS) -> List[Path]:
    """Certainty maps exp(-KL) beside the error mask of the combined prediction."""
    d = out / "heatmaps"
    d.mkdir(parents=True, exist_ok=True)
    x = images_of(ds[:n])
    P, P_aux = forward(net, x)
    cert = certainty(kl_variance(P, P_aux)).values
    pred = predict(net, x, alpha, beta)
    written = []
    for i in range(len(x)):
        err = (pred[i] != ds[i].labels) & ~ds[i].ignore
        export_heatmap(d / f"certainty_{i:04d}.pgm", cert[i])
        sd.write_pgm(d / f"error_{i:04d}.pgm", err.astype(np.uint8))
        written.append(plotting.heatmap_panel(out / "figures" / f"heatmap_{i:04d}.svg", x[i], cert[i], err))
    return written


UNCERTAINTY_METHODS = ("kl", "kl_reversed", "mse")


def parse_methods(spec: str):
    out = []
    for token in spec.split(","):
        token = token.strip()
        if token in UNCERTAINTY_METHODS:
            out.append((token, None, None))
            continue
        parts = token.split(":")
        if parts[0] == "mc" and len(parts) == 3:
            try:
                rate, T = float(parts[1]), int(parts[2])
            except ValueError:
                raise CLIError("usage", f"bad mc token {token!r}; expected mc:<rate>:<passes>") from None
            if not 0.0 <= rate < 1.0 or T < 1:
                raise CLIError("usage", f"bad mc token {token!r}; rate in [0,1), passes >= 1")
            out.append(("mc", rate, T))
            continue
        raise CLIError("usage", f"unknown uncertainty method {token!r}; expected kl, kl_reversed, mse or mc:rate:T")
    return out


def uncertainty_rows(net, ds: Sequence[sd.LabeledImage], methods, seed: int, confidence_floor=None):
    x = images_of(ds)
    gt = labels_of(ds)
    ignore = np.stack([d.ignore for d in ds])
    P, P_aux = forward(net, x)
    pred, conf = P.argmax(-1), P.max(-1)
    rows, maps = [], {}
    for kind, rate, T in methods:
        if kind == "kl":
            vm = kl_variance(P, P_aux)
        elif kind == "kl_reversed":
            vm = kl_variance(P, P_aux, "reversed")
        elif kind == "mse":
            vm = mse_variance(P, P_aux)
        else:
            vm = mc_dropout_variance(net, x, rate, T, np.random.default_rng(seed))
        name = kind if kind != "mc" else f"mc:{rate:g}:{T}"
        cm = certainty(vm)
        g = uncertainty_gap(cm, pred, gt, conf, confidence_floor, ignore)
        rows.append((name, g["right_certainty"], g["wrong_certainty"], g["gap"]))
        maps[name] = cm.values
    return rows, maps


def render_report(run: Path) -> Path:
    """Figures and report.txt from the CSVs of a pipeline run directory."""
    figs = run / "figures"
    figs.mkdir(exist_ok=True)
    histories = {}
    for name in ("source", "adapt"):
        p = run / f"{name}_history.csv"
        if p.exists():
            histories[name] = np.array([float(r["loss"]) for r in read_rows(p)])
    if histories:
        plotting.loss_curves(figs / "loss.svg", histories)
    metrics = read_rows(run / "metrics.csv")
    by_split: Dict[str, Dict[str, float]] = {}
    for r in metrics:
        by_split.setdefault(r["split"], {})[r["class_or_mIoU"]] = None if r["value"] == "" else float(r["value"])
    per_class = {s: [v for k, v in sorted(m.items()) if k.startswith("class")] for s, m in by_split.items()}
    plotting.per_class_iou(figs / "iou.svg", per_class)

    buf = io.StringIO()
    n_cls = max(len(v) for v in per_class.values())
    head = f"{'model/split':<28}" + "".join(f"{f'c{c}':>8}" for c in range(n_cls)) + f"{'mIoU':>8}"
    buf.write(head + "\n" + "-" * len(head) + "\n")
    for s, m in by_split.items():
        cells = "".join(f"{'-' if v is None else f'{100 * v:.1f}':>8}" for v in per_class[s])
        buf.write(f"{s:<28}{cells}{100 * m['mIoU']:>8.1f}\n")
    unc = run / "uncertainty.csv"
    if unc.exists():
        buf.write("\nmethod            right    wrong      gap\n")
        for r in read_rows(unc):
            buf.write(f"{r['method']:<14}" + "".join(
                f"{'-' if r[k] == '' else f'{float(r[k]):.4f}':>9}" for k in ("right", "wrong", "gap")) + "\n")
    for name, h in histories.items():
        if h.size >= 100:
            fl = loss_floor_probe(h)
            buf.write(f"\n{name} loss floor {fl['floor']:.4g} (converged_to_zero={fl['converged_to_zero']})")
    path = run / "report.txt"
    path.write_text(buf.getvalue().rstrip("\n") + "\n")
    return path


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    src_p, tgt_p = sd.preset(cfg.shift_preset)
    data = make_datasets(cfg)
    for split in SPLITS:
        params = src_p if split.startswith("source") else tgt_p
        sd.write_dataset(out / split, data[split], split_seed(cfg.seed, split), params, split=split)
        _emit([(split, len(data[split]), sha256_file(out / split / "manifest.txt"), dataset_digest(data[split]))])
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = {"source": _dataset_arg(Path(args.data) / "source") if args.data else make_datasets(cfg)["source"]}
    stage = pretrain(cfg, data)
    save_checkpoint(stage.strong, out / "source.ckpt")
    save_checkpoint(stage.weak, out / "source_weak.ckpt")
    stage.history.write_csv(out / "source_history.csv")
    _emit([("source.ckpt", sha256_file(out / "source.ckpt")),
           (f"source_weak.ckpt@{weak_iters(cfg)}", sha256_file(out / "source_weak.ckpt"))])
    return 0


def cmd_pseudo_label(args) -> int:
    net = _checkpoint_arg(args.checkpoint)
    ds = _dataset_arg(args.data)
    pl = generate_pseudo_labels(net, images_of(ds), provenance=Path(args.checkpoint).name)
    if args.tau is not None:
        pl = threshold_filter(pl, args.tau)
    save_pseudo_labels(pl, args.out)
    _emit([("pseudo_labels", len(pl), float(pl.valid.mean()))])
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    net = _checkpoint_arg(args.checkpoint)
    ds = _dataset_arg(args.data)
    pl = load_pseudo_labels(args.pseudo)
    if cfg.loss == "thresholded":
        pl = threshold_filter(pl, cfg.tau)
    # only the target images go in; their labels are never read here
    net_t, hist = adapt(net, images_of(ds), pl, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net_t, out / "target.ckpt")
    hist.write_csv(out / "adapt_history.csv")
    _emit([("target.ckpt", sha256_file(out / "target.ckpt"), len(hist.rows), hist.skipped)])
    return 0


def cmd_eval(args) -> int:
    net = _checkpoint_arg(args.checkpoint)
    ds = _dataset_arg(args.data)
    report = evaluate_checkpoint(net, ds, args.alpha, args.beta)
    rows = metric_rows(Path(args.checkpoint).stem, Path(args.data).name, report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_rows(Path(args.out) / "metrics.csv", METRIC_HEADER, rows)
    _emit([METRIC_HEADER] + rows)
    return 0


def cmd_pipeline(args) -> int:
    started = time.time()
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(format_config(cfg))
    (out / "figures").mkdir(exist_ok=True)
    data = _load_data(args.data, cfg)
    inputs = {f"dataset:{s}": dataset_digest(data[s]) for s in SPLITS}
    if args.config:
        inputs["config_file"] = sha256_file(args.config)

    stage_name = "pretrain"
    try:
        stage = pretrain(cfg, data)
        stage_name = "adapt"
        res = run_pipeline(cfg, data, stage)
    except (TrainingDiverged, FloatingPointError) as exc:
        raise CLIError(f"stage:{stage_name}", str(exc)) from exc

    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_checkpoint(stage.strong, ck / "source.ckpt")
    save_checkpoint(stage.weak, ck / "source_weak.ckpt")
    save_checkpoint(res.target_net, ck / "target.ckpt")
    save_pseudo_labels(res.pseudo, out / "pseudo")
    stage.history.write_csv(out / "source_history.csv")
    res.adapt_history.write_csv(out / "adapt_history.csv")

    rid = run_id_for(cfg)
    rows = []
    for key, rep in res.reports.items():
        model, split = key.split("/")
        rows += metric_rows(f"{rid}:{model}", split, rep)
    write_rows(out / "metrics.csv", METRIC_HEADER, rows)
    q = res.pseudo_quality
    write_rows(out / "pseudo_quality.csv", ("metric", "value"),
               [("accuracy", q["accuracy"]), ("fraction_valid", q["fraction_valid"])]
               + [(f"class{c}_accuracy", v) for c, v in enumerate(q["per_class_accuracy"])])

    unc_rows, _ = uncertainty_rows(res.target_net, data["target_test"], [("kl", None, None)], cfg.seed)
    hi_rows, _ = uncertainty_rows(res.target_net, data["target_test"], [("kl", None, None)], cfg.seed, 0.95)
    unc_rows += [("kl@conf>0.95",) + tuple(hi_rows[0][1:])]
    write_rows(out / "uncertainty.csv", UNCERTAINTY_HEADER, unc_rows)
    export_heatmaps(out, res.target_net, data["target_test"], cfg.alpha, cfg.beta)
    render_report(out)
    write_manifest(out, cfg, inputs, started)
    _emit([METRIC_HEADER] + [r for r in rows if r[2] == "mIoU"])
    return 0


def cmd_sweep_threshold(args) -> int:
    base = _config(args)
    out = Path(args.out)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    taus = [float(t) for t in args.taus.split(",")]
    modes = ["plain"] + [f"tau:{t:g}" for t in taus] + ["rectified"]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    rows = []
    for seed in seeds:
        cfg = base.replace(seed=seed)
        data = make_datasets(cfg)
        stage = pretrain(cfg, data)
        teacher = stage.strong if cfg.pseudo_source == "strong" else stage.weak
        rows.append((seed, "source_only", "", evaluate_checkpoint(teacher, data["target_test"], cfg.alpha, cfg.beta).miou))
        for mode in modes:
            try:
                miou = compare_modes(cfg, data, stage, [mode])[mode].report.miou
            except TrainingDiverged as exc:
                log.warning("seed %d %s skipped: %s", seed, mode, exc)
                miou = None
            kind, _, tau = mode.partition(":")
            rows.append((seed, kind, tau, miou))
            _emit([rows[-1]])
    write_rows(out / "sweep.csv", ("seed", "mode", "tau", "miou"), rows)

    def mean_of(mode, tau=""):
        vals = [r[3] for r in rows if r[1] == mode and r[2] == tau and r[3] is not None]
        return float(np.mean(vals)) if vals else None

    means = [mean_of("tau", f"{t:g}") for t in taus]
    ok = [(t, m) for t, m in zip(taus, means) if m is not None]
    refs = {k: v for k, v in (("rectified", mean_of("rectified")), ("source only", mean_of("source_only")))
            if v is not None}
    plotting.threshold_sweep(out / "figures" / "threshold_sweep.svg", [t for t, _ in ok], [m for _, m in ok], refs)
    summary = [("source_only", "", mean_of("source_only")), ("plain", "", mean_of("plain"))]
    summary += [("tau", f"{t:g}", m) for t, m in zip(taus, means)] + [("rectified", "", mean_of("rectified"))]
    write_rows(out / "sweep_summary.csv", ("mode", "tau", "mean_miou"), summary)
    return 0


def cmd_compare_uncertainty(args) -> int:
    net = _checkpoint_arg(args.checkpoint)
    ds = _dataset_arg(args.data)
    methods = parse_methods(args.methods)
    out = Path(args.out)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    rows, maps = uncertainty_rows(net, ds, methods, args.seed or 0, args.confidence_floor)
    write_rows(out / "uncertainty.csv", UNCERTAINTY_HEADER, rows)
    P, _ = forward(net, images_of(ds[:N_HEATMAPS]))
    for name, values in maps.items():
        tag = name.replace(":", "_")
        for i in range(min(N_HEATMAPS, len(ds))):
            export_heatmap(out / "heatmaps" / f"{tag}_{i:04d}.pgm", values[i])
    for i in range(min(N_HEATMAPS, len(ds))):
        err = (P[i].argmax(-1) != ds[i].labels) & ~ds[i].ignore
        sd.write_pgm(out / "heatmaps" / f"error_{i:04d}.pgm", err.astype(np.uint8))
    _emit([UNCERTAINTY_HEADER] + rows)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    if not (run / "metrics.csv").exists():
        raise CLIError("input", f"{run}: no metrics.csv; not a pipeline run directory")
    sys.stdout.write(render_report(run).read_text())
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rectseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--config", default=None, help="flat key=value file")

    sp = sub.add_parser("gen-data", help="write source/target datasets")
    common(sp)
    sp.add_argument("--shift-preset", choices=sd.SHIFT_PRESETS, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train both heads on labelled source data")
    common(sp)
    sp.add_argument("--data", default=None, help="gen-data output directory")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("pseudo-label", help="label target images with a source checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--tau", type=float, default=None)
    sp.set_defaults(func=cmd_pseudo_label)

    sp = sub.add_parser("adapt", help="fine-tune on target images with frozen pseudo labels")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="target dataset directory")
    sp.add_argument("--pseudo", required=True, help="pseudo-label directory")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="per-class IoU of a checkpoint on a dataset")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--beta", type=float, default=0.5)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pipeline", help="pretrain, pseudo-label, adapt, evaluate and report")
    common(sp)
    sp.add_argument("--data", default=None, help="optional gen-data directory instead of generating")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("sweep-threshold", help="plain, thresholded and rectified adaptation per seed")
    common(sp)
    sp.add_argument("--seeds", default=None, help="comma separated; defaults to --seed")
    sp.add_argument("--taus", default=",".join(f"{t:g}" for t in DEFAULT_TAUS))
    sp.set_defaults(func=cmd_sweep_threshold)

    sp = sub.add_parser("compare-uncertainty", help="right/wrong certainty gap per estimator")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--methods", default="kl,mse")
    sp.add_argument("--confidence-floor", type=float, default=None)
    sp.set_defaults(func=cmd_compare_uncertainty)

    sp = sub.add_parser("report", help="re-render figures and report.txt for a pipeline run")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except ConfigError as exc:
        kind, msg = "config", str(exc)
    except TrainingDiverged as exc:
        kind, msg = "diverged", str(exc)
    except (OSError, ValueError) as exc:
        kind, msg = "input", f"{type(exc).__name__}: {exc}"
    print(f"rectseg-error:{kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
