"""``rrwave`` command-line entry point.

Exit codes: 0 success, 1 validation errors (bad flags, files, configs),
2 runtime failures.  Diagnostics go to stderr; machine outputs go to files,
each accompanied by ``<output>.manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .container import atomic_write
from .errors import (ConflictingFlags, MissingFile, RRWaveError, RuntimeFailure, UnknownSubcommand,
                     ValidationError)
from .model import FORMAT_VERSION, ModelConfig
from .signal_io import WINDOWS_VERSION
from .train import TrainConfig

log = logging.getLogger("rrwave")

SUBCOMMANDS = ("preprocess", "train", "finetune", "evaluate", "predict", "snr", "ews", "synth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _digest(path):
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    out = {}
    for p in files:
        out[str(p)] = format(zlib.crc32(p.read_bytes()) & 0xFFFFFFFF, "08x")
    return out


def _write_manifest(out_path, args, config, inputs, seed):
    manifest = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "input_digests": {k: v for p in inputs for k, v in _digest(p).items()},
        "seed": seed,
        "tool_version": __version__,
        "format_versions": {"checkpoint": FORMAT_VERSION, "windows": WINDOWS_VERSION},
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    out_path = Path(out_path)
    atomic_write(out_path.with_name(out_path.name + ".manifest.json"), json.dumps(manifest, indent=2) + "\n")


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("RRWAVE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"RRWAVE_SEED={env!r} is not an integer") from None
    return 0


def _read_json(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _train_config(args, seed):
    d = _read_json(getattr(args, "config", None))
    d.setdefault("seed", seed)
    if getattr(args, "max_epochs", None) is not None:
        d["max_epochs"] = args.max_epochs
    return TrainConfig.from_dict(d)


def _model_config(args):
    d = _read_json(getattr(args, "model_config", None))
    d["w"] = args.window
    if getattr(args, "plain", False):
        d["plain"] = True
    return ModelConfig.from_dict(d)


def _csv_text(header, rows):
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(v) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def _preprocess_dir(data_dir, window, stride, threshold, flat_delta, apply_sqi=True):
    """Load, resample, window and SQI-gate every subject; returns (accepted windows, audit rows)."""
    from . import signal_io as sio
    from .sqi import score

    accepted, audit = [], []
    for sub in sio.list_subjects(data_dir):
        rec = sio.resample(sio.load_record(sub), sio.SR)
        for w in sio.slide_windows(rec, window, stride):
            rep = score(w, threshold=threshold, flat_delta=flat_delta)
            audit.append((w.subject_id, w.start_t, rep.k, rep.f1, rep.sqi, int(rep.accepted)))
            if rep.accepted or not apply_sqi:
                accepted.append(w)
    return accepted, audit


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    from . import signal_io as sio

    seed = _seed(args)
    lo, hi = (float(v) for v in args.rr.split(".."))
    records = sio.synthetic_cohort(args.subjects, seed=seed, rr_range=(lo, hi), duration_s=args.duration,
                                   noise_range=(0.0, args.max_noise), fs=args.fs)
    out = Path(args.out)
    for rec in records:
        sio.save_record(rec, out / rec.subject_id)
    _write_manifest(out / "synth", args, {"subjects": args.subjects, "rr": [lo, hi], "duration": args.duration,
                                          "fs": args.fs, "max_noise": args.max_noise}, [], seed)
    return 0


def cmd_preprocess(args):
    from . import signal_io as sio

    windows, audit = _preprocess_dir(args.data_dir, args.window, args.stride, args.sqi_threshold,
                                     args.flatline_delta)
    sio.save_windows(args.out, windows, args.window, args.stride,
                     extra={"sqi_threshold": args.sqi_threshold, "flatline_delta": args.flatline_delta})
    audit_path = args.audit or str(Path(args.out).with_suffix(".sqi.csv"))
    atomic_write(audit_path, _csv_text(("subject", "start_t", "k", "f1", "sqi", "accepted"), audit))
    log.info("kept %d of %d windows", len(windows), len(audit))
    _write_manifest(args.out, args, {"window": args.window, "stride": args.stride,
                                     "sqi_threshold": args.sqi_threshold,
                                     "flatline_delta": args.flatline_delta}, [args.data_dir], None)
    return 0


def _split_windows(windows, seed):
    """Subject-level 4:1 train/validation split (window-level if only one subject)."""
    subjects = sorted({w.subject_id for w in windows})
    rng = np.random.default_rng(seed)
    if len(subjects) >= 2:
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        n_val = max(1, round(len(order) / 5))
        val_ids = set(order[:n_val])
        return ([w for w in windows if w.subject_id not in val_ids], [w for w in windows if w.subject_id in val_ids])
    idx = rng.permutation(len(windows))
    n_val = max(1, round(len(windows) / 5))
    val_idx = set(idx[:n_val].tolist())
    return ([w for i, w in enumerate(windows) if i not in val_idx], [w for i, w in enumerate(windows) if i in val_idx])


def _load_train_windows(args):
    from .signal_io import load_windows

    windows, header = load_windows(args.windows)
    if int(header["w"]) != args.window:
        raise ValidationError(f"{args.windows} holds W={header['w']} windows, --window is {args.window}")
    if len(windows) < 2:
        raise ValidationError(f"{args.windows} has {len(windows)} windows; need at least 2")
    return windows


def cmd_train(args):
    from .model import Model, save
    from .train import fit, write_history_csv

    seed = _seed(args)
    tcfg = _train_config(args, seed)
    mcfg = _model_config(args)
    train, val = _split_windows(_load_train_windows(args), seed)
    model = Model.build(mcfg, seed=seed)
    result = fit(model, train, val, tcfg, source_tag=args.tag or Path(args.windows).stem)
    save(result.best_checkpoint, args.out)
    if args.log:
        write_history_csv(result.history, args.log)
    _write_manifest(args.out, args, {"train": tcfg.to_dict(), "model": mcfg.to_dict()}, [args.windows], seed)
    return 0


def cmd_finetune(args):
    from .model import load_checkpoint, save
    from .train import finetune, write_history_csv

    seed = _seed(args)
    tcfg = _train_config(args, seed)
    ckpt = load_checkpoint(args.from_, expect_w=args.window, reshape_head=args.reshape_head)
    if args.plain and not ckpt.config.plain:
        raise ConflictingFlags("--plain given but the pretrained checkpoint is not a plain model")
    train, val = _split_windows(_load_train_windows(args), seed)
    result, _ = finetune(ckpt, train, val, tcfg, reset_bn_stats=args.reset_bn_stats,
                         source_tag=args.tag or Path(args.windows).stem)
    save(result.best_checkpoint, args.out)
    if args.log:
        write_history_csv(result.history, args.log)
    _write_manifest(args.out, args, {"train": tcfg.to_dict(), "model": ckpt.config.to_dict(),
                                     "reset_bn_stats": args.reset_bn_stats}, [args.windows, args.from_], seed)
    return 0


def _plots(plot_dir, windows=None, snr_rows=None, tag=""):
    plot_dir = Path(plot_dir)
    if windows is not None:
        labels = np.array([w.label_bpm for w in windows])
        edges = np.arange(0, 62, 2.0)
        counts, _ = np.histogram(labels, bins=edges)
        atomic_write(plot_dir / "rr_histogram.csv",
                     _csv_text(("bin_lo", "bin_hi", "count"), zip(edges[:-1].tolist(), edges[1:].tolist(), counts.tolist())))
    if snr_rows is not None:
        from .evaluation import SnrSummary

        q = SnrSummary(snr_rows).quartiles()
        atomic_write(plot_dir / "snr_boxplot.csv",
                     _csv_text(("dataset", "n", "min", "q1", "median", "q3", "max"),
                               [(tag, q.get("n", 0), *(q.get(k, float("nan")) for k in ("min", "q1", "median", "q3", "max")))]))


def cmd_evaluate(args):
    from .evaluation import run_loso
    from .model import load_checkpoint

    seed = _seed(args)
    tcfg = _train_config(args, seed)
    mcfg = _model_config(args)
    pretrained = None
    if args.pretrained:
        pretrained = load_checkpoint(args.pretrained, expect_w=args.window, reshape_head=args.reshape_head)
        if args.plain != pretrained.config.plain:
            raise ConflictingFlags("--plain does not match the architecture of --pretrained")
        mcfg = pretrained.config
    windows, _ = _preprocess_dir(args.data_dir, args.window, args.stride, args.sqi_threshold, args.flatline_delta)
    if args.max_windows_per_subject:
        keep, seen = [], {}
        for w in windows:
            seen[w.subject_id] = seen.get(w.subject_id, 0) + 1
            if seen[w.subject_id] <= args.max_windows_per_subject:
                keep.append(w)
        windows = keep
    report = run_loso(windows, mcfg, tcfg, pretrained, seed=seed, jobs=args.jobs,
                      dataset_tag=args.tag or Path(args.data_dir).name,
                      progress=lambda d, n: log.info("fit %d/%d done", d, n))
    atomic_write(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
    pred_path = args.predictions or str(Path(args.out).with_suffix(".predictions.csv"))
    atomic_write(pred_path, _csv_text(("subject", "start_t", "truth_bpm", "pred_bpm"), report.predictions))
    if args.plots:
        _plots(args.plots, windows=windows)
    _write_manifest(args.out, args, {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "stride": args.stride,
                                     "sqi_threshold": args.sqi_threshold}, [args.data_dir], seed)
    log.info("MAE %.3f +/- %.3f BPM over %d subjects", report.mean_mae, report.std_mae, len(report.subjects))
    return 0


def cmd_predict(args):
    from . import signal_io as sio
    from .model import load
    from .sqi import score

    model = load(args.model, expect_w=args.window, reshape_head=args.reshape_head)
    path = Path(args.ppg)
    tmp = sio._read_two_column_csv(path, ("t_seconds", "value"))
    if len(tmp) < 2:
        raise ValidationError(f"{path}: need at least two samples")
    dt = np.diff(tmp[:, 0])
    if np.any(dt <= 0):
        raise ValidationError(f"{path}: timestamps not strictly increasing")
    rec = sio.PpgRecord(path.stem, round(1.0 / float(np.median(dt)), 6), tmp[:, 1],
                        np.array([[0.0, 0.0]]))
    rec = sio.resample(rec, sio.SR)
    n = sio.SR * args.window
    if len(rec.samples) < n:
        raise ValidationError(f"{path}: shorter than one {args.window} s window")
    rows, values, keep = [], [], []
    for j in range(sio.window_count(rec.duration, args.window, args.stride)):
        i = int(round(j * args.stride * sio.SR))
        seg = rec.samples[i:i + n]
        if len(seg) < n:
            break
        rep = score(sio.WindowSample(rec.subject_id, j * args.stride, args.window, seg, 0.0),
                    threshold=args.sqi_threshold, flat_delta=args.flatline_delta)
        ok = rep.accepted or args.no_sqi
        rows.append([float(j * args.stride), float(rep.sqi), "ok" if ok else "rejected", ""])
        if ok:
            keep.append(len(rows) - 1)
            values.append(seg)
    if values:
        preds = model.predict(np.stack(values), dtype=np.float32)
        for r, p in zip(keep, preds):
            rows[r][3] = f"{float(p):.4f}"
    text = "start_t,sqi,status,pred_bpm\n" + "".join(f"{r[0]:.3f},{r[1]:.6f},{r[2]},{r[3]}\n" for r in rows)
    atomic_write(args.out, text)
    _write_manifest(args.out, args, {"window": args.window, "stride": args.stride, "no_sqi": args.no_sqi,
                                     "sqi_threshold": args.sqi_threshold}, [args.model, args.ppg], None)
    return 0


def cmd_snr(args):
    from .evaluation import snr_db

    windows, _ = _preprocess_dir(args.data_dir, args.window, args.stride, 0.9, 0.02, apply_sqi=not args.all_windows)
    rows = [(w.subject_id, w.start_t, snr_db(w)) for w in windows]
    atomic_write(args.out, _csv_text(("subject", "start_t", "snr_db"), rows))
    if args.plots:
        _plots(args.plots, windows=windows, snr_rows=rows, tag=Path(args.data_dir).name)
    _write_manifest(args.out, args, {"window": args.window, "stride": args.stride}, [args.data_dir], None)
    return 0


def cmd_ews(args):
    from .evaluation import DEFAULT_RUBRIC, ews_report, validate_rubric

    if args.rubric == "default":
        rubric = list(DEFAULT_RUBRIC)
    else:
        data = _read_json(args.rubric)
        rubric = data["bands"] if isinstance(data, dict) and "bands" in data else data
    rubric = validate_rubric(rubric)
    path = Path(args.report)
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    truth, pred = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"truth_bpm", "pred_bpm"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: needs truth_bpm and pred_bpm columns")
        for row in reader:
            if row["pred_bpm"] in ("", None):
                continue
            truth.append(float(row["truth_bpm"]))
            pred.append(float(row["pred_bpm"]))
    rep = ews_report(truth, pred, rubric)
    atomic_write(args.out, json.dumps(rep.to_dict(), indent=2) + "\n")
    log.info("rubric: %s", json.dumps(rubric))
    _write_manifest(args.out, args, {"rubric": rubric}, [args.report], None)
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="rrwave", description="PPG respiratory-rate estimation pipeline")
    p.add_argument("--version", action="version",
                   version=f"rrwave {__version__} (checkpoint format {FORMAT_VERSION}, windows format {WINDOWS_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common_window(sp, required=True):
        sp.add_argument("--window", type=int, choices=(16, 32, 64), required=required)
        sp.add_argument("--stride", type=float, default=2.0)

    def sqi_flags(sp):
        sp.add_argument("--sqi-threshold", type=float, default=0.9)
        sp.add_argument("--flatline-delta", type=float, default=0.02)

    s = sub.add_parser("synth", help="write a synthetic cohort in the dataset layout")
    s.add_argument("--subjects", type=int, default=6)
    s.add_argument("--rr", default="8..30", help="RR range lo..hi in BPM")
    s.add_argument("--duration", type=float, default=480.0)
    s.add_argument("--fs", type=float, default=125.0)
    s.add_argument("--max-noise", type=float, default=0.03)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("preprocess", help="resample, window and SQI-gate a dataset")
    s.add_argument("--data-dir", required=True)
    common_window(s)
    sqi_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--audit", help="SQI audit CSV (default: <out>.sqi.csv)")

    for name in ("train", "finetune"):
        s = sub.add_parser(name, help=f"{name} a model on a window store")
        s.add_argument("--windows", required=True)
        s.add_argument("--window", type=int, choices=(16, 32, 64), required=True)
        s.add_argument("--config", help="TrainConfig JSON")
        s.add_argument("--max-epochs", type=int)
        s.add_argument("--out", required=True)
        s.add_argument("--log", help="history CSV")
        s.add_argument("--seed", type=int)
        s.add_argument("--tag", help="dataset tag recorded in the checkpoint")
        s.add_argument("--plain", action="store_true")
        if name == "train":
            s.add_argument("--model-config", help="ModelConfig JSON overrides")
        else:
            s.add_argument("--from", dest="from_", required=True)
            s.add_argument("--reset-bn-stats", action="store_true")
            s.add_argument("--reshape-head", action="store_true")

    s = sub.add_parser("evaluate", help="leave-one-subject-out x 5-fold evaluation")
    s.add_argument("--data-dir", required=True)
    common_window(s)
    sqi_flags(s)
    s.add_argument("--pretrained")
    s.add_argument("--reshape-head", action="store_true")
    s.add_argument("--plain", action="store_true")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--model-config", help="ModelConfig JSON overrides")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--max-windows-per-subject", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--tag")
    s.add_argument("--out", default="report.json")
    s.add_argument("--predictions", help="per-window predictions CSV (default: <out>.predictions.csv)")
    s.add_argument("--plots", help="directory for plot-data CSVs")

    s = sub.add_parser("predict", help="predict RR for every window of one PPG file")
    s.add_argument("--model", required=True)
    s.add_argument("--ppg", required=True)
    common_window(s)
    sqi_flags(s)
    s.add_argument("--no-sqi", action="store_true")
    s.add_argument("--reshape-head", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("snr", help="per-window SNR of a dataset")
    s.add_argument("--data-dir", required=True)
    common_window(s)
    s.add_argument("--all-windows", action="store_true", help="skip the SQI gate")
    s.add_argument("--out", required=True)
    s.add_argument("--plots")

    s = sub.add_parser("ews", help="early-warning-score analysis of predictions")
    s.add_argument("--report", required=True, help="predictions CSV with truth_bpm,pred_bpm")
    s.add_argument("--rubric", required=True, help="rubric JSON, or 'default'")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "predict": cmd_predict, "snr": cmd_snr, "ews": cmd_ews,
}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
            parser.print_usage(sys.stderr)
            raise UnknownSubcommand(f"unknown subcommand {argv[0]!r}; choose from {', '.join(SUBCOMMANDS)}")
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_usage(sys.stderr)
            raise ValidationError("no subcommand given")
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"rrwave: error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, RRWaveError, ArithmeticError, MemoryError) as exc:
        print(f"rrwave: failed: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("rrwave: interrupted", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
