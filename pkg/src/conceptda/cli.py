"""Command-line entry point: ``conceptda gen|train|eval|verify|report``.

Exit codes: 0 success, 2 usage or configuration problem, 3 file-system
error, 4 numerical abort during training, 5 a verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, ShiftSpec, SpecError, generate, load_csv, save_csv
from .evaluation import (ProbeConfig, bound_audit, concept_distributions, evaluate,
                         intervention_curve, probe_jsd)
from .losses import ConfigError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .svg import write_line_chart
from .train import NumericalError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

MANIFEST, CHECKPOINT, TRAINLOG = "manifest.json", "checkpoint.bin", "trainlog.csv"
METRICS, CURVE, REPORT_DIR = "metrics.csv", "intervention_curve.csv", "report"
MODEL_KEYS = ("d", "backbone_widths", "predictor_widths", "discriminator_widths")
DEFAULT_EMBED_DIM = 4


class UsageError(Exception):
    """Bad arguments or missing prerequisites; maps to exit code 2."""


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    try:
        spec = ShiftSpec.from_dict(_read_json(args.spec))
    except SpecError as exc:
        raise UsageError(f"bad spec: {exc}") from None
    if args.n_source < 1 or args.n_target < 1:
        raise UsageError("--n-source and --n-target must be positive")
    source, target = generate(spec, args.n_source, args.n_target, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(source, out / "source.csv")
    save_csv(target, out / "target.csv")
    _write_json(out / "spec.json", {"spec": spec.to_dict(), "seed": args.seed,
                                    "n_source": args.n_source, "n_target": args.n_target})
    print(f"wrote {len(source)} source and {len(target)} target rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def parse_config(doc: dict, D: int, K: int, Q: int) -> tuple[TrainConfig, ModelConfig]:
    doc = dict(doc)
    model_doc = doc.pop("model", {})
    if not isinstance(model_doc, dict):
        raise ConfigError("config key 'model' must be an object")
    unknown = sorted(set(model_doc) - set(MODEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown model config key: {unknown[0]}")
    cfg = TrainConfig.from_dict(doc)
    model_cfg = ModelConfig(D=D, K=K, Q=Q, d=int(model_doc.get("d", DEFAULT_EMBED_DIM)),
                            **{k: list(model_doc[k]) for k in MODEL_KEYS[1:] if k in model_doc})
    return cfg, model_cfg


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.csv"
    if not path.exists():
        raise UsageError(f"missing data file {path}")
    try:
        return load_csv(path)
    except DataFormatError as exc:
        raise UsageError(str(exc)) from None


def _class_count(data_dir: Path, source, target) -> int:
    """Q from the spec snapshot written by ``gen``, else from the labels present."""
    snapshot = data_dir / "spec.json"
    if snapshot.exists():
        return int(_read_json(snapshot)["spec"]["Q"])
    return max(int(source.y.max(initial=0)), int(target.y.max(initial=0)), 1) + 1


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    source, target = _load_split(data_dir, "source"), _load_split(data_dir, "target")
    if source.D != target.D or source.K != target.K:
        raise UsageError("source and target CSVs disagree on D or K")
    Q = _class_count(data_dir, source, target)
    try:
        cfg, model_cfg = parse_config(_read_json(args.config), source.D, source.K, Q)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "conceptda",
        "version": __version__,
        "config": cfg.to_dict(),
        "model": dataclasses.asdict(model_cfg),
        "seed": cfg.seed,
        "data_dir": str(data_dir.resolve()),
        "datasets": {"source": source.fingerprint(), "target": target.fingerprint()},
        "outputs": {"checkpoint": CHECKPOINT, "trainlog": TRAINLOG},
    }
    _write_json(run / MANIFEST, manifest)
    try:
        params, log = train(source, target, cfg, model_cfg)
    except NumericalError as exc:
        print(f"error: numerical abort at epoch {exc.epoch}, step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(params, run / CHECKPOINT)
    log.write_csv(run / TRAINLOG)
    secs = sum(r.wall_time for r in log.records)
    last = log.records[-1] if log.records else None
    summary = "" if last is None else (f"; final source acc {last.source_class_acc:.4f}, "
                                       f"target acc {last.target_class_acc:.4f}")
    print(f"trained {cfg.epochs} epochs in {secs:.1f}s{summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / report


def _open_run(run: Path):
    if not (run / MANIFEST).exists():
        raise UsageError(f"{run}: no {MANIFEST}; not a training run directory")
    if not (run / CHECKPOINT).exists():
        raise UsageError(f"{run}: missing {CHECKPOINT}")
    manifest = _read_json(run / MANIFEST)
    try:
        params = load_checkpoint(run / CHECKPOINT)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{run / CHECKPOINT}: unreadable checkpoint ({exc})") from None
    return manifest, params


def _parse_ratios(text: str) -> list[float]:
    try:
        ratios = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--intervene expects comma-separated numbers, got {text!r}") from None
    if not ratios or any(not 0 <= r <= 1 for r in ratios):
        raise UsageError("intervention ratios must lie in [0, 1]")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise UsageError("intervention ratios must be strictly increasing")
    return ratios


METRIC_COLUMNS = ("split", "class_acc", "concept_acc", "concept_f1", "n")


def cmd_eval(args) -> int:
    run = Path(args.run)
    manifest, params = _open_run(run)
    ratios = _parse_ratios(args.intervene) if args.intervene else None
    ds = _load_split(Path(manifest["data_dir"]), args.split)

    m = evaluate(params, ds)
    rows = {}
    if (run / METRICS).exists():
        with open(run / METRICS, newline="", encoding="utf-8") as fh:
            rows = {r["split"]: [r[c] for c in METRIC_COLUMNS] for r in csv.DictReader(fh)}
    rows[args.split] = [args.split, _num(m.class_acc), _num(m.concept_acc), _num(m.concept_f1), m.n]
    _write_rows(run / METRICS, METRIC_COLUMNS, [rows[k] for k in sorted(rows)])
    print(f"{args.split}: class_acc {m.class_acc:.4f} concept_acc {m.concept_acc:.4f} "
          f"concept_f1 {m.concept_f1:.4f} (n={m.n})")

    if ratios is not None:
        seed = int(manifest["seed"])
        curve = intervention_curve(params, ds, ratios, seed)
        _write_rows(run / CURVE, ("split", "ratio", "class_acc", "concept_acc", "seed"),
                    [[args.split, _num(r), _num(a), _num(c), seed]
                     for r, a, c in zip(curve.ratios, curve.class_acc, curve.concept_acc)])
        write_line_chart(run / "intervention_curve.svg",
                         [("class accuracy", curve.ratios, curve.class_acc),
                          ("concept accuracy", curve.ratios, curve.concept_acc)],
                         f"Concept intervention ({args.split})", "intervention ratio", "accuracy")
        for r, a, c in zip(curve.ratios, curve.class_acc, curve.concept_acc):
            print(f"  ratio {r:.2f}: class_acc {a:.4f} concept_acc {c:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    manifest, params = _open_run(run)
    if not (run / METRICS).exists():
        raise UsageError(f"{run}: no {METRICS}; run 'eval' first")
    data_dir = Path(manifest["data_dir"])
    source, target = _load_split(data_dir, "source"), _load_split(data_dir, "target")
    seed = int(manifest["seed"])
    out = run / REPORT_DIR
    out.mkdir(exist_ok=True)

    dists = concept_distributions(params, source, target)
    _write_rows(out / "concept_distributions.csv",
                ("concept", "source_chat_mean", "target_chat_mean", "target_gt_freq",
                 "jsd_source_target_chat", "jsd_target_chat_gt"),
                [[d.concept, _num(d.source_chat_mean), _num(d.target_chat_mean), _num(d.target_gt_freq),
                  _num(d.jsd_source_target_chat), _num(d.jsd_target_chat_gt)] for d in dists])
    for d in dists:
        curves = [("source c_hat", d.source_chat), ("target c_hat", d.target_chat), ("target GT", d.target_gt)]

        def cell(curve, i):
            return "" if curve is None else _num(curve[i])

        _write_rows(out / f"kde_concept_{d.concept}.csv", ("grid", "source_chat", "target_chat", "target_gt"),
                    [[_num(g)] + [cell(c, i) for _, c in curves] for i, g in enumerate(d.grid)])
        write_line_chart(out / f"kde_concept_{d.concept}.svg",
                         [(name, d.grid, c) for name, c in curves if c is not None],
                         f"Concept {d.concept}: KDE of predicted probability", "value", "density")

    c_d, jsd_est = probe_jsd(params, source, target, ProbeConfig(), seed)
    audit = bound_audit(params, source, target, ProbeConfig(), seed)
    rows = [("probe_c_d_embeddings", _num(c_d)), ("probe_jsd_embeddings", _num(jsd_est)),
            ("mean_jsd_source_target_chat", _num(np.mean([d.jsd_source_target_chat for d in dists]))),
            ("mean_jsd_target_chat_gt", _num(np.mean([d.jsd_target_chat_gt for d in dists])))]
    rows += [(k, v if isinstance(v, str) else _num(v)) for k, v in audit.rows()]
    rows.append(("divergence_proxy_note", audit.divergence_label))
    _write_rows(out / "summary.csv", ("quantity", "value"), rows)
    print(f"report written to {out} (probe JSD {jsd_est:.4f}, "
          f"mean target gap to GT {np.mean([d.jsd_target_chat_gt for d in dists]):.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .checks import run_check

    result = run_check(args.check, seed=args.seed)
    for line in result.lines():
        print(line)
    return EXIT_OK if result.passed else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    from .checks import CHECKS

    parser = argparse.ArgumentParser(prog="conceptda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"conceptda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic source/target pair")
    p.add_argument("--spec", required=True, help="JSON file with ShiftSpec fields")
    p.add_argument("--n-source", type=int, required=True)
    p.add_argument("--n-target", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated data directory")
    p.add_argument("--config", required=True, help="JSON file with training config")
    p.add_argument("--data", required=True, help="directory holding source.csv and target.csv")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metrics and optional intervention curve")
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=("source", "target"), default="target")
    p.add_argument("--intervene", help="comma-separated ratios, e.g. 0,0.25,0.5,0.75,1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a built-in verification check")
    p.add_argument("--check", required=True, choices=CHECKS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="write concept distribution report for an evaluated run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
