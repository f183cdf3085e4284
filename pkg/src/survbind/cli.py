"""Command-line entry point: gen / train / eval / cv / gradcheck / km.

Exit codes: 0 success, 1 validation error (bad flags, missing or malformed
files, failed gradient check), 2 unexpected runtime error. Every command is
deterministic given its inputs and seed; outputs carry no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import metrics as metrics_mod
from . import training
from .aggregation import write_inter_attention_csv, write_intra_attention_csv
from .cohort import (
    Cohort,
    FeatureSet,
    GenConfig,
    ModalityKind,
    PatientRecord,
    bin_intervals,
    generate_synthetic,
    load_cohort,
    save_cohort,
)
from .numerics import Rng
from .survival import write_predictions_csv
from .training import TrainConfig, composed_loss_check, cross_validate, evaluate, load_checkpoint, save_checkpoint, train


class CliError(Exception):
    """Validation problem: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; our contract says 1
        raise CliError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of TrainConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None, help="contrastive weight")
    p.add_argument("--lambda-cen", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--queue-size", type=int, default=None)
    p.add_argument("--intervals", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)


def _resolve_config(args) -> TrainConfig:
    """Precedence: flag > config file > default."""
    data = TrainConfig().to_dict()
    if args.config is not None:
        if not args.config.exists():
            raise CliError(f"config file not found: {args.config}")
        try:
            file_data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config: malformed JSON ({exc.msg})") from exc
        if not isinstance(file_data, dict):
            raise CliError("config: expected a JSON object")
        known = set(data)
        for key in file_data:
            if key not in known:
                raise CliError(f"config: unknown field {key!r}")
        data.update(file_data)
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "contrastive_weight": args.lambda_,
        "lambda_cen": args.lambda_cen,
        "tau": args.tau,
        "queue_size": args.queue_size,
        "n_intervals": args.intervals,
        "lr": args.lr,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(data)
    except ValueError as exc:
        raise CliError(f"config: {exc}") from exc


def _load_cohort(path: Path) -> Cohort:
    if not path.exists():
        raise CliError(f"cohort file not found: {path}")
    try:
        return load_cohort(path)
    except ValueError as exc:
        raise CliError(f"cohort: {exc}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="survbind", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort JSONL")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--censor-rate", type=float, default=0.5)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--missing-radiology", type=float, default=None, help="default: dataset-1-like")
    p.add_argument("--missing-notes", type=float, default=None)
    p.add_argument("--instances-min", type=int, default=4)
    p.add_argument("--instances-max", type=int, default=12)
    p.add_argument("--scale", type=float, default=36.0)
    p.add_argument("--weibull-shape", type=float, default=3.0)

    p = sub.add_parser("train", help="train on a cohort and write a checkpoint")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss-log", type=Path, default=None, help="default: <out>.losses.csv")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="metrics JSON")
    p.add_argument("--predictions", type=Path, default=None, help="default: <out stem>_predictions.csv")
    p.add_argument("--attention-intra", type=Path, default=None)
    p.add_argument("--attention-inter", type=Path, default=None)

    p = sub.add_parser("cv", help="seeded k-fold cross-validation")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composed loss")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--points", type=int, default=3, help="random parameter points to test")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=4, help="sampled entries per parameter")
    p.add_argument("--out", type=Path, default=None, help="optional JSON report")

    p = sub.add_parser("km", help="Kaplan-Meier curves of the median-risk split")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_gen(args) -> int:
    missing = dict()
    if args.missing_radiology is not None:
        missing[ModalityKind.RADIOLOGY] = args.missing_radiology
    if args.missing_notes is not None:
        missing[ModalityKind.CLINICAL_NOTES] = args.missing_notes
    kwargs = {"missing_prob": missing} if missing else {}
    try:
        cfg = GenConfig(
            n_patients=args.patients,
            censor_rate=args.censor_rate,
            signal=args.signal,
            instances_min=args.instances_min,
            instances_max=args.instances_max,
            scale=args.scale,
            weibull_shape=args.weibull_shape,
            seed=args.seed,
            **kwargs,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    save_cohort(generate_synthetic(cfg), args.out)
    print(f"wrote {args.patients} patients to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    cohort = _load_cohort(args.cohort)
    if not cohort.interval_edges:
        try:
            bin_intervals(cohort, cfg.n_intervals)
        except ValueError as exc:
            raise CliError(f"binning: {exc}") from exc
    result = train(cohort, cfg)
    save_checkpoint(result.state, args.out)
    loss_log = args.loss_log if args.loss_log is not None else args.out.with_suffix(args.out.suffix + ".losses.csv")
    training.write_loss_log(loss_log, result.loss_log)
    final = result.loss_log[-1]
    print(f"trained {cfg.epochs} epochs; final epoch mean L={final.L:.4f} (L_con={final.L_con:.4f})")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    if not args.model.exists():
        raise CliError(f"model file not found: {args.model}")
    state = load_checkpoint(args.model)
    cohort = _load_cohort(args.cohort)
    try:
        result = evaluate(state, cohort)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    args.out.write_text(result.bundle.to_json())
    stem = args.out.with_suffix("")
    predictions = args.predictions or Path(f"{stem}_predictions.csv")
    attn_intra = args.attention_intra or Path(f"{stem}_attention_intra.csv")
    attn_inter = args.attention_inter or Path(f"{stem}_attention_inter.csv")
    write_predictions_csv(predictions, [(pid, result.predictions[pid]) for pid in sorted(result.predictions)])
    write_intra_attention_csv(attn_intra, result.intra_attention)
    write_inter_attention_csv(attn_inter, result.inter_attention)
    print(f"ci={result.bundle.ci:.4f} brier={result.bundle.brier:.4f} logrank_p={result.bundle.logrank_p:.3e}")
    return 0


def _cmd_cv(args) -> int:
    cfg = _resolve_config(args)
    cohort = _load_cohort(args.cohort)
    try:
        result = cross_validate(cohort, cfg, folds=args.folds, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    args.out.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"mean ci={result.mean_ci:.4f} (+/- {result.std_ci:.4f}), pooled logrank p={result.pooled.logrank_p:.3e}")
    return 0


def make_gradcheck_cohort(seed: int = 0) -> Cohort:
    """Tiny deterministic 3-patient cohort covering all modality patterns,
    an uncensored death, and a censored patient with an eligible later interval."""
    rng = Rng(seed).substream(11)

    def feats(kind: ModalityKind, n: int) -> FeatureSet:
        return FeatureSet(kind, rng.standard_normal((n, kind.dim)))

    p0 = PatientRecord(
        id="g0",
        feature_sets={k: feats(k, 3) for k in ModalityKind},
        time=2.0,
        event=True,
    )
    p1 = PatientRecord(
        id="g1",
        feature_sets={k: feats(k, 2) for k in (ModalityKind.WSI, ModalityKind.PATH_REPORT, ModalityKind.RADIOLOGY)},
        time=1.0,
        event=False,
    )
    p2 = PatientRecord(
        id="g2",
        feature_sets={k: feats(k, 2) for k in (ModalityKind.WSI, ModalityKind.PATH_REPORT, ModalityKind.CLINICAL_NOTES)},
        time=4.0,
        event=True,
    )
    return bin_intervals(Cohort([p0, p1, p2]), 2)


def _cmd_gradcheck(args) -> int:
    cohort = make_gradcheck_cohort(args.seed)
    cfg = TrainConfig(n_intervals=2, queue_size=2, seed=args.seed)
    reports = []
    for point in range(args.points):
        report = composed_loss_check(
            cohort,
            cfg,
            seed=args.seed + point,
            step=args.step,
            tol=args.tol,
            entries_per_param=args.entries,
        )
        reports.append(report)
        print(f"point {point}: {'PASS' if report.passed else 'FAIL'} worst rel err {report.worst:.3e}")
    ok = all(r.passed for r in reports)
    if args.out is not None:
        payload = {
            "passed": ok,
            "points": [
                {"seed": args.seed + i, "worst": r.worst, "max_rel_error": r.max_rel_error}
                for i, r in enumerate(reports)
            ],
            "step": args.step,
            "tol": args.tol,
        }
        args.out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if not ok:
        for r in reports:
            if not r.passed:
                print(r.summary(), file=sys.stderr)
        raise CliError("gradient check failed")
    print(f"gradcheck OK: {args.points} points, tol {args.tol:g}")
    return 0


def _cmd_km(args) -> int:
    if not args.predictions.exists():
        raise CliError(f"predictions file not found: {args.predictions}")
    cohort = _load_cohort(args.cohort)
    by_id = {p.id: p for p in cohort.patients}
    outcomes = []
    with args.predictions.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "patient_id" not in reader.fieldnames or "risk" not in reader.fieldnames:
            raise CliError("predictions: missing field 'patient_id' or 'risk'")
        for row in reader:
            patient = by_id.get(row["patient_id"])
            if patient is None:
                raise CliError(f"predictions: unknown patient {row['patient_id']!r}")
            outcomes.append(
                metrics_mod.SurvivalOutcome(
                    time=patient.time, event=patient.event, risk=float(row["risk"]), patient_id=patient.id
                )
            )
    if len(outcomes) < 2:
        raise CliError("predictions: need at least 2 patients")
    high, low = metrics_mod.median_split(outcomes)
    curves = []
    if high:
        curves.append(("high", metrics_mod.kaplan_meier(high)))
    if low:
        curves.append(("low", metrics_mod.kaplan_meier(low)))
    metrics_mod.write_km_csv(args.out, curves)
    if high and low:
        chi2, p = metrics_mod.logrank_test(high, low)
        print(f"logrank chi2={chi2:.4f} p={p:.3e}")
    else:
        print("degenerate split: all risks tied")
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "gradcheck": _cmd_gradcheck,
    "km": _cmd_km,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except training.TrainingError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
