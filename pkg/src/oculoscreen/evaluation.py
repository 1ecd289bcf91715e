"""Identity-disjoint cross-validation and screening metrics.

The fold planner deals each cohort's shuffled identities round-robin with a
pointer that carries over between cohorts, so per-cohort counts and overall
fold sizes both stay within one of each other. Metrics follow the two-layer
reading of screening results: a binary positive/negative layer (positive =
COVID or any other disease) and a disease-type layer (COVID vs OTHER) that
feeds the false-disease-prediction error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .capture_protocol import (
    CLASS_ORDER,
    CohortLabel,
    DatasetManifest,
    ScreeningClass,
    identities_of,
    sessions_by_identity,
    taxonomy_of,
)
from .classifier import (
    ModelBundle,
    Prediction,
    SessionCells,
    TrainConfig,
    predict_cells,
    prepare_session_cells,
    train_on_cells,
)
from .errors import CohortTooSmallError, OneClassOnlyError
from .features import EncoderConfig
from .preprocess import GridSpec

#: Cohort -> screening-taxonomy mapping used by every report.
DEFAULT_TAXONOMY: Mapping[CohortLabel, ScreeningClass] = {
    c: taxonomy_of(c) for c in CLASS_ORDER
}


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]  # identity_id -> fold index
    seed: int

    def fold_identities(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts


def make_folds(
    identities: Sequence[tuple[str, CohortLabel]], k: int, seed: int
) -> FoldPlan:
    """Assign identities to k folds, stratified by cohort.

    Within each cohort the identities are shuffled by the seed and dealt
    round-robin; the dealing pointer continues across cohorts, which keeps
    overall fold sizes within one of each other as well.
    """
    if k < 2:
        raise ValueError("fold count k must be at least 2")
    by_cohort: dict[CohortLabel, list[str]] = {c: [] for c in CLASS_ORDER}
    for identity_id, cohort in identities:
        by_cohort[cohort].append(identity_id)
    for cohort, ids in by_cohort.items():
        if ids and len(ids) < k:
            raise CohortTooSmallError(
                f"cohort {cohort.value} has {len(ids)} identities, fewer than k={k}"
            )

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    pointer = 0
    for cohort in CLASS_ORDER:
        ids = sorted(by_cohort[cohort])
        order = rng.permutation(len(ids))
        for j in order:
            assignment[ids[j]] = pointer % k
            pointer += 1
    return FoldPlan(k=k, assignment=assignment, seed=seed)


@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # (FPR, TPR), from (0,0) to (1,1)
    auc: float

    def to_dict(self) -> dict:
        return {"points": [[float(a), float(b)] for a, b in self.points], "auc": self.auc}


def roc_auc(scores: Sequence[float], is_target: Sequence[bool]) -> RocCurve:
    """ROC curve and area from one-vs-rest scores.

    Thresholds sweep the unique score values from high to low; tied scores
    collapse into one sweep step, so the trapezoid area equals the pairwise
    statistic P(target > other) + 0.5 * P(tie).
    """
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(is_target, dtype=bool)
    if scores.shape != target.shape or scores.ndim != 1:
        raise ValueError("scores and is_target must be equal-length 1-d sequences")
    n_pos = int(target.sum())
    n_neg = int(len(target) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnlyError("ROC needs both target and non-target examples")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_target = target[order]
    tp = np.cumsum(sorted_target)
    fp = np.cumsum(~sorted_target)
    # Keep only the last index of each tied score group.
    last_of_group = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tpr = np.concatenate(([0.0], tp[last_of_group] / n_pos))
    fpr = np.concatenate(([0.0], fp[last_of_group] / n_neg))
    auc = float(np.trapezoid(tpr, fpr))
    points = [(float(f), float(t)) for f, t in zip(fpr, tpr)]
    return RocCurve(points=points, auc=auc)


@dataclass
class MetricsReport:
    """The eight screening metrics plus per-cohort curves and raw counts.

    Ratios with an empty denominator are None ("undefined"), never silently
    0 or 1. ``counts`` is the 4x4 cohort-level confusion matrix in
    CLASS_ORDER (rows = truth, cols = predicted).
    """

    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    fpe: float | None
    fne: float | None
    fdpe: float | None
    per_group_auc: dict[CohortLabel, float] = field(default_factory=dict)
    roc_curves: dict[CohortLabel, RocCurve] = field(default_factory=dict)
    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    def cohort_recall(self, cohort: CohortLabel) -> float | None:
        """Fraction of the cohort's subjects predicted as that cohort."""
        i = CLASS_ORDER.index(cohort)
        total = int(self.counts[i].sum())
        if total == 0:
            return None
        return float(self.counts[i, i] / total)

    def scalar_metrics(self) -> dict[str, float | None]:
        out = {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "fpe": self.fpe,
            "fne": self.fne,
            "fdpe": self.fdpe,
        }
        for cohort in CLASS_ORDER:
            out[f"auc_{cohort.value.lower()}"] = self.per_group_auc.get(cohort)
        return out

    def to_dict(self) -> dict:
        def enc(x):
            return "undefined" if x is None else float(x)

        return {
            "sensitivity": enc(self.sensitivity),
            "specificity": enc(self.specificity),
            "accuracy": enc(self.accuracy),
            "fpe": enc(self.fpe),
            "fne": enc(self.fne),
            "fdpe": enc(self.fdpe),
            "per_group_auc": {
                c.value: enc(self.per_group_auc.get(c)) for c in CLASS_ORDER
            },
            "covid_recall": enc(self.cohort_recall(CohortLabel.COVID)),
            "counts": self.counts.tolist(),
            "class_order": [c.value for c in CLASS_ORDER],
        }


def compute_metrics(
    truths: Sequence[CohortLabel],
    preds: Sequence[Prediction],
    taxonomy: Mapping[CohortLabel, ScreeningClass] = DEFAULT_TAXONOMY,
) -> MetricsReport:
    """Score predictions against cohort truth.

    Binary layer: a person is positive when their taxonomy is COVID or
    OTHER; sensitivity/specificity/accuracy/FPE/FNE come from that table.
    Type layer: among true positives that were predicted positive, FDPE
    counts those whose predicted disease type (COVID vs OTHER) is wrong,
    over all positive persons. Positives predicted negative are charged to
    FNE only.
    """
    if len(truths) != len(preds) or not truths:
        raise ValueError("need equal, non-empty truth and prediction lists")

    tp = tn = fp = fn = wrong_type = 0
    counts = np.zeros((4, 4), dtype=np.int64)
    for truth, pred in zip(truths, preds):
        truth_tax = taxonomy[truth]
        pred_cohort = pred.predicted_cohort
        pred_tax = taxonomy[pred_cohort]
        counts[CLASS_ORDER.index(truth), CLASS_ORDER.index(pred_cohort)] += 1

        truth_pos = truth_tax is not ScreeningClass.NEGATIVE
        pred_pos = pred_tax is not ScreeningClass.NEGATIVE
        if truth_pos and pred_pos:
            tp += 1
            if pred_tax is not truth_tax:
                wrong_type += 1
        elif truth_pos and not pred_pos:
            fn += 1
        elif not truth_pos and pred_pos:
            fp += 1
        else:
            tn += 1

    n_pos = tp + fn
    n_neg = tn + fp
    ratio = lambda num, den: (num / den) if den > 0 else None
    return MetricsReport(
        sensitivity=ratio(tp, n_pos),
        specificity=ratio(tn, n_neg),
        accuracy=(tp + tn) / len(truths),
        fpe=ratio(fp, n_neg),
        fne=ratio(fn, n_pos),
        fdpe=ratio(wrong_type, n_pos),
        counts=counts,
    )


def per_group_curves(
    truths: Sequence[CohortLabel], preds: Sequence[Prediction]
) -> dict[CohortLabel, RocCurve]:
    """One-vs-rest ROC per cohort from the predicted probabilities."""
    curves: dict[CohortLabel, RocCurve] = {}
    for cohort in CLASS_ORDER:
        scores = [p.prob_of(cohort) for p in preds]
        flags = [t is cohort for t in truths]
        if any(flags) and not all(flags):
            curves[cohort] = roc_auc(scores, flags)
    return curves


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of fold reports; counts are summed, curves dropped."""

    def mean(values):
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    per_group = {}
    for cohort in CLASS_ORDER:
        per_group[cohort] = mean([r.per_group_auc.get(cohort) for r in reports])
    return MetricsReport(
        sensitivity=mean([r.sensitivity for r in reports]),
        specificity=mean([r.specificity for r in reports]),
        accuracy=mean([r.accuracy for r in reports]),
        fpe=mean([r.fpe for r in reports]),
        fne=mean([r.fne for r in reports]),
        fdpe=mean([r.fdpe for r in reports]),
        per_group_auc={c: v for c, v in per_group.items() if v is not None},
        counts=np.sum([r.counts for r in reports], axis=0),
    )


@dataclass
class CrossValResult:
    fold_reports: list[MetricsReport]
    average: MetricsReport
    plan: FoldPlan
    k: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [r.to_dict() for r in self.fold_reports],
            "average": self.average.to_dict(),
        }


def cross_validate(
    manifest: DatasetManifest,
    k: int,
    seed: int,
    train_cfg: TrainConfig,
    *,
    grid: GridSpec | None = None,
    encoder_cfg: EncoderConfig | None = None,
    crop_h: int = 32,
    crop_w: int = 64,
    cell_size: int = 16,
    repeats: int = 1,
    jobs: int = 1,
    cell_cache: dict[str, SessionCells] | None = None,
) -> list[CrossValResult]:
    """Run k-fold identity-disjoint cross-validation over a labeled corpus.

    For each fold: one fold is the test set, the next fold (cyclically) is
    held out for early stopping, and the rest train the model. Each repeat
    reruns the whole protocol under a fresh derived seed. Returns one
    CrossValResult per repeat.
    """
    grid = grid or GridSpec()
    identities = identities_of(manifest)
    prep_opts = dict(
        root=manifest.root, grid=grid, crop_h=crop_h, crop_w=crop_w, cell_size=cell_size
    )
    if cell_cache is None:
        cell_cache = {}
    for session in manifest.sessions:
        if session.cohort is None:
            continue
        if session.session_id not in cell_cache:
            cell_cache[session.session_id] = prepare_session_cells(session, **prep_opts)

    results = []
    for rep in range(repeats):
        rep_seed = seed + rep
        plan = make_folds(identities, k, rep_seed)

        def run_fold(fold: int) -> MetricsReport:
            fold_seed = int(
                np.random.SeedSequence([rep_seed, fold]).generate_state(1)[0] % (2**31)
            )
            val_fold = (fold + 1) % k
            split = {"train": [], "val": [], "test": []}
            for session in manifest.sessions:
                if session.cohort is None:
                    continue
                f = plan.assignment[session.identity_id]
                kind = "test" if f == fold else "val" if f == val_fold else "train"
                split[kind].append(cell_cache[session.session_id])
            cfg = TrainConfig(
                epochs=train_cfg.epochs,
                batch_size=train_cfg.batch_size,
                lr=train_cfg.lr,
                lr_decay=train_cfg.lr_decay,
                l1_lambda=train_cfg.l1_lambda,
                seed=fold_seed,
                patience=train_cfg.patience,
            )
            enc_cfg = encoder_cfg or EncoderConfig(seed=fold_seed + 1)
            bundle = train_on_cells(
                split["train"],
                split["val"],
                cfg,
                grid=grid,
                encoder_cfg=enc_cfg,
                crop_h=crop_h,
                crop_w=crop_w,
                cell_size=cell_size,
            )
            truths = [CLASS_ORDER[s.label] for s in split["test"]]
            preds = [predict_cells(bundle, s) for s in split["test"]]
            report = compute_metrics(truths, preds)
            report.roc_curves = per_group_curves(truths, preds)
            report.per_group_auc = {c: rc.auc for c, rc in report.roc_curves.items()}
            return report

        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as pool:
                fold_reports = list(pool.map(run_fold, range(k)))
        else:
            fold_reports = [run_fold(f) for f in range(k)]
        results.append(
            CrossValResult(
                fold_reports=fold_reports,
                average=average_reports(fold_reports),
                plan=plan,
                k=k,
                seed=rep_seed,
            )
        )
    return results


def write_reports(results: Sequence[CrossValResult], out_dir: str | Path) -> None:
    """Emit report.json, a long-format metrics.csv, and per-group ROC CSVs.

    Output is deterministic: same results produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "repeats": [r.to_dict() for r in results],
        "grand_average": average_reports(
            [fr for r in results for fr in r.fold_reports]
        ).to_dict(),
    }
    (out / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )

    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repeat", "fold", "metric", "value"])
        for ri, result in enumerate(results):
            for fi, report in enumerate(result.fold_reports):
                for name, value in sorted(report.scalar_metrics().items()):
                    writer.writerow(
                        [ri, fi, name, "" if value is None else f"{value:.6f}"]
                    )
            for name, value in sorted(result.average.scalar_metrics().items()):
                writer.writerow([ri, "mean", name, "" if value is None else f"{value:.6f}"])

    for cohort in CLASS_ORDER:
        rows = []
        for ri, result in enumerate(results):
            for fi, report in enumerate(result.fold_reports):
                curve = report.roc_curves.get(cohort)
                if curve is None:
                    continue
                for fpr, tpr in curve.points:
                    rows.append([ri, fi, f"{fpr:.6f}", f"{tpr:.6f}"])
        if rows:
            with (out / f"roc_{cohort.value.lower()}.csv").open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["repeat", "fold", "fpr", "tpr"])
                writer.writerows(rows)
