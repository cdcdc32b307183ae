"""Evaluation: AUROC, patient-level aggregation, bootstrap CIs, paired tests.

The test-time unit is the patient: per-image probabilities are averaged over
a patient's images before scoring, and the bootstrap resamples whole patients
with replacement. The paired test draws shared patient resamples for two
models and reports the fraction of resamples where the first model's AUROC
does not exceed the second's.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .core import MISSING

__all__ = [
    "auroc",
    "PredictionSet",
    "aggregate_by_patient",
    "bootstrap_ci",
    "auroc_with_ci",
    "paired_test",
    "EvalReport",
    "shortcut_report",
    "write_results_table",
]


def auroc(scores, labels) -> float:
    """Tie-aware AUROC: P(score_pos > score_neg) + 0.5 * P(tie).

    Uses the Mann-Whitney rank formulation (exact, no trapezoid binning).
    Raises on single-class labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: labels contain a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PredictionSet:
    """Per-image probabilities plus the patient-level view used for scoring."""

    image_probs: dict
    patient_probs: dict
    patient_truth: dict
    patient_attr: dict = field(default_factory=dict)

    def patients(self) -> list:
        return sorted(self.patient_probs)

    def arrays(self, patient_ids=None):
        pids = self.patients() if patient_ids is None else list(patient_ids)
        scores = np.array([self.patient_probs[p] for p in pids])
        labels = np.array([self.patient_truth[p] for p in pids])
        return scores, labels

    def attr_arrays(self, patient_ids=None):
        pids = self.patients() if patient_ids is None else list(patient_ids)
        keep = [p for p in pids if self.patient_attr.get(p) is not None]
        scores = np.array([self.patient_probs[p] for p in keep])
        attrs = np.array([self.patient_attr[p] for p in keep])
        return scores, attrs

    def attr_view(self) -> "PredictionSet":
        """Same scores, but with the attribute as ground truth (where present)."""
        keep = {p for p in self.patient_probs if self.patient_attr.get(p) is not None}
        return PredictionSet(
            {},
            {p: self.patient_probs[p] for p in keep},
            {p: int(self.patient_attr[p]) for p in keep},
        )


def aggregate_by_patient(records, image_probs: dict, task: str, attribute: str | None = None) -> PredictionSet:
    """Average per-image probabilities within each patient.

    Patients whose task label is missing are excluded; conflicting labels
    within a patient are an error. The attribute (when given) is aggregated
    as the mean of present per-record values, rounded; all-missing -> None.
    """
    by_patient: dict = {}
    for rec in records:
        if rec.image_id not in image_probs:
            raise KeyError(f"no probability for image {rec.image_id!r}")
        by_patient.setdefault(rec.patient_id, []).append(rec)

    patient_probs, patient_truth, patient_attr = {}, {}, {}
    for pid, recs in by_patient.items():
        labels = {r.labels.get(task) for r in recs} - {MISSING}
        if not labels:
            continue
        if len(labels) > 1:
            raise ValueError(f"patient {pid!r} has conflicting labels for task {task!r}")
        patient_probs[pid] = float(np.mean([image_probs[r.image_id] for r in recs]))
        patient_truth[pid] = int(labels.pop())
        if attribute is not None:
            vals = [r.attributes.get(attribute) for r in recs]
            vals = [v for v in vals if v is not MISSING]
            patient_attr[pid] = int(round(float(np.mean(vals)))) if vals else None
    return PredictionSet(dict(image_probs), patient_probs, patient_truth, patient_attr)


# ---------------------------------------------------------------------------
# bootstrap


class BootstrapError(RuntimeError):
    pass


def _resample_ids(pids, rng):
    idx = rng.integers(0, len(pids), size=len(pids))
    return [pids[i] for i in idx]


def bootstrap_ci(pred: PredictionSet, metric, n: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile CI of a patient-level metric over ``n`` patient resamples.

    ``metric(scores, labels) -> float``. Resamples with a single class are
    redrawn up to 10 times, then skipped and counted; more than 10% skipped is
    an error.
    """
    pids = pred.patients()
    if not pids:
        raise ValueError("no patients to resample")
    values = []
    skipped = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        value = None
        for _ in range(10):
            sample = _resample_ids(pids, rng)
            scores, labels = pred.arrays(sample)
            if np.unique(labels).size < 2:
                continue
            value = metric(scores, labels)
            break
        if value is None:
            skipped += 1
        else:
            values.append(value)
    if skipped > 0.10 * n:
        raise BootstrapError(f"metric undefined on {skipped}/{n} resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def auroc_with_ci(pred: PredictionSet, n: int = 1000, level: float = 0.95, seed: int = 0, on_attribute: bool = False):
    """(point, lo, hi) for AUROC against the task label or the attribute."""
    view = pred.attr_view() if on_attribute else pred
    scores, labels = view.arrays()
    point = auroc(scores, labels)
    lo, hi = bootstrap_ci(view, auroc, n=n, level=level, seed=seed)
    return point, lo, hi


def paired_test(pred_a: PredictionSet, pred_b: PredictionSet, n: int = 1000, seed: int = 0) -> float:
    """Shared-resample test of "A beats B": fraction of AUROC_A - AUROC_B <= 0.

    Identical models yield p = 1.0 (every difference is zero and ties count
    against A). Requires both prediction sets to cover the same patients with
    the same ground truth.
    """
    pids = pred_a.patients()
    if pids != pred_b.patients():
        raise ValueError("prediction sets cover different patients")
    for p in pids:
        if pred_a.patient_truth[p] != pred_b.patient_truth[p]:
            raise ValueError(f"ground truth differs for patient {p!r}")
    diffs = []
    skipped = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        diff = None
        for _ in range(10):
            sample = _resample_ids(pids, rng)
            sa, la = pred_a.arrays(sample)
            sb, _ = pred_b.arrays(sample)
            if np.unique(la).size < 2:
                continue
            diff = auroc(sa, la) - auroc(sb, la)
            break
        if diff is None:
            skipped += 1
        else:
            diffs.append(diff)
    if skipped > 0.10 * n:
        raise BootstrapError(f"AUROC undefined on {skipped}/{n} shared resamples")
    diffs = np.asarray(diffs)
    return float(np.mean(diffs <= 0.0))


# ---------------------------------------------------------------------------
# shortcut-reliance report


@dataclass
class EvalReport:
    """AUROC against the task and against the attribute, with 95% CIs."""

    task: str
    attribute: str | None
    auroc_target: float
    ci_target: tuple
    auroc_attribute: float | None = None
    ci_attribute: tuple | None = None
    attribute_omitted_reason: str | None = None
    paired_tests: dict = field(default_factory=dict)
    n_bootstrap: int = 1000
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "attribute": self.attribute,
            "auroc_target": self.auroc_target,
            "ci_target": list(self.ci_target),
            "auroc_attribute": self.auroc_attribute,
            "ci_attribute": None if self.ci_attribute is None else list(self.ci_attribute),
            "attribute_omitted_reason": self.attribute_omitted_reason,
            "paired_tests": self.paired_tests,
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


MIN_ATTRIBUTE_POSITIVES = 10


def predictions_for(state, records, task: str, attribute: str | None = None) -> PredictionSet:
    """Run the model over records (eval mode) and aggregate by patient."""
    from . import model as M

    records = list(records)
    images = np.stack([r.pixels for r in records])
    probs = M.forward(state, images, [task])[task]
    image_probs = {r.image_id: float(p) for r, p in zip(records, probs)}
    return aggregate_by_patient(records, image_probs, task, attribute)


def shortcut_report(state, records, task: str, attribute: str, n_bootstrap: int = 1000, seed: int = 0) -> EvalReport:
    """Score a model on an unskewed test set: AUROC(y, task) and AUROC(y, attribute).

    The attribute AUROC answers "how much does the model rely on the
    shortcut"; it is omitted (with a reason) when fewer than 10 test patients
    are attribute-positive.
    """
    pred = predictions_for(state, records, task, attribute)
    point, lo, hi = auroc_with_ci(pred, n=n_bootstrap, seed=seed)
    report = EvalReport(
        task=task,
        attribute=attribute,
        auroc_target=point,
        ci_target=(lo, hi),
        n_bootstrap=n_bootstrap,
        seed=seed,
    )
    scores, attrs = pred.attr_arrays()
    n_pos = int((attrs == 1).sum()) if len(attrs) else 0
    n_neg = int((attrs == 0).sum()) if len(attrs) else 0
    if n_pos < MIN_ATTRIBUTE_POSITIVES or n_neg == 0:
        report.attribute_omitted_reason = (
            f"attribute {attribute!r} too infrequent in the test set "
            f"({n_pos} positives) to calculate AUROC"
        )
    else:
        pa, la, ha = auroc_with_ci(pred, n=n_bootstrap, seed=seed + 1, on_attribute=True)
        report.auroc_attribute = pa
        report.ci_attribute = (la, ha)
    try:
        from .core import compute_phi

        report.extras["test_phi"] = compute_phi(records, task, attribute)
    except ValueError:
        report.extras["test_phi"] = None
    return report


def write_results_table(rows, path) -> None:
    """CSV in the scheme x condition x metric layout with CI columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [
        "scheme", "condition", "seed",
        "auroc_target", "ci_target_lo", "ci_target_hi",
        "auroc_attribute", "ci_attribute_lo", "ci_attribute_hi",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
