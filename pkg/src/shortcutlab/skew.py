"""Resampling to target label-attribute correlations at matched size and prevalence.

``plan_cells`` searches the integer lattice of 2x2 contingency tables for the
largest table within the size budget whose prevalence and phi hit their
targets; ``execute_plan`` realizes a plan by sampling whole patients.
``make_skew_pair`` builds the matched skewed (phi = 1) / unskewed (phi ~ 0)
training and validation sets plus an uncorrelated test set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import MISSING, Manifest, compute_phi, contingency_counts, partition_by_patient, phi_from_cells

__all__ = [
    "ResamplePlan",
    "InfeasiblePlanError",
    "plan_cells",
    "execute_plan",
    "SkewPair",
    "make_skew_pair",
    "source_phi_grid",
]


class InfeasiblePlanError(ValueError):
    def __init__(self, message, phi_interval=None):
        super().__init__(message)
        self.phi_interval = phi_interval


@dataclass
class ResamplePlan:
    """Integer cell targets (n11, n10, n01, n00) plus the stats they imply."""

    cell_targets: tuple
    achieved_phi: float
    achieved_prevalence: float
    dropped_count: int
    task: str = ""
    attribute: str = ""
    tolerance: float = 0.05

    def __post_init__(self):
        if any(c < 0 for c in self.cell_targets):
            raise ValueError("cells must be >= 0")
        recomputed = phi_from_cells(*self.cell_targets)
        if abs(recomputed - self.achieved_phi) > 1e-12:
            raise ValueError("achieved_phi does not match cell_targets")

    @property
    def total(self) -> int:
        return int(sum(self.cell_targets))

    def to_dict(self) -> dict:
        return {
            "cell_targets": list(self.cell_targets),
            "achieved_phi": self.achieved_phi,
            "achieved_prevalence": self.achieved_prevalence,
            "dropped_count": self.dropped_count,
            "task": self.task,
            "attribute": self.attribute,
            "tolerance": self.tolerance,
        }


def plan_cells(
    available,
    target_phi: float,
    size_budget: int,
    prevalence_target: float,
    tolerance: float = 0.05,
    prevalence_tolerance: float = 0.03,
    task: str = "",
    attribute: str = "",
) -> ResamplePlan:
    """Largest integer table within budget meeting phi and prevalence targets.

    ``available`` is (a11, a10, a01, a00) from the eligible records. Ties
    break toward the smaller |phi error|, then the smaller prevalence error,
    then the attribute rate closest to the availability's own marginal, then
    lexicographically smaller cells. Raises ``InfeasiblePlanError`` carrying
    the feasible phi interval.
    """
    a11, a10, a01, a00 = (int(a) for a in available)
    if min(a11, a10, a01, a00) < 0:
        raise ValueError("availability must be non-negative")
    n_avail = a11 + a10 + a01 + a00
    avail_rate = (a11 + a01) / n_avail if n_avail else 0.5
    t_hi = min(size_budget, n_avail)
    seen_lo, seen_hi = math.inf, -math.inf

    for total in range(t_hi, 3, -1):
        p_lo = max(1, math.ceil((prevalence_target - prevalence_tolerance) * total))
        p_hi = min(total - 1, math.floor((prevalence_target + prevalence_tolerance) * total))
        best_here = None
        for pos in range(p_lo, p_hi + 1):
            neg = total - pos
            l1, h1 = max(0, pos - a10), min(pos, a11)
            l0, h0 = max(0, neg - a00), min(neg, a01)
            if l1 > h1 or l0 > h0:
                continue
            # phi is increasing in n11 (fixed n01) and decreasing in n01
            # (fixed n11), so the corners bound the achievable interval
            lo_phi = _phi_or_none(l1, pos - l1, h0, neg - h0)
            hi_phi = _phi_or_none(h1, pos - h1, l0, neg - l0)
            if lo_phi is not None:
                seen_lo = min(seen_lo, lo_phi)
            if hi_phi is not None:
                seen_hi = max(seen_hi, hi_phi)
            if lo_phi is not None and hi_phi is not None:
                if hi_phi < target_phi - tolerance or lo_phi > target_phi + tolerance:
                    continue
            n11 = np.arange(l1, h1 + 1)[:, None]
            n01 = np.arange(l0, h0 + 1)[None, :]
            q = n11 + n01
            valid = (q >= 1) & (q <= total - 1)
            with np.errstate(invalid="ignore", divide="ignore"):
                phi = (n11 * (neg - n01) - (pos - n11) * n01) / np.sqrt(
                    float(pos) * neg * q * (total - q)
                )
            phi = np.where(valid, phi, np.nan)
            finite = np.isfinite(phi)
            if finite.any():
                seen_lo = min(seen_lo, float(np.nanmin(phi)))
                seen_hi = max(seen_hi, float(np.nanmax(phi)))
            err = np.abs(phi - target_phi)
            ok = finite & (err <= tolerance)
            if not ok.any():
                continue
            prev_err = abs(pos / total - prevalence_target)
            idx = np.argwhere(ok)
            for i, j in idx:
                cells = (int(n11[i, 0]), pos - int(n11[i, 0]), int(n01[0, j]), neg - int(n01[0, j]))
                rate_err = abs((cells[0] + cells[2]) / total - avail_rate)
                cand = (float(err[i, j]), prev_err, rate_err, cells)
                if best_here is None or cand < best_here:
                    best_here = cand
        if best_here is not None:
            cells = best_here[-1]
            return ResamplePlan(
                cell_targets=cells,
                achieved_phi=phi_from_cells(*cells),
                achieved_prevalence=(cells[0] + cells[1]) / sum(cells),
                dropped_count=n_avail - sum(cells),
                task=task,
                attribute=attribute,
                tolerance=tolerance,
            )

    interval = None if not math.isfinite(seen_lo) else (seen_lo, seen_hi)
    detail = (
        f"feasible phi interval is [{seen_lo:.3f}, {seen_hi:.3f}]"
        if interval
        else "no table satisfies the size and prevalence constraints"
    )
    raise InfeasiblePlanError(
        f"no integer table reaches phi {target_phi} +- {tolerance} at prevalence "
        f"{prevalence_target} +- {prevalence_tolerance} within budget {size_budget}: {detail}",
        phi_interval=interval,
    )


def _phi_or_none(n11, n10, n01, n00):
    try:
        return phi_from_cells(n11, n10, n01, n00)
    except ValueError:
        return None


def execute_plan(manifest: Manifest, plan: ResamplePlan, seed: int):
    """Sample records to the plan's cells, whole patients at a time.

    Only records with both the task and attribute present are eligible or
    returned. Greedy patient packing; if patient granularity leaves the
    achieved phi more than ``plan.tolerance`` from the plan's, raises.
    """
    task, attribute = plan.task, plan.attribute
    if not task or not attribute:
        raise ValueError("plan must carry task and attribute names")
    cells_of = {}
    comp = {}
    eligible = []
    for rec in manifest.records:
        y = rec.labels.get(task, MISSING)
        b = rec.attributes.get(attribute, MISSING)
        if y is MISSING or b is MISSING:
            continue
        cell = {(1, 1): 0, (1, 0): 1, (0, 1): 2, (0, 0): 3}[(y, b)]
        cells_of[rec.image_id] = cell
        vec = comp.setdefault(rec.patient_id, [0, 0, 0, 0])
        vec[cell] += 1
        eligible.append(rec)
    for cell, avail in enumerate(np.sum(list(comp.values()), axis=0) if comp else [0, 0, 0, 0]):
        if plan.cell_targets[cell] > avail:
            raise InfeasiblePlanError(
                f"plan needs {plan.cell_targets[cell]} records in cell {cell}, only {avail} available"
            )

    pids = sorted(comp)
    best = None
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        order = rng.permutation(len(pids))
        remaining = list(plan.cell_targets)
        chosen = set()
        for i in order:
            pid = pids[i]
            vec = comp[pid]
            if all(vec[c] <= remaining[c] for c in range(4)):
                chosen.add(pid)
                for c in range(4):
                    remaining[c] -= vec[c]
        achieved = tuple(t - r for t, r in zip(plan.cell_targets, remaining))
        try:
            achieved_phi = phi_from_cells(*achieved)
            deviation = abs(achieved_phi - plan.achieved_phi)
        except ValueError:
            deviation = float("inf")
        if best is None or deviation < best[0]:
            best = (deviation, chosen)
        if deviation <= plan.tolerance:
            break
    deviation, chosen = best
    if deviation > plan.tolerance:
        raise InfeasiblePlanError(
            f"patient granularity leaves phi {deviation:.4f} from the plan "
            f"(tolerance {plan.tolerance})"
        )
    return [rec for rec in eligible if rec.patient_id in chosen]


# ---------------------------------------------------------------------------
# skewed / unskewed pairs


@dataclass
class SkewPair:
    skewed_train: list
    skewed_val: list
    unskewed_train: list
    unskewed_val: list
    test: list
    plans: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def make_skew_pair(
    manifest: Manifest,
    task: str,
    attribute: str,
    prevalence: float,
    budget: int,
    seed: int,
    fractions=(0.7, 0.15, 0.15),
    tolerance: float = 0.05,
    prevalence_tolerance: float = 0.03,
) -> SkewPair:
    """Matched phi=1 and phi~0 train/validation sets plus an unskewed test set.

    Training and validation carry the same skew; the two training sets end up
    within 10% of each other in size; no test patient appears in any training
    or validation set.
    """
    split = partition_by_patient(manifest, fractions, seed)
    pools = {
        "train": manifest.subset(split.train),
        "val": manifest.subset(split.validation),
        "test": manifest.subset(split.test),
    }
    budgets = {
        "train": budget,
        "val": max(4, int(round(budget * fractions[1] / fractions[0]))),
    }
    pair = SkewPair([], [], [], [], [])

    for pool_name in ("train", "val"):
        pool = pools[pool_name]
        avail = contingency_counts(pool.records, task, attribute)
        if budgets[pool_name] > sum(avail):
            pair.warnings.append(
                f"{pool_name}: budget {budgets[pool_name]} exceeds availability "
                f"{sum(avail)}; sizes capped"
            )
        skew_plan = plan_cells(
            avail, 1.0, budgets[pool_name], prevalence,
            tolerance=tolerance, prevalence_tolerance=prevalence_tolerance,
            task=task, attribute=attribute,
        )
        skewed = execute_plan(pool, skew_plan, seed=_salt(seed, pool_name, "skew"))
        unskew_budget = len(skewed)
        for _ in range(3):
            unskew_plan = plan_cells(
                avail, 0.0, unskew_budget, prevalence,
                tolerance=tolerance, prevalence_tolerance=prevalence_tolerance,
                task=task, attribute=attribute,
            )
            unskewed = execute_plan(pool, unskew_plan, seed=_salt(seed, pool_name, "unskew"))
            if len(unskewed) >= 0.9 * len(skewed):
                break
            skew_budget = len(unskewed)
            skew_plan = plan_cells(
                avail, 1.0, max(4, int(skew_budget * 1.1)), prevalence,
                tolerance=tolerance, prevalence_tolerance=prevalence_tolerance,
                task=task, attribute=attribute,
            )
            skewed = execute_plan(pool, skew_plan, seed=_salt(seed, pool_name, "skew"))
            unskew_budget = len(skewed)
        pair.plans[f"{pool_name}_skewed"] = skew_plan
        pair.plans[f"{pool_name}_unskewed"] = unskew_plan
        if pool_name == "train":
            pair.skewed_train, pair.unskewed_train = skewed, unskewed
        else:
            pair.skewed_val, pair.unskewed_val = skewed, unskewed

    test_pool = pools["test"]
    test_avail = contingency_counts(test_pool.records, task, attribute)
    try:
        test_plan = plan_cells(
            test_avail, 0.0, sum(test_avail), prevalence,
            tolerance=tolerance, prevalence_tolerance=0.10,
            task=task, attribute=attribute,
        )
        pair.test = execute_plan(test_pool, test_plan, seed=_salt(seed, "test", "unskew"))
        pair.plans["test"] = test_plan
    except InfeasiblePlanError:
        phi = _safe_phi(test_pool.records, task, attribute)
        if phi is not None and abs(phi) <= tolerance:
            pair.test = [r for r in test_pool.records
                         if r.labels.get(task) is not MISSING
                         and r.attributes.get(attribute) is not MISSING]
            pair.warnings.append("test: used full pool (already uncorrelated)")
        else:
            raise
    return pair


def _safe_phi(records, task, attribute):
    try:
        return compute_phi(records, task, attribute)
    except ValueError:
        return None


def _salt(seed: int, *parts) -> int:
    h = 0
    for p in parts:
        for ch in str(p):
            h = (h * 131 + ord(ch)) % (2**31)
    return int(np.random.SeedSequence([seed, h]).generate_state(1)[0])


def source_phi_grid():
    """The 11-point correlation grid from -1.0 to 1.0 in steps of 0.2."""
    return tuple(float(f"{-1.0 + 0.2 * i:.1f}") for i in range(11))
