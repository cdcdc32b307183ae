"""Per-example Gaussian-filter bias: assign a binary attribute, blur accordingly.

A filter-bias spec names two filter strengths: ``sigma_pos`` is applied to
records with attribute 1 and ``sigma_neg`` to the rest. The attribute is
assigned at patient granularity (all of a patient's images share it) so
patient-level evaluation stays well defined. The assignment either holds the
positive rate with no label correlation, or steers the phi correlation with a
chosen task to a target while keeping the positive rate fixed.

Named presets carry the canonical sigma pairs for the difficult, moderate and
easy variants; ``sigma_scale`` rescales both sigmas together for small-image
setups where the raw pairs do not separate the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blur import gaussian_filter
from .core import MISSING, CorrelationSpec, Manifest, compute_phi

__all__ = ["FilterBiasSpec", "FILTER_PRESETS", "inject_filter_bias", "feasible_phi_interval"]

FILTER_PRESETS = {
    "difficult": (0.3, 0.4),
    "moderate": (0.1, 0.2),
    "easy": (0.4, 0.5),
}


@dataclass(frozen=True)
class FilterBiasSpec:
    """Sigmas for the two attribute groups plus the attribute positive rate."""

    sigma_pos: float
    sigma_neg: float
    positive_rate: float = 0.25
    sigma_scale: float = 1.0
    attribute_name: str = "filter"

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_neg < 0:
            raise ValueError("sigmas must be >= 0")
        if not 0 < self.positive_rate < 1:
            raise ValueError("positive_rate must be in (0, 1)")
        if self.sigma_scale <= 0:
            raise ValueError("sigma_scale must be > 0")

    @classmethod
    def from_preset(cls, name: str, positive_rate: float = 0.25, sigma_scale: float = 1.0,
                    attribute_name: str = "filter") -> "FilterBiasSpec":
        if name not in FILTER_PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(FILTER_PRESETS)}")
        s1, s2 = FILTER_PRESETS[name]
        return cls(sigma_pos=s1, sigma_neg=s2, positive_rate=positive_rate,
                   sigma_scale=sigma_scale, attribute_name=attribute_name)

    @property
    def effective_sigmas(self):
        return self.sigma_pos * self.sigma_scale, self.sigma_neg * self.sigma_scale


def feasible_phi_interval(n1: int, n0: int, nb1: int):
    """Achievable [phi_min, phi_max] given label counts and attribute-positive count."""
    n = n1 + n0
    denom = math.sqrt(float(n1) * n0 * nb1 * (n - nb1))
    if denom == 0:
        raise ValueError("degenerate marginals: phi undefined")
    k_lo = max(0, nb1 - n0)
    k_hi = min(n1, nb1)
    phi_of = lambda k: (k * n - n1 * nb1) / denom  # noqa: E731
    return phi_of(k_lo), phi_of(k_hi)


def inject_filter_bias(
    manifest: Manifest,
    spec: FilterBiasSpec,
    correlation: CorrelationSpec | None,
    seed: int,
) -> Manifest:
    """Assign the filter attribute and blur each image with its group's sigma.

    With ``correlation`` given, phi(task, attribute) is steered to the target
    while the positive rate stays at ``spec.positive_rate``; without it the
    attribute is independent of every declared task (|phi| <= 0.05, enforced
    by reshuffling). Labels, patient grouping and record count never change.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    if correlation is not None:
        if correlation.task not in manifest.declared_tasks:
            raise ValueError(f"correlation task {correlation.task!r} not declared in manifest")
        if correlation.attribute != spec.attribute_name:
            raise ValueError(
                f"correlation attribute {correlation.attribute!r} != spec attribute "
                f"{spec.attribute_name!r}"
            )
        assignment = _steered_assignment(manifest, spec, correlation, seed)
    else:
        assignment = _independent_assignment(manifest, spec, seed)

    s_pos, s_neg = spec.effective_sigmas
    new_records = []
    for rec in manifest.records:
        b = assignment[rec.patient_id]
        sigma = s_pos if b == 1 else s_neg
        new = rec.copy(pixels=gaussian_filter(rec.pixels, sigma))
        new.attributes[spec.attribute_name] = b
        new_records.append(new)
    attrs = list(manifest.declared_attributes)
    if spec.attribute_name not in attrs:
        attrs.append(spec.attribute_name)
    out = Manifest(new_records, list(manifest.declared_tasks), attrs)
    out.validate()
    return out


def _patient_compositions(manifest: Manifest, task: str | None):
    """Per patient: (n records with y=1, with y=0, with y missing)."""
    comp = {}
    for rec in manifest.records:
        c = comp.setdefault(rec.patient_id, [0, 0, 0])
        if task is None:
            c[2] += 1
            continue
        y = rec.labels.get(task, MISSING)
        if y is MISSING:
            c[2] += 1
        elif y == 1:
            c[0] += 1
        else:
            c[1] += 1
    return comp


def _steered_assignment(manifest, spec, correlation, seed):
    comp = _patient_compositions(manifest, correlation.task)
    m1 = sum(c[0] for c in comp.values())
    m0 = sum(c[1] for c in comp.values())
    n = m1 + m0
    if m1 == 0 or m0 == 0:
        raise ValueError(f"task {correlation.task!r} single-class; phi undefined")
    nb1 = int(round(spec.positive_rate * n))
    nb1 = min(max(nb1, 1), n - 1)
    denom = math.sqrt(float(m1) * m0 * nb1 * (n - nb1))
    k_lo, k_hi = max(0, nb1 - m0), min(m1, nb1)
    phi_of = lambda k: (k * n - m1 * nb1) / denom  # noqa: E731
    k_star = int(round((correlation.target_phi * denom + m1 * nb1) / n))
    k_star = min(max(k_star, k_lo), k_hi)
    if abs(phi_of(k_star) - correlation.target_phi) > correlation.tolerance:
        lo, hi = phi_of(k_lo), phi_of(k_hi)
        raise ValueError(
            f"target phi {correlation.target_phi} infeasible at positive rate "
            f"{spec.positive_rate}: feasible interval is [{lo:.3f}, {hi:.3f}]"
        )

    targets = (k_star, nb1 - k_star)  # records with (y=1, b=1) and (y=0, b=1)
    pids = sorted(comp)
    best = None
    for attempt in range(60):
        rng = np.random.default_rng([seed, attempt])
        order = rng.permutation(len(pids))
        r1, r0 = targets
        assignment = {}
        for i in order:
            pid = pids[i]
            c1, c0, _ = comp[pid]
            if c1 <= r1 and c0 <= r0 and (c1 or c0 or rng.uniform() < spec.positive_rate):
                assignment[pid] = 1
                r1 -= c1
                r0 -= c0
            else:
                assignment[pid] = 0
        a11 = sum(comp[p][0] for p in pids if assignment[p] == 1)
        a01 = sum(comp[p][1] for p in pids if assignment[p] == 1)
        achieved = ((a11 * n - m1 * (a11 + a01)) / math.sqrt(float(m1) * m0 * (a11 + a01) * (n - a11 - a01))
                    if 0 < a11 + a01 < n else float("nan"))
        err = abs(achieved - correlation.target_phi) if np.isfinite(achieved) else float("inf")
        if best is None or err < best[0]:
            best = (err, assignment)
        if err <= correlation.tolerance:
            return assignment
    raise ValueError(
        f"could not reach phi {correlation.target_phi} within tolerance "
        f"{correlation.tolerance} at patient granularity (best error {best[0]:.4f})"
    )


def _independent_assignment(manifest, spec, seed, max_abs_phi: float = 0.05):
    comp = _patient_compositions(manifest, None)
    pids = sorted(comp)
    n = len(manifest)
    nb1 = int(round(spec.positive_rate * n))
    nb1 = min(max(nb1, 1), n - 1)
    tasks = list(manifest.declared_tasks)
    best = None
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        order = rng.permutation(len(pids))
        remaining = nb1
        assignment = {}
        for i in order:
            pid = pids[i]
            total = comp[pid][2]
            if total <= remaining:
                assignment[pid] = 1
                remaining -= total
            else:
                assignment[pid] = 0
        worst = _worst_abs_phi(manifest, assignment, tasks)
        if best is None or worst < best[0]:
            best = (worst, assignment)
        if worst <= max_abs_phi:
            return assignment
    raise ValueError(
        f"could not draw an attribute assignment with |phi| <= {max_abs_phi} "
        f"for all tasks (best {best[0]:.4f}); dataset too small or too skewed"
    )


def _worst_abs_phi(manifest, assignment, tasks):
    worst = 0.0
    for task in tasks:
        n11 = n10 = n01 = n00 = 0
        for rec in manifest.records:
            y = rec.labels.get(task, MISSING)
            if y is MISSING:
                continue
            b = assignment[rec.patient_id]
            if y == 1:
                n11, n10 = n11 + b, n10 + (1 - b)
            else:
                n01, n00 = n01 + b, n00 + (1 - b)
        denom = math.sqrt(float(n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00))
        if denom == 0:
            continue
        worst = max(worst, abs((n11 * n00 - n10 * n01) / denom))
    return worst
