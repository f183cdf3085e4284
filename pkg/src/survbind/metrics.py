"""Survival evaluation: concordance, Brier score, Kaplan-Meier, logrank, stratification.

Every metric here has a brute-force/direct-definition oracle in the test suite;
the implementations favor clarity over asymptotics (cohorts are hundreds of
patients, not millions).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SurvivalOutcome:
    """One evaluated patient: observed time, event flag, scalar risk, and
    optionally the predicted per-interval survival curve plus interval label."""

    time: float
    event: bool
    risk: float
    survival: np.ndarray | None = None
    interval: int | None = None
    patient_id: str | None = None

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError("time must be > 0")
        if self.survival is not None:
            self.survival = np.asarray(self.survival, dtype=np.float64).reshape(-1)


def concordance_index(outcomes: list[SurvivalOutcome]) -> float:
    """Fraction of comparable pairs ranked correctly by risk (ties credit 0.5).

    (a, b) is comparable iff t_a < t_b and a had the event; concordant iff
    risk_a > risk_b.
    """
    t = np.array([o.time for o in outcomes])
    e = np.array([o.event for o in outcomes], dtype=bool)
    r = np.array([o.risk for o in outcomes])
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise ValueError("no comparable pairs")
    credit = np.where(r[:, None] > r[None, :], 1.0, np.where(r[:, None] == r[None, :], 0.5, 0.0))
    return float((credit * comparable).sum() / n_comp)


def brier_score(outcomes: list[SurvivalOutcome], j_star: int | None = None) -> float:
    """Mean squared error between interval survival status and predicted S_{j*}.

    Status at interval j* is known for patients with an event at interval
    <= j* (status 0) and for patients followed beyond j* (status 1); patients
    censored at or before j* are excluded. With ``j_star=None`` the score is
    averaged over every interval that has at least one determinable patient.
    """
    for o in outcomes:
        if o.survival is None or o.interval is None:
            raise ValueError("brier_score requires survival vectors and interval labels")
    k = outcomes[0].survival.size if outcomes else 0
    targets = range(k) if j_star is None else [j_star]
    scores = []
    for j in targets:
        if not 0 <= j < k:
            raise ValueError(f"invalid interval {j}")
        errs = []
        for o in outcomes:
            if o.interval > j:
                y = 1.0
            elif o.event:
                y = 0.0
            else:
                continue  # censored at or before j*: status unknown
            errs.append((y - float(o.survival[j])) ** 2)
        if errs:
            scores.append(sum(errs) / len(errs))
        elif j_star is not None:
            raise ValueError("no determinable patients")
    if not scores:
        raise ValueError("no determinable patients")
    return float(sum(scores) / len(scores))


@dataclass
class KMPoint:
    time: float
    survival: float
    at_risk: int
    events: int


@dataclass
class KMCurve:
    points: list[KMPoint]

    def survival_at(self, time: float) -> float:
        s = 1.0
        for pt in self.points:
            if pt.time <= time:
                s = pt.survival
        return s


def kaplan_meier(outcomes: list[SurvivalOutcome]) -> KMCurve:
    """Product-limit estimate; censored times only shrink the at-risk set."""
    if not outcomes:
        raise ValueError("empty outcome list")
    times = np.array([o.time for o in outcomes])
    events = np.array([o.event for o in outcomes], dtype=bool)
    points = []
    s = 1.0
    for tau in sorted(set(times[events])):
        at_risk = int((times >= tau).sum())
        d = int(((times == tau) & events).sum())
        s *= 1.0 - d / at_risk
        points.append(KMPoint(time=float(tau), survival=s, at_risk=at_risk, events=d))
    return KMCurve(points)


def logrank_test(group_a: list[SurvivalOutcome], group_b: list[SurvivalOutcome]) -> tuple[float, float]:
    """One-degree-of-freedom logrank statistic and its chi-square(1) p-value."""
    if not group_a or not group_b:
        raise ValueError("both groups must be nonempty")
    ta = np.array([o.time for o in group_a])
    ea = np.array([o.event for o in group_a], dtype=bool)
    tb = np.array([o.time for o in group_b])
    eb = np.array([o.event for o in group_b], dtype=bool)
    if not (ea.any() or eb.any()):
        raise ValueError("need at least one event")
    observed_minus_expected = 0.0
    variance = 0.0
    for tau in sorted(set(np.concatenate([ta[ea], tb[eb]]))):
        n1 = int((ta >= tau).sum())
        n2 = int((tb >= tau).sum())
        n = n1 + n2
        d1 = int(((ta == tau) & ea).sum())
        d2 = int(((tb == tau) & eb).sum())
        d = d1 + d2
        if n == 0 or d == 0:
            continue
        observed_minus_expected += d1 - d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        return 0.0, 1.0
    chi2 = observed_minus_expected**2 / variance
    return float(chi2), chi2_sf(chi2)


def chi2_sf(chi2: float) -> float:
    """Upper tail of chi-square with 1 dof: erfc(sqrt(chi2 / 2))."""
    if chi2 < 0:
        raise ValueError("chi2 must be nonnegative")
    return float(math.erfc(math.sqrt(chi2 / 2.0)))


def median_split(outcomes: list[SurvivalOutcome]) -> tuple[list[SurvivalOutcome], list[SurvivalOutcome]]:
    """(high-risk, low-risk) split at the median risk; ties go low."""
    if len(outcomes) < 2:
        raise ValueError("need at least 2 patients to split")
    risks = sorted(o.risk for o in outcomes)
    n = len(risks)
    median = risks[n // 2] if n % 2 else 0.5 * (risks[n // 2 - 1] + risks[n // 2])
    high = [o for o in outcomes if o.risk > median]
    low = [o for o in outcomes if o.risk <= median]
    return high, low


@dataclass
class MetricsBundle:
    ci: float
    brier: float
    logrank_chi2: float
    logrank_p: float
    n: int
    n_events: int

    def to_dict(self) -> dict:
        return {
            "ci": self.ci,
            "brier": self.brier,
            "logrank_chi2": self.logrank_chi2,
            "logrank_p": self.logrank_p,
            "n": self.n,
            "n_events": self.n_events,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def compute_bundle(outcomes: list[SurvivalOutcome]) -> MetricsBundle:
    """CI + interval-averaged Brier + median-split logrank in one record."""
    high, low = median_split(outcomes)
    if high and low:
        chi2, p = logrank_test(high, low)
    else:
        chi2, p = 0.0, 1.0  # degenerate split (all risks tied)
    return MetricsBundle(
        ci=concordance_index(outcomes),
        brier=brier_score(outcomes),
        logrank_chi2=chi2,
        logrank_p=p,
        n=len(outcomes),
        n_events=sum(1 for o in outcomes if o.event),
    )


def write_km_csv(path, curves: list[tuple[str, KMCurve]]) -> None:
    """Export step curves as rows of (group, time, survival, at_risk, events)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "time", "survival", "at_risk", "events"])
        for group, curve in curves:
            for pt in curve.points:
                writer.writerow([group, repr(pt.time), repr(pt.survival), pt.at_risk, pt.events])
