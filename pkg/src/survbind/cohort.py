"""Patient data model, interval binning, cohort I/O, and a synthetic generator.

A cohort is a set of patients, each carrying variable-length embedding sets
for up to four modalities. WSI and the pathology report are always present;
radiology and other clinical notes may be missing. Survival labels are a
positive time in months plus an event flag (False = right-censored), and a
discrete interval label assigned by :func:`bin_intervals`.

The synthetic generator stands in for clinical data: a scalar latent risk
drives both the event time (Weibull, higher risk = shorter survival) and a
rank-one signal planted in every modality's instance embeddings, with an
independent exponential censoring time calibrated to a target censor rate.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import Rng


class ModalityKind(Enum):
    WSI = "WSI"
    PATH_REPORT = "PathReport"
    RADIOLOGY = "Radiology"
    CLINICAL_NOTES = "ClinicalNotes"

    @property
    def dim(self) -> int:
        return MODALITY_DIMS[self]


MODALITY_DIMS = {
    ModalityKind.WSI: 512,
    ModalityKind.PATH_REPORT: 512,
    ModalityKind.RADIOLOGY: 512,
    ModalityKind.CLINICAL_NOTES: 1024,
}

MANDATORY = (ModalityKind.WSI, ModalityKind.PATH_REPORT)
OPTIONAL = (ModalityKind.RADIOLOGY, ModalityKind.CLINICAL_NOTES)

# Dataset-1-like presence: 180/367 radiology, 303/367 clinical notes
DEFAULT_MISSING_PROB = {
    ModalityKind.RADIOLOGY: 1.0 - 180.0 / 367.0,
    ModalityKind.CLINICAL_NOTES: 1.0 - 303.0 / 367.0,
}


@dataclass(eq=False)
class FeatureSet:
    """One patient's instance-embedding matrix for one modality (N x D)."""

    modality: ModalityKind
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.modality.value}: features must be a nonempty N x D matrix")
        if self.features.shape[1] != self.modality.dim:
            raise ValueError(
                f"{self.modality.value}: expected dim {self.modality.dim}, got {self.features.shape[1]}"
            )
        if not np.isfinite(self.features).all():
            raise ValueError(f"{self.modality.value}: non-finite feature values")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureSet)
            and self.modality is other.modality
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.features, other.features))
        )


@dataclass(eq=False)
class PatientRecord:
    id: str
    feature_sets: dict[ModalityKind, FeatureSet]
    time: float
    event: bool
    interval: int | None = None
    latent_risk: float | None = None  # generator ground truth, kept for diagnostics

    def __post_init__(self):
        for kind in MANDATORY:
            if kind not in self.feature_sets:
                raise ValueError(f"patient {self.id}: missing mandatory modality {kind.value}")
        if not self.time > 0:
            raise ValueError(f"patient {self.id}: time must be > 0")

    def has(self, kind: ModalityKind) -> bool:
        return kind in self.feature_sets

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PatientRecord)
            and self.id == other.id
            and self.time == other.time
            and self.event == other.event
            and self.interval == other.interval
            and self.latent_risk == other.latent_risk
            and set(self.feature_sets) == set(other.feature_sets)
            and all(self.feature_sets[k] == other.feature_sets[k] for k in self.feature_sets)
        )


@dataclass(eq=False)
class Cohort:
    patients: list[PatientRecord]
    interval_edges: list[float] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids")
        if any(a >= b for a, b in zip(self.interval_edges, self.interval_edges[1:])):
            raise ValueError("interval edges must be strictly increasing")

    def __len__(self) -> int:
        return len(self.patients)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Cohort)
            and self.interval_edges == other.interval_edges
            and len(self.patients) == len(other.patients)
            and all(a == b for a, b in zip(self.patients, other.patients))
        )

    def subset(self, ids: set[str]) -> "Cohort":
        return Cohort([p for p in self.patients if p.id in ids], list(self.interval_edges))


# ---------------------------------------------------------------------------
# discrete interval binning
# ---------------------------------------------------------------------------


def compute_interval_edges(uncensored_times, k: int) -> list[float]:
    """K-1 cut points: lower nearest-rank (j/k)-quantiles of uncensored times."""
    if k < 2:
        raise ValueError("k must be >= 2")
    times = sorted(float(t) for t in uncensored_times)
    if len(times) < k:
        raise ValueError("insufficient events")
    n = len(times)
    # lower nearest-rank: smallest order statistic covering fraction j/k
    edges = [times[math.ceil(j * n / k) - 1] for j in range(1, k)]
    # duplicate cut values, or a top cut swallowing the maximum, leave empty bins
    if any(a >= b for a, b in zip(edges, edges[1:])) or edges[-1] >= times[-1]:
        raise ValueError("insufficient events")
    return edges


def interval_for(time: float, edges: list[float]) -> int:
    """Interval index containing ``time``; ties at an edge go to the lower interval."""
    return bisect.bisect_left(edges, time)


def assign_intervals(cohort: Cohort, edges: list[float]) -> Cohort:
    cohort.interval_edges = list(edges)
    for p in cohort.patients:
        p.interval = interval_for(p.time, edges)
    return cohort


def bin_intervals(cohort: Cohort, k: int) -> Cohort:
    """Fit interval edges on uncensored times and assign every patient an interval.

    Censored patients are binned by their censor time on the same grid; the
    last interval is unbounded above.
    """
    edges = compute_interval_edges([p.time for p in cohort.patients if p.event], k)
    return assign_intervals(cohort, edges)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    n_patients: int
    missing_prob: dict[ModalityKind, float] = field(default_factory=lambda: dict(DEFAULT_MISSING_PROB))
    censor_rate: float = 0.5
    instances_min: int = 4
    instances_max: int = 12
    scale: float = 36.0  # baseline survival scale, months
    signal: float = 1.0
    weibull_shape: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        for kind, prob in self.missing_prob.items():
            if kind not in OPTIONAL:
                raise ValueError(f"missing_prob only applies to optional modalities, got {kind.value}")
            if not 0.0 <= prob <= 1.0:
                raise ValueError("missing_prob entries must be in [0, 1]")
        if not 0.0 < self.censor_rate < 1.0:
            raise ValueError("censor_rate must be in (0, 1)")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ValueError("need 1 <= instances_min <= instances_max")
        if self.scale <= 0 or self.weibull_shape <= 0:
            raise ValueError("scale and weibull_shape must be positive")


def _calibrate_censor_mean(event_times: np.ndarray, censor_rate: float) -> float:
    # mean censored fraction under C ~ Exp(mean m), given the realized event times,
    # is mean_i(1 - exp(-T_i / m)): monotone decreasing in m, so bisect in log space
    lo, hi = 1e-9, 1e12

    def frac(m: float) -> float:
        return float(np.mean(1.0 - np.exp(-event_times / m)))

    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if frac(mid) > censor_rate:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def generate_synthetic(cfg: GenConfig) -> Cohort:
    """Draw a synthetic multi-modal censored cohort; deterministic given the seed.

    Per patient: latent risk u ~ N(0,1); event time Weibull with scale
    ``scale * exp(-signal * u)``; censoring time exponential, calibrated so the
    expected censored fraction matches ``censor_rate``. Each present modality
    carries ``u`` times a fixed random direction plus unit Gaussian noise in
    every instance row.
    """
    rng = Rng(cfg.seed)
    dir_rng = rng.substream(0)
    directions = {kind: dir_rng.standard_normal(kind.dim) for kind in ModalityKind}

    n = cfg.n_patients
    latent = np.empty(n)
    event_time = np.empty(n)
    censor_quantile = np.empty(n)
    drafts = []
    for i in range(n):
        sub = rng.substream(1, i)
        u = float(sub.standard_normal())
        t_event = cfg.scale * math.exp(-cfg.signal * u) * float(sub.weibull(cfg.weibull_shape))
        u_cens = float(sub.random())
        present = list(MANDATORY)
        for kind in OPTIONAL:
            if sub.random() >= cfg.missing_prob.get(kind, 0.0):
                present.append(kind)
        feature_sets = {}
        for kind in present:
            count = int(sub.integers(cfg.instances_min, cfg.instances_max + 1))
            rows = directions[kind] * u + sub.standard_normal((count, kind.dim))
            feature_sets[kind] = FeatureSet(kind, rows)
        latent[i] = u
        event_time[i] = max(t_event, 1e-9)
        censor_quantile[i] = u_cens
        drafts.append(feature_sets)

    censor_mean = _calibrate_censor_mean(event_time, cfg.censor_rate)
    censor_time = np.maximum(-censor_mean * np.log1p(-censor_quantile), 1e-9)

    patients = []
    for i in range(n):
        observed = min(event_time[i], censor_time[i])
        patients.append(
            PatientRecord(
                id=f"p{i:04d}",
                feature_sets=drafts[i],
                time=float(observed),
                event=bool(event_time[i] <= censor_time[i]),
                latent_risk=float(latent[i]),
            )
        )
    return Cohort(patients)


# ---------------------------------------------------------------------------
# JSON Lines persistence
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_cohort(cohort: Cohort, path) -> None:
    """Write one header line plus one JSON record per patient (full float precision)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "interval_edges": cohort.interval_edges}) + "\n")
        for p in cohort.patients:
            record = {
                "id": p.id,
                "time": p.time,
                "event": p.event,
                "interval": p.interval,
                "latent_risk": p.latent_risk,
                "modalities": {
                    fs.modality.value: {
                        "n": fs.features.shape[0],
                        "d": fs.features.shape[1],
                        "data": fs.features.reshape(-1).tolist(),
                    }
                    for fs in (p.feature_sets[k] for k in ModalityKind if k in p.feature_sets)
                },
            }
            fh.write(json.dumps(record) + "\n")


def load_cohort(path) -> Cohort:
    path = Path(path)
    kinds_by_value = {k.value: k for k in ModalityKind}
    patients: list[PatientRecord] = []
    edges: list[float] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if lineno == 1:
                if obj.get("format_version") != FORMAT_VERSION:
                    raise ValueError(f"line 1: unsupported format_version {obj.get('format_version')!r}")
                edges = [float(e) for e in obj["interval_edges"]]
                continue
            try:
                pid = obj["id"]
                feature_sets = {}
                for kind_name, block in obj["modalities"].items():
                    kind = kinds_by_value.get(kind_name)
                    if kind is None:
                        raise ValueError(f"line {lineno}: unknown modality {kind_name!r}")
                    n, d = int(block["n"]), int(block["d"])
                    if d != kind.dim:
                        raise ValueError(f"dim mismatch patient {pid}: {kind_name} width {d}")
                    data = np.asarray(block["data"], dtype=np.float64)
                    if data.size != n * d:
                        raise ValueError(f"line {lineno}: patient {pid} {kind_name} expects {n * d} values")
                    feature_sets[kind] = FeatureSet(kind, data.reshape(n, d))
                patients.append(
                    PatientRecord(
                        id=pid,
                        feature_sets=feature_sets,
                        time=float(obj["time"]),
                        event=bool(obj["event"]),
                        interval=obj.get("interval"),
                        latent_risk=obj.get("latent_risk"),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"line {lineno}: missing field {exc.args[0]!r}") from exc
    return Cohort(patients, edges)
