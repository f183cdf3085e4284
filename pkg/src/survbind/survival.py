"""Discrete-time hazard head and the censoring-aware survival losses.

The head regresses a per-interval death hazard h_j in (0,1); survival is the
running product S_j = prod_{k<=j}(1 - h_k). Uncensored patients pay the usual
negative log likelihood of dying in their observed interval. Censored patients
pay -log S_c at their censor interval, plus a progressive disambiguation term:
the model's own post-censoring hazards (detached, renormalized) act as a soft
pseudo event-interval distribution whose expected uncensored NLL is ramped in
by a Gaussian warm-up weight over training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    concat,
    log,
    matmul,
    pick,
    relu,
    sigmoid,
    softmax,
)
from .aggregation import FUSION_DIM, uniform_init

HEAD_HIDDEN = 128


@dataclass
class HazardHead:
    """Two affine layers (fusion -> hidden -> K) with sigmoid interval hazards."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def n_intervals(self) -> int:
        return self.W2.value.shape[1]


def init_hazard_head(store: ParamStore, prefix: str, n_intervals: int, rng: Rng, in_dim: int = FUSION_DIM, hidden: int = HEAD_HIDDEN) -> HazardHead:
    return HazardHead(
        W1=store.add(f"{prefix}.W1", uniform_init(rng, in_dim, hidden, fan_in=in_dim)),
        b1=store.add(f"{prefix}.b1", np.zeros((1, hidden))),
        W2=store.add(f"{prefix}.W2", uniform_init(rng, hidden, n_intervals, fan_in=hidden)),
        b2=store.add(f"{prefix}.b2", np.zeros((1, n_intervals))),
    )


def hazard_forward(head: HazardHead, x) -> Tensor:
    x = as_tensor(x)
    if x.value.shape != (1, head.W1.value.shape[0]):
        raise ValueError(f"expected 1 x {head.W1.value.shape[0]} input, got {x.value.shape}")
    hidden = relu(matmul(x, head.W1) + head.b1)
    return sigmoid(matmul(hidden, head.W2) + head.b2)  # 1 x K hazards


def survival_curve(h: Tensor) -> Tensor:
    """Cumulative-product survival over a 1 x K hazard tensor (no bound check:
    sigmoid outputs can round to exactly 0/1 under saturation and the log clamp
    downstream keeps the losses finite)."""
    k = h.value.size
    factors = [1.0 - pick(h, j) for j in range(k)]
    out = [factors[0]]
    for j in range(1, k):
        out.append(out[-1] * factors[j])
    return concat(out, axis=1)  # 1 x K


def survival_from_hazards(h):
    """S_j = prod_{k<=j}(1 - h_k). Accepts a hazard vector (numpy) or tensor."""
    if isinstance(h, Tensor):
        vals = h.value.reshape(-1)
        if np.any(vals <= 0.0) or np.any(vals >= 1.0):
            raise ValueError("hazards must lie strictly inside (0, 1)")
        return survival_curve(h)
    arr = np.asarray(h, dtype=np.float64).reshape(-1)
    if arr.size == 0 or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("hazards must lie strictly inside (0, 1)")
    return np.cumprod(1.0 - arr)


def nll_uncensored(h, S, j: int) -> Tensor:
    """-[log S_{j-1} + log h_j] for a death in interval j, with S_{-1} = 1."""
    h, S = as_tensor(h), as_tensor(S)
    k = h.value.size
    if not 0 <= j < k:
        raise ValueError(f"invalid death interval {j} for {k} intervals")
    loss = -log(pick(h, j))
    if j > 0:
        loss = loss - log(pick(S, j - 1))
    return loss


def nll_censored(h, S, c: int) -> Tensor:
    """-log S_c for a patient censored in interval c."""
    S = as_tensor(S)
    k = S.value.size
    if not 0 <= c < k:
        raise ValueError(f"invalid censor interval {c} for {k} intervals")
    return -log(pick(S, c))


def pseudo_soft_label(h, c: int) -> np.ndarray:
    """Soft event-interval distribution over intervals after the censor interval.

    Hazards at intervals <= c are zeroed; the remainder are softmax-normalized.
    Computed from detached hazard values: no gradient flows through the label.
    """
    vals = (h.value if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)).reshape(-1)
    k = vals.size
    if not 0 <= c < k:
        raise ValueError(f"invalid censor interval {c} for {k} intervals")
    if c >= k - 1:
        raise ValueError("no eligible interval")
    q = np.zeros(k)
    q[c + 1 :] = softmax(vals[c + 1 :])
    return q


def nll_pseudo(h, S, q) -> Tensor:
    """Expected uncensored NLL under the soft label q (q treated as constant)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("q not normalized")
    h, S = as_tensor(h), as_tensor(S)
    if q.size != h.value.size:
        raise ValueError("q length does not match hazard vector")
    loss = None
    for j in np.nonzero(q)[0]:
        term = nll_uncensored(h, S, int(j)) * float(q[j])
        loss = term if loss is None else loss + term
    return as_tensor(0.0) if loss is None else loss


@dataclass
class WarmupSchedule:
    t_total: int

    def __post_init__(self):
        if self.t_total < 1:
            raise ValueError("t_total must be >= 1")


def warmup_weight(t: int, schedule: WarmupSchedule) -> float:
    """Gaussian ramp 0.1 * exp(-5 (1 - t/t_total)^2), clamped at t = t_total."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    frac = min(t, schedule.t_total) / schedule.t_total
    return 0.1 * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def survival_loss(
    items: list[tuple[Tensor, Tensor, int, bool]],
    t: int,
    schedule: WarmupSchedule,
    lambda_cen: float = 1.0,
    use_pseudo: bool = True,
    frozen_q: dict[int, np.ndarray] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Combined survival loss over a batch of (hazards, survival, interval, event).

    L = mean uncensored NLL + lambda_cen * (mean censored NLL
        + warmup(t) * mean pseudo NLL over censored patients with eligible
        later intervals). Empty subsets contribute zero. ``frozen_q`` pins the
    soft labels of given item indices to precomputed values, which the
    gradient-check harness uses to keep the objective pure; normally the label
    is recomputed (detached) from the current hazards.
    """
    lam_pro = warmup_weight(t, schedule)
    uncen, cen, cen_p = [], [], []
    for i, (h, S, interval, event) in enumerate(items):
        if event:
            uncen.append(nll_uncensored(h, S, interval))
        else:
            cen.append(nll_censored(h, S, interval))
            if use_pseudo and interval < h.value.size - 1:
                if frozen_q is not None:
                    q = frozen_q.get(i)
                else:
                    q = pseudo_soft_label(h, interval)
                if q is not None:
                    cen_p.append(nll_pseudo(h, S, q))

    def _mean(terms):
        if not terms:
            return as_tensor(0.0)
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total * (1.0 / len(terms))

    l_uncen, l_cen, l_cen_p = _mean(uncen), _mean(cen), _mean(cen_p)
    total = l_uncen + (l_cen + l_cen_p * lam_pro) * lambda_cen
    parts = {
        "L_uncen": float(l_uncen),
        "L_cen": float(l_cen),
        "L_cen_p": float(l_cen_p),
        "lambda_pro": lam_pro,
    }
    return total, parts


def risk_score(S) -> float:
    """Scalar risk: negative sum of interval survival probabilities."""
    vals = (S.value if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)).reshape(-1)
    return float(-vals.sum())


@dataclass
class SurvivalPrediction:
    hazards: np.ndarray  # K
    survival: np.ndarray  # K
    risk: float

    @classmethod
    def from_hazards(cls, hazards: np.ndarray) -> "SurvivalPrediction":
        hazards = np.asarray(hazards, dtype=np.float64).reshape(-1)
        survival = np.cumprod(1.0 - hazards)
        return cls(hazards=hazards, survival=survival, risk=risk_score(survival))


def write_predictions_csv(path, rows: list[tuple[str, SurvivalPrediction]]) -> None:
    """Per-patient export: patient_id, risk, h_0..h_{K-1}, S_0..S_{K-1}."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if rows:
            k = rows[0][1].hazards.size
            writer.writerow(
                ["patient_id", "risk"] + [f"h_{j}" for j in range(k)] + [f"S_{j}" for j in range(k)]
            )
        else:
            writer.writerow(["patient_id", "risk"])
        for pid, pred in rows:
            writer.writerow(
                [pid, repr(pred.risk)]
                + [repr(float(x)) for x in pred.hazards]
                + [repr(float(x)) for x in pred.survival]
            )
