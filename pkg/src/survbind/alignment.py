"""Patient-wise contrastive alignment onto the pathology hub space.

The pathology WSI / pathology report embeddings act as the hub. Radiology and
clinical-notes vectors are mapped into that 512-dim space by two-layer
adapters, and each optional modality is pulled toward its patient's hub vector
with an InfoNCE loss whose negatives come from a fixed-capacity FIFO memory
queue of past patients (training runs one patient at a time, so the queue is
what supplies negatives). Queue entries are stored detached: no gradient flows
into remembered embeddings.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, ModalityKind
from .numerics import ParamStore, Rng, Tensor, as_tensor, concat, logsumexp_t, matmul, pick, relu, sqrt, tsum
from .aggregation import uniform_init

HUB_DIM = 512
ADAPTER_HIDDEN = 256


@dataclass
class Adapter:
    """Two affine layers with a ReLU between, mapping a modality into hub space."""

    W1: Tensor  # in_dim x hidden
    b1: Tensor
    W2: Tensor  # hidden x HUB_DIM
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.W1.value.shape[0]


def init_adapter(store: ParamStore, prefix: str, in_dim: int, rng: Rng, hidden: int = ADAPTER_HIDDEN, out_dim: int = HUB_DIM) -> Adapter:
    return Adapter(
        W1=store.add(f"{prefix}.W1", uniform_init(rng, in_dim, hidden, fan_in=in_dim)),
        b1=store.add(f"{prefix}.b1", np.zeros((1, hidden))),
        W2=store.add(f"{prefix}.W2", uniform_init(rng, hidden, out_dim, fan_in=hidden)),
        b2=store.add(f"{prefix}.b2", np.zeros((1, out_dim))),
    )


def adapter_forward(adapter: Adapter, z) -> Tensor:
    z = as_tensor(z)
    if z.value.shape != (1, adapter.in_dim):
        raise ValueError(f"expected 1 x {adapter.in_dim} input, got {z.value.shape}")
    hidden = relu(matmul(z, adapter.W1) + adapter.b1)
    return matmul(hidden, adapter.W2) + adapter.b2


# ---------------------------------------------------------------------------
# memory queues
# ---------------------------------------------------------------------------


@dataclass
class QueueEntry:
    patient_id: str
    hub: np.ndarray  # 1 x HUB_DIM, detached
    other: np.ndarray  # 1 x HUB_DIM, detached


class MemoryQueue:
    """Fixed-capacity FIFO of detached (hub, other) embedding pairs.

    Filling happens lazily from the first eligible patients; once full, every
    push evicts the oldest entry so the length stays exactly at capacity.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[QueueEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) >= self.capacity

    def entries(self) -> list[QueueEntry]:
        return list(self._entries)

    def push(self, entry: QueueEntry) -> QueueEntry:
        """Append (evicting the oldest if at capacity) and return the stored entry."""
        if not np.isfinite(entry.hub).all() or not np.isfinite(entry.other).all():
            raise ValueError("non-finite embedding pushed to queue")
        if self.full:
            self._entries.popleft()
        self._entries.append(entry)
        return entry

    def snapshot(self) -> list[dict]:
        return [
            {"patient_id": e.patient_id, "hub": e.hub.copy(), "other": e.other.copy()}
            for e in self._entries
        ]

    @classmethod
    def restore(cls, capacity: int, snapshot: list[dict]) -> "MemoryQueue":
        q = cls(capacity)
        for item in snapshot:
            q.push(QueueEntry(item["patient_id"], np.asarray(item["hub"]), np.asarray(item["other"])))
        return q


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _l2norm(t: Tensor) -> Tensor:
    return sqrt(tsum(t * t))


def _check_norms(*vecs) -> None:
    for v in vecs:
        arr = v.value if isinstance(v, Tensor) else np.asarray(v)
        if float(np.linalg.norm(arr)) < 1e-150:
            raise ValueError("degenerate embedding")


def info_nce(anchor, positive, negatives, temperature: float) -> Tensor:
    """-log p(positive | positive + negatives) under temperature-scaled cosine similarity."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    negatives = [np.asarray(n, dtype=np.float64).reshape(1, -1) for n in negatives]
    if not negatives:
        raise ValueError("negatives must be nonempty")
    anchor = as_tensor(anchor)
    positive = as_tensor(positive)
    _check_norms(anchor, positive, *negatives)

    neg = np.concatenate(negatives, axis=0)  # K x D, constants
    neg_norms = np.linalg.norm(neg, axis=1, keepdims=True).T  # 1 x K
    a_norm = _l2norm(anchor)
    s_pos = matmul(anchor, positive.T) / (a_norm * _l2norm(positive))  # 1 x 1
    s_neg = matmul(anchor, Tensor(neg.T)) / (a_norm * Tensor(neg_norms))  # 1 x K
    logits = concat([s_pos, s_neg], axis=1) * (1.0 / temperature)
    return logsumexp_t(logits) - pick(logits, 0)


def contrastive_side_loss(
    queue: MemoryQueue,
    patient_id: str,
    hub: Tensor,
    other: Tensor,
    temperature: float,
    mutate: bool = True,
) -> Tensor | None:
    """Symmetric InfoNCE for one side's (hub, other) pair against the queue.

    The current pair is enqueued (detached) before the loss; its own entry is
    excluded from the negatives. Returns None while the queue is still filling
    (no loss contribution yet) or when no negatives remain.

    With ``mutate=False`` the queue is left untouched and entries matching
    ``patient_id`` are excluded instead; this is the pure variant used by the
    gradient-check harness, which must re-evaluate the loss at perturbed
    parameters against constant queue contents.
    """
    if mutate:
        fresh = queue.push(QueueEntry(patient_id, hub.value.copy(), other.value.copy()))
        if not queue.full:
            return None
        rest = [e for e in queue.entries() if e is not fresh]
    else:
        rest = [e for e in queue.entries() if e.patient_id != patient_id]
    if not rest:
        return None
    neg_other = [e.other for e in rest]
    neg_hub = [e.hub for e in rest]
    hub_anchored = info_nce(hub, other, neg_other, temperature)
    other_anchored = info_nce(other, hub, neg_hub, temperature)
    return (hub_anchored + other_anchored) * 0.5


def compute_lambda_con(cohort: Cohort) -> float:
    """Ratio of (pathology-report, notes)-complete to (WSI, radiology)-complete patients."""
    if not cohort.patients:
        raise ValueError("empty cohort")
    n_wr = sum(1 for p in cohort.patients if p.has(ModalityKind.RADIOLOGY))
    n_pb = sum(1 for p in cohort.patients if p.has(ModalityKind.CLINICAL_NOTES))
    if n_wr == 0:
        return 1.0  # image side has no pairs and stays silent; weight is moot
    return n_pb / n_wr


def contrastive_loss(img_side, text_side, lambda_con: float) -> Tensor:
    """L_con = image-side loss + lambda_con * text-side loss (absent sides count 0)."""
    img = as_tensor(0.0) if img_side is None else as_tensor(img_side)
    text = as_tensor(0.0) if text_side is None else as_tensor(text_side)
    return img + text * lambda_con
