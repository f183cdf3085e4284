"""Attention-based multi-instance aggregation, within and across modalities.

One shared mechanism at both levels: a small self-attention net scores each
instance with ``w^T tanh(V f_j^T)``, the scores are softmax-normalized, and the
set is pooled as the score-weighted sum. Within a modality the instances are
embedding rows; across modalities they are the projected per-modality vectors,
so a patient with any subset of modalities aggregates over whatever is present.
Attention scores are kept for interpretability exports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import FeatureSet, ModalityKind
from .numerics import ParamStore, Rng, Tensor, as_tensor, concat, matmul, softmax_t, tanh

FUSION_DIM = 256  # patient-level embedding width
ATTENTION_HIDDEN = 128


@dataclass
class AttentionNet:
    """Instance-scoring net of Eq-style MIL attention: logit_j = w^T tanh(V f_j^T)."""

    V: Tensor  # hidden x in_dim
    w: Tensor  # hidden x 1

    @property
    def in_dim(self) -> int:
        return self.V.value.shape[1]


@dataclass
class Projection:
    """Per-modality affine map into the shared fusion space."""

    weight: Tensor  # in_dim x out_dim
    bias: Tensor  # 1 x out_dim

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[0]


@dataclass
class ModalityEmbedding:
    modality: ModalityKind
    vector: Tensor  # 1 x D
    attention: np.ndarray  # per-instance scores, sum to 1


@dataclass
class PatientEmbedding:
    vector: Tensor  # 1 x FUSION_DIM
    modality_attention: dict[ModalityKind, float]


def uniform_init(rng: Rng, rows: int, cols: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_attention_net(store: ParamStore, prefix: str, in_dim: int, rng: Rng, hidden: int = ATTENTION_HIDDEN) -> AttentionNet:
    V = store.add(f"{prefix}.V", uniform_init(rng, hidden, in_dim, fan_in=in_dim))
    w = store.add(f"{prefix}.w", uniform_init(rng, hidden, 1, fan_in=hidden))
    return AttentionNet(V=V, w=w)


def init_projection(store: ParamStore, prefix: str, in_dim: int, rng: Rng, out_dim: int = FUSION_DIM) -> Projection:
    weight = store.add(f"{prefix}.weight", uniform_init(rng, in_dim, out_dim, fan_in=in_dim))
    bias = store.add(f"{prefix}.bias", np.zeros((1, out_dim)))
    return Projection(weight=weight, bias=bias)


def attention_scores(net: AttentionNet, features) -> Tensor:
    """Softmax-normalized instance scores for an N x D feature matrix (1 x N)."""
    f = as_tensor(features)
    if f.value.ndim != 2 or f.value.shape[0] < 1:
        raise ValueError("features must be a nonempty N x D matrix")
    if f.value.shape[1] != net.in_dim:
        raise ValueError(f"feature dim {f.value.shape[1]} does not match attention net dim {net.in_dim}")
    logits = matmul(net.w.T, tanh(matmul(net.V, f.T)))  # 1 x N
    return softmax_t(logits, axis=-1)


def intra_aggregate(net: AttentionNet, fs: FeatureSet) -> ModalityEmbedding:
    """Pool one modality's instances into a single 1 x D vector."""
    scores = attention_scores(net, fs.features)
    vector = matmul(scores, as_tensor(fs.features))  # 1 x D
    return ModalityEmbedding(modality=fs.modality, vector=vector, attention=scores.value.reshape(-1).copy())


def project_modality(proj: Projection, vector) -> Tensor:
    v = as_tensor(vector)
    if v.value.shape != (1, proj.in_dim):
        raise ValueError(f"expected 1 x {proj.in_dim} input, got {v.value.shape}")
    return matmul(v, proj.weight) + proj.bias


def inter_aggregate(net: AttentionNet, projected: list[tuple[ModalityKind, Tensor]]) -> PatientEmbedding:
    """Aggregate the present modalities' projected vectors into the patient vector."""
    if not projected:
        raise ValueError("no modalities")
    stacked = concat([vec for _, vec in projected], axis=0)  # M x FUSION_DIM
    scores = attention_scores(net, stacked)
    vector = matmul(scores, stacked)
    flat = scores.value.reshape(-1)
    return PatientEmbedding(
        vector=vector,
        modality_attention={kind: float(flat[i]) for i, (kind, _) in enumerate(projected)},
    )


# ---------------------------------------------------------------------------
# interpretability exports
# ---------------------------------------------------------------------------


def write_intra_attention_csv(path, rows: list[tuple[str, str, int, float]]) -> None:
    """rows: (patient_id, modality, instance_index, score)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "modality", "instance_index", "score"])
        for pid, modality, idx, score in rows:
            writer.writerow([pid, modality, idx, repr(float(score))])


def write_inter_attention_csv(path, rows: list[tuple[str, str, float]]) -> None:
    """rows: (patient_id, modality, score)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "modality", "score"])
        for pid, modality, score in rows:
            writer.writerow([pid, modality, repr(float(score))])
