"""End-to-end training: one patient per step, total loss = lambda * L_con + L_surv.

The model owns every trainable piece: per-modality MIL attention nets, the
radiology / clinical-notes adapters into hub space, per-modality projections
into the fusion space, the inter-modality attention net, and the hazard head.
Training is strictly sequential (memory queues and the optimizer forbid
concurrent steps); evaluation is pure and cross-validation folds are
independent, so folds may run in worker processes.

Checkpoints are a versioned binary container (JSON header + raw float64
arrays) holding parameters, optimizer moments, RNG state, queue contents and
interval edges; resuming from one reproduces the uninterrupted trajectory
bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg.blas import daxpy

from . import aggregation, alignment, survival
from .aggregation import FUSION_DIM, PatientEmbedding
from .alignment import HUB_DIM, MemoryQueue, QueueEntry
from .cohort import Cohort, ModalityKind, PatientRecord, assign_intervals, bin_intervals, interval_for
from .metrics import MetricsBundle, SurvivalOutcome, compute_bundle
from .numerics import GradCheckReport, ParamStore, Rng, Tensor, as_tensor, finite_diff_check, no_grad
from .survival import SurvivalPrediction, WarmupSchedule

CHECKPOINT_MAGIC = b"SURVBINDCKPT1\n"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Everything the trainer needs; every field has a CLI/config override."""

    contrastive_weight: float = 1.0  # lambda in L = lambda * L_con + L_surv
    lambda_cen: float = 1.0
    tau: float = 0.07
    queue_size: int = 64
    n_intervals: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 8
    seed: int = 0
    t_total: int | None = None  # default: epochs * n_train
    grad_clip: float = 5.0
    use_pseudo: bool = True
    contrastive_enabled: bool = True
    lambda_con_override: float | None = None

    def __post_init__(self):
        if self.n_intervals < 2:
            raise ValueError("n_intervals must be >= 2")
        for name in ("lambda_cen", "tau", "lr", "beta1", "beta2", "eps", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be >= 0")
        if self.queue_size < 1 or self.epochs < 1:
            raise ValueError("queue_size and epochs must be >= 1")
        if self.t_total is not None and self.t_total < 1:
            raise ValueError("t_total must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config field {sorted(unknown)[0]!r}")
        return cls(**data)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

_KIND_ORDER = [ModalityKind.WSI, ModalityKind.PATH_REPORT, ModalityKind.RADIOLOGY, ModalityKind.CLINICAL_NOTES]
_KIND_TAG = {
    ModalityKind.WSI: "wsi",
    ModalityKind.PATH_REPORT: "path_report",
    ModalityKind.RADIOLOGY: "radiology",
    ModalityKind.CLINICAL_NOTES: "clinical_notes",
}


@dataclass
class PatientForward:
    intra: dict[ModalityKind, aggregation.ModalityEmbedding]
    hub: dict[ModalityKind, Tensor]  # 1 x 512 vectors: W, P, and adapted R / B when present
    fused: PatientEmbedding
    hazards: Tensor  # 1 x K
    survival: Tensor  # 1 x K


class MultiModalSurvivalModel:
    """All trainable components behind a single ParamStore."""

    def __init__(self, n_intervals: int, rng: Rng):
        self.n_intervals = n_intervals
        self.store = ParamStore()
        self.attention = {
            kind: aggregation.init_attention_net(self.store, f"attn.{_KIND_TAG[kind]}", kind.dim, rng)
            for kind in _KIND_ORDER
        }
        self.adapters = {
            ModalityKind.RADIOLOGY: alignment.init_adapter(
                self.store, "adapter.radiology", ModalityKind.RADIOLOGY.dim, rng
            ),
            ModalityKind.CLINICAL_NOTES: alignment.init_adapter(
                self.store, "adapter.clinical_notes", ModalityKind.CLINICAL_NOTES.dim, rng
            ),
        }
        self.projections = {
            kind: aggregation.init_projection(self.store, f"proj.{_KIND_TAG[kind]}", HUB_DIM, rng)
            for kind in _KIND_ORDER
        }
        self.inter_net = aggregation.init_attention_net(self.store, "attn.inter", FUSION_DIM, rng)
        self.head = survival.init_hazard_head(self.store, "head", n_intervals, rng)

    def forward(self, patient: PatientRecord) -> PatientForward:
        intra: dict[ModalityKind, aggregation.ModalityEmbedding] = {}
        hub: dict[ModalityKind, Tensor] = {}
        for kind in _KIND_ORDER:
            if not patient.has(kind):
                continue
            emb = aggregation.intra_aggregate(self.attention[kind], patient.feature_sets[kind])
            intra[kind] = emb
            if kind in self.adapters:
                hub[kind] = alignment.adapter_forward(self.adapters[kind], emb.vector)
            else:
                hub[kind] = emb.vector  # pathology-side vectors are already hub space
        projected = [
            (kind, aggregation.project_modality(self.projections[kind], hub[kind]))
            for kind in _KIND_ORDER
            if kind in hub
        ]
        fused = aggregation.inter_aggregate(self.inter_net, projected)
        hazards = survival.hazard_forward(self.head, fused.vector)
        surv = survival.survival_curve(hazards)
        return PatientForward(intra=intra, hub=hub, fused=fused, hazards=hazards, survival=surv)

    def predict(self, patient: PatientRecord) -> tuple[SurvivalPrediction, PatientForward]:
        with no_grad():
            fwd = self.forward(patient)
        return SurvivalPrediction.from_hazards(fwd.hazards.value), fwd


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment descent with per-parameter lazy state.

    Parameters untouched by a step (absent modalities) keep their moments and
    per-parameter step count, matching the convention of skipping parameters
    with no gradient. Updates run fused over raveled views to keep the
    per-step memory traffic low.
    """

    def __init__(self, store: ParamStore, lr: float, beta1: float, beta2: float, eps: float):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(t.value) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in store.items()}
        self.steps = {name: 0 for name, _ in store.items()}
        size = max((t.value.size for _, t in store.items()), default=1)
        self._scratch = np.empty(size)

    def step(self, touched: list[Tensor], grad_scale: float = 1.0) -> None:
        c1 = (1.0 - self.beta1) * grad_scale  # clip scale folded in: g itself is never mutated
        c2 = (1.0 - self.beta2) * grad_scale * grad_scale
        for p in touched:
            name = p.name
            t = self.steps[name] + 1
            self.steps[name] = t
            g = p.grad.reshape(-1)
            m = self.m[name].reshape(-1)
            v = self.v[name].reshape(-1)
            tmp = self._scratch[: g.size]
            np.multiply(m, self.beta1, out=m)
            daxpy(g, m, a=c1)
            np.multiply(g, g, out=tmp)
            np.multiply(v, self.beta2, out=v)
            daxpy(tmp, v, a=c2)
            s2 = math.sqrt(1.0 - self.beta2**t)
            np.sqrt(v, out=tmp)
            tmp += self.eps * s2
            np.divide(m, tmp, out=tmp)
            daxpy(tmp, p.value.reshape(-1), a=-self.lr * s2 / (1.0 - self.beta1**t))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out


# ---------------------------------------------------------------------------
# training state + loop
# ---------------------------------------------------------------------------


@dataclass
class LossLogRow:
    epoch: int
    L: float
    L_con: float
    L_WR: float
    L_PB: float
    L_uncen: float
    L_cen: float
    L_cen_p: float
    lambda_pro: float

    COLUMNS = ("epoch", "L", "L_con", "L_WR", "L_PB", "L_uncen", "L_cen", "L_cen_p", "lambda_pro")


@dataclass
class TrainState:
    config: TrainConfig
    model: MultiModalSurvivalModel
    optimizer: Adam
    rng: Rng
    queue_img: MemoryQueue
    queue_text: MemoryQueue
    lambda_con: float
    interval_edges: list[float]
    t_total: int
    iteration: int = 0
    epoch: int = 0
    img_side_enabled: bool = True
    text_side_enabled: bool = True
    train_ids: list[str] = field(default_factory=list)


@dataclass
class TrainResult:
    state: TrainState
    loss_log: list[LossLogRow]


def _patient_loss(
    state: TrainState,
    patient: PatientRecord,
    t: int,
    schedule: WarmupSchedule,
    mutate_queues: bool = True,
    frozen_q: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Total loss for one patient step; queue pushes only when ``mutate_queues``."""
    cfg = state.config
    fwd = state.model.forward(patient)
    parts = {"L_WR": 0.0, "L_PB": 0.0}

    l_con = None
    if cfg.contrastive_enabled:
        img_loss = None
        if state.img_side_enabled and patient.has(ModalityKind.RADIOLOGY):
            img_loss = alignment.contrastive_side_loss(
                state.queue_img,
                patient.id,
                fwd.hub[ModalityKind.WSI],
                fwd.hub[ModalityKind.RADIOLOGY],
                cfg.tau,
                mutate=mutate_queues,
            )
        text_loss = None
        if state.text_side_enabled and patient.has(ModalityKind.CLINICAL_NOTES):
            text_loss = alignment.contrastive_side_loss(
                state.queue_text,
                patient.id,
                fwd.hub[ModalityKind.PATH_REPORT],
                fwd.hub[ModalityKind.CLINICAL_NOTES],
                cfg.tau,
                mutate=mutate_queues,
            )
        parts["L_WR"] = 0.0 if img_loss is None else float(img_loss)
        parts["L_PB"] = 0.0 if text_loss is None else float(text_loss)
        l_con = alignment.contrastive_loss(img_loss, text_loss, state.lambda_con)

    frozen = None if frozen_q is None else {0: frozen_q}
    l_surv, surv_parts = survival.survival_loss(
        [(fwd.hazards, fwd.survival, patient.interval, patient.event)],
        t,
        schedule,
        lambda_cen=cfg.lambda_cen,
        use_pseudo=cfg.use_pseudo,
        frozen_q=frozen,
    )
    parts.update(surv_parts)
    parts["L_surv"] = float(l_surv)
    if l_con is None:
        total = l_surv
        parts["L_con"] = 0.0
    else:
        total = l_con * cfg.contrastive_weight + l_surv
        parts["L_con"] = float(l_con)
    parts["L"] = float(total)
    return total, parts


def _validate_binned(cohort: Cohort, k: int) -> None:
    if len(cohort.interval_edges) != k - 1:
        raise ValueError(f"cohort must be binned into {k} intervals before training")
    for p in cohort.patients:
        if p.interval is None or not 0 <= p.interval < k:
            raise ValueError(f"patient {p.id} has no valid interval label")


def train(
    cohort: Cohort,
    cfg: TrainConfig,
    resume: TrainState | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Run (or continue) training toward ``cfg.epochs`` epochs over the cohort.

    ``stop_epoch`` pauses the run early (for checkpointing) without shrinking
    the planned schedule: the warm-up horizon t_total is fixed by the original
    plan, so a paused-and-resumed run retraces the uninterrupted trajectory.
    """
    _validate_binned(cohort, cfg.n_intervals)
    n = len(cohort.patients)
    if n == 0:
        raise ValueError("empty cohort")

    if resume is not None:
        if replace(resume.config, epochs=cfg.epochs) != cfg:
            raise ValueError("resume config differs from checkpoint config (only epochs may change)")
        if list(cohort.interval_edges) != list(resume.interval_edges):
            raise ValueError("interval edges mismatch between cohort and checkpoint")
        state = resume
        state.config = cfg
    else:
        init_rng = Rng(cfg.seed).substream(0)
        model = MultiModalSurvivalModel(cfg.n_intervals, init_rng)
        n_img = sum(1 for p in cohort.patients if p.has(ModalityKind.RADIOLOGY))
        n_text = sum(1 for p in cohort.patients if p.has(ModalityKind.CLINICAL_NOTES))
        lambda_con = (
            cfg.lambda_con_override
            if cfg.lambda_con_override is not None
            else alignment.compute_lambda_con(cohort)
        )
        state = TrainState(
            config=cfg,
            model=model,
            optimizer=Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            rng=Rng(cfg.seed).substream(1),
            queue_img=MemoryQueue(cfg.queue_size),
            queue_text=MemoryQueue(cfg.queue_size),
            lambda_con=lambda_con,
            interval_edges=list(cohort.interval_edges),
            t_total=cfg.t_total if cfg.t_total is not None else cfg.epochs * n,
            img_side_enabled=cfg.contrastive_enabled and n_img >= cfg.queue_size,
            text_side_enabled=cfg.contrastive_enabled and n_text >= cfg.queue_size,
            train_ids=sorted(p.id for p in cohort.patients),
        )

    schedule = WarmupSchedule(state.t_total)
    store = state.model.store
    store.zero_grad()
    prev_touched: list[Tensor] = []
    log: list[LossLogRow] = []
    target_epoch = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)
    while state.epoch < target_epoch:
        order = state.rng.permutation(n)
        sums = {c: 0.0 for c in LossLogRow.COLUMNS[1:]}
        for idx in order:
            patient = cohort.patients[int(idx)]
            for p in prev_touched:  # grads of untouched params are already zero
                p.grad[...] = 0.0
            total, parts = _patient_loss(state, patient, state.iteration, schedule)
            if not math.isfinite(parts["L"]):
                total.backward()  # populate gradients so the report can name the culprit
                bad = _first_bad_gradient(store)
                raise TrainingError(
                    f"non-finite loss at iteration {state.iteration}"
                    + (f"; first non-finite gradient in {bad!r}" if bad else "")
                )
            touched = total.backward()
            grad_scale = _clip_scale(state, touched)
            state.optimizer.step(touched, grad_scale)
            prev_touched = touched
            state.iteration += 1
            for key in sums:
                sums[key] += parts.get(key, 0.0)
        state.epoch += 1
        log.append(LossLogRow(state.epoch, *(sums[c] / n for c in LossLogRow.COLUMNS[1:])))
    return TrainResult(state=state, loss_log=log)


def _clip_scale(state: TrainState, touched: list[Tensor]) -> float:
    sq = 0.0
    for p in touched:
        g = p.grad.reshape(-1)
        sq += float(g @ g)
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        bad = _first_bad_gradient(state.model.store)
        raise TrainingError(
            f"non-finite gradient at iteration {state.iteration}"
            + (f"; first non-finite gradient in {bad!r}" if bad else "")
        )
    clip = state.config.grad_clip
    return clip / norm if norm > clip else 1.0


def _first_bad_gradient(store: ParamStore) -> str | None:
    for name, t in store.items():
        if not np.isfinite(t.grad).all():
            return name
    return None


def write_loss_log(path, rows: list[LossLogRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LossLogRow.COLUMNS)
        for row in rows:
            writer.writerow([row.epoch] + [repr(getattr(row, c)) for c in LossLogRow.COLUMNS[1:]])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    predictions: dict[str, SurvivalPrediction]
    outcomes: list[SurvivalOutcome]
    bundle: MetricsBundle
    intra_attention: list[tuple[str, str, int, float]]
    inter_attention: list[tuple[str, str, float]]


def evaluate(state: TrainState, cohort: Cohort) -> EvalResult:
    """Pure inference over a cohort binned on the checkpoint's interval edges."""
    if cohort.interval_edges:
        if list(cohort.interval_edges) != list(state.interval_edges):
            raise ValueError("interval edges mismatch between cohort and checkpoint")
    else:
        assign_intervals(cohort, state.interval_edges)
    for p in cohort.patients:
        if p.interval is None:
            p.interval = interval_for(p.time, state.interval_edges)

    predictions: dict[str, SurvivalPrediction] = {}
    outcomes: list[SurvivalOutcome] = []
    intra_rows: list[tuple[str, str, int, float]] = []
    inter_rows: list[tuple[str, str, float]] = []
    for p in cohort.patients:
        pred, fwd = state.model.predict(p)
        predictions[p.id] = pred
        outcomes.append(
            SurvivalOutcome(
                time=p.time,
                event=p.event,
                risk=pred.risk,
                survival=pred.survival,
                interval=p.interval,
                patient_id=p.id,
            )
        )
        for kind, emb in fwd.intra.items():
            for j, score in enumerate(emb.attention):
                intra_rows.append((p.id, kind.value, j, float(score)))
        for kind, score in fwd.fused.modality_attention.items():
            inter_rows.append((p.id, kind.value, score))
    return EvalResult(
        predictions=predictions,
        outcomes=outcomes,
        bundle=compute_bundle(outcomes),
        intra_attention=intra_rows,
        inter_attention=inter_rows,
    )


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    test_ids: list[str]
    train_ids: list[str]
    interval_edges: list[float]
    bundle: MetricsBundle
    outcomes: list[SurvivalOutcome]
    queue_ids: list[str]  # patients whose embeddings entered either memory queue


@dataclass
class CVResult:
    folds: list[FoldResult]
    mean_ci: float
    std_ci: float
    mean_brier: float
    std_brier: float
    pooled: MetricsBundle

    def to_dict(self) -> dict:
        return {
            "folds": [
                {"fold": f.fold, "n_test": len(f.test_ids), **f.bundle.to_dict()} for f in self.folds
            ],
            "mean_ci": self.mean_ci,
            "std_ci": self.std_ci,
            "mean_brier": self.mean_brier,
            "std_brier": self.std_brier,
            "pooled": self.pooled.to_dict(),
        }


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, 7, fold]).generate_state(1)[0])


def _run_fold(cohort: Cohort, cfg: TrainConfig, fold: int, test_idx: np.ndarray) -> FoldResult:
    test_set = {cohort.patients[int(i)].id for i in test_idx}
    train_patients = [p for p in cohort.patients if p.id not in test_set]
    test_patients = [p for p in cohort.patients if p.id in test_set]
    train_cohort = bin_intervals(Cohort(train_patients), cfg.n_intervals)  # edges fit on train only
    test_cohort = assign_intervals(Cohort(test_patients), train_cohort.interval_edges)
    result = train(train_cohort, replace(cfg, seed=_fold_seed(cfg.seed, fold)))
    ev = evaluate(result.state, test_cohort)
    queue_ids = sorted(
        {e.patient_id for e in result.state.queue_img.entries()}
        | {e.patient_id for e in result.state.queue_text.entries()}
    )
    return FoldResult(
        fold=fold,
        test_ids=sorted(test_set),
        train_ids=list(result.state.train_ids),
        interval_edges=list(train_cohort.interval_edges),
        bundle=ev.bundle,
        outcomes=ev.outcomes,
        queue_ids=queue_ids,
    )


def cross_validate(cohort: Cohort, cfg: TrainConfig, folds: int = 5, jobs: int = 1) -> CVResult:
    """Patient-disjoint seeded folds; interval edges are re-fit per training fold."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    n = len(cohort.patients)
    if folds > n:
        raise ValueError("fold larger than cohort")
    perm = Rng(cfg.seed).substream(2).permutation(n)
    assignments = [perm[i::folds] for i in range(folds)]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, cohort, cfg, i, idx) for i, idx in enumerate(assignments)]
            results = [f.result() for f in futures]
    else:
        results = [_run_fold(cohort, cfg, i, idx) for i, idx in enumerate(assignments)]

    cis = np.array([r.bundle.ci for r in results])
    briers = np.array([r.bundle.brier for r in results])
    pooled_outcomes = [o for r in results for o in r.outcomes]
    return CVResult(
        folds=results,
        mean_ci=float(cis.mean()),
        std_ci=float(cis.std()),
        mean_brier=float(briers.mean()),
        std_brier=float(briers.std()),
        pooled=compute_bundle(pooled_outcomes),
    )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    """Binary container: magic, length-prefixed JSON header, raw float64 arrays."""
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.model.store.items():
        arrays[f"p/{name}"] = t.value
    arrays.update(state.optimizer.state_arrays())
    for tag, queue in (("qi", state.queue_img), ("qt", state.queue_text)):
        for i, entry in enumerate(queue.entries()):
            arrays[f"{tag}/{i}/hub"] = entry.hub
            arrays[f"{tag}/{i}/other"] = entry.other
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    header = {
        "format_version": 1,
        "config": state.config.to_dict(),
        "lambda_con": state.lambda_con,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "t_total": state.t_total,
        "interval_edges": state.interval_edges,
        "rng_state": state.rng.get_state(),
        "rng_seed": state.rng.seed,
        "rng_key": list(state.rng.key),
        "adam_steps": state.optimizer.steps,
        "img_side_enabled": state.img_side_enabled,
        "text_side_enabled": state.text_side_enabled,
        "queue_img_ids": [e.patient_id for e in state.queue_img.entries()],
        "queue_text_ids": [e.patient_id for e in state.queue_text.entries()],
        "train_ids": state.train_ids,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for item in manifest:
            fh.write(np.ascontiguousarray(arrays[item["name"]]).astype("<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a survbind checkpoint")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != 1:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        arrays = {}
        for item in header["manifest"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[item["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    cfg = TrainConfig.from_dict(header["config"])
    model = MultiModalSurvivalModel(cfg.n_intervals, Rng(0))  # shapes only; overwritten below
    model.store.load_state_dict(
        {name: arrays[f"p/{name}"] for name in model.store.names()}
    )
    optimizer = Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    for name in model.store.names():
        optimizer.m[name][...] = arrays[f"m/{name}"]
        optimizer.v[name][...] = arrays[f"v/{name}"]
    optimizer.steps = {name: int(v) for name, v in header["adam_steps"].items()}

    rng = Rng(header["rng_seed"], tuple(header["rng_key"]))
    rng.set_state(header["rng_state"])

    queue_img = MemoryQueue(cfg.queue_size)
    for i, pid in enumerate(header["queue_img_ids"]):
        queue_img.push(QueueEntry(pid, arrays[f"qi/{i}/hub"], arrays[f"qi/{i}/other"]))
    queue_text = MemoryQueue(cfg.queue_size)
    for i, pid in enumerate(header["queue_text_ids"]):
        queue_text.push(QueueEntry(pid, arrays[f"qt/{i}/hub"], arrays[f"qt/{i}/other"]))

    return TrainState(
        config=cfg,
        model=model,
        optimizer=optimizer,
        rng=rng,
        queue_img=queue_img,
        queue_text=queue_text,
        lambda_con=header["lambda_con"],
        interval_edges=[float(e) for e in header["interval_edges"]],
        t_total=int(header["t_total"]),
        iteration=int(header["iteration"]),
        epoch=int(header["epoch"]),
        img_side_enabled=header["img_side_enabled"],
        text_side_enabled=header["text_side_enabled"],
        train_ids=list(header["train_ids"]),
    )


# ---------------------------------------------------------------------------
# composed-loss gradient check
# ---------------------------------------------------------------------------


def composed_loss_check(
    cohort: Cohort,
    cfg: TrainConfig,
    seed: int = 0,
    step: float = 1e-5,
    tol: float = 1e-4,
    entries_per_param: int | None = 8,
) -> GradCheckReport:
    """finite_diff_check over the full aggregation + alignment + survival loss.

    Queue contents and pseudo soft labels are stochastic state of a training
    step, not functions being differentiated; both are frozen at the base
    parameter point so the objective is pure under perturbation, matching the
    detached-constant semantics of the training gradient.
    """
    _validate_binned(cohort, cfg.n_intervals)
    init_rng = Rng(seed).substream(0)
    model = MultiModalSurvivalModel(cfg.n_intervals, init_rng)
    lam_con = (
        cfg.lambda_con_override if cfg.lambda_con_override is not None else alignment.compute_lambda_con(cohort)
    )
    state = TrainState(
        config=cfg,
        model=model,
        optimizer=Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
        rng=Rng(seed).substream(1),
        queue_img=MemoryQueue(cfg.queue_size),
        queue_text=MemoryQueue(cfg.queue_size),
        lambda_con=lam_con,
        interval_edges=list(cohort.interval_edges),
        t_total=max(1, cfg.epochs * len(cohort.patients)),
    )
    schedule = WarmupSchedule(state.t_total)
    t_mid = state.t_total // 2  # nonzero warm-up weight so the pseudo term is exercised

    # freeze queues (from base-point embeddings) and pseudo labels at the base point
    with no_grad():
        for p in cohort.patients:
            fwd = model.forward(p)
            if p.has(ModalityKind.RADIOLOGY):
                state.queue_img.push(
                    QueueEntry(p.id, fwd.hub[ModalityKind.WSI].value.copy(), fwd.hub[ModalityKind.RADIOLOGY].value.copy())
                )
            if p.has(ModalityKind.CLINICAL_NOTES):
                state.queue_text.push(
                    QueueEntry(p.id, fwd.hub[ModalityKind.PATH_REPORT].value.copy(), fwd.hub[ModalityKind.CLINICAL_NOTES].value.copy())
                )
        frozen_q: dict[str, np.ndarray | None] = {}
        for p in cohort.patients:
            if not p.event and cfg.use_pseudo and p.interval < cfg.n_intervals - 1:
                fwd = model.forward(p)
                frozen_q[p.id] = survival.pseudo_soft_label(fwd.hazards, p.interval)
            else:
                frozen_q[p.id] = None

    def objective(_params: ParamStore) -> Tensor:
        total = as_tensor(0.0)
        for p in cohort.patients:
            loss, _ = _patient_loss(
                state, p, t_mid, schedule, mutate_queues=False, frozen_q=frozen_q[p.id]
            )
            total = total + loss
        return total * (1.0 / len(cohort.patients))

    return finite_diff_check(
        objective,
        model.store,
        step=step,
        tol=tol,
        entries_per_param=entries_per_param,
        rng=Rng(seed).substream(3),
    )
