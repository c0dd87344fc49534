"""Incremental training of the classifier over a task stream.

Each step expands the head for the new classes and fine-tunes on the
union of new-task rows and replay memory with cross-entropy.  The
``replay_distill`` method adds a softened-softmax distillation term
against the frozen pre-step head (a stand-in for iCaRL's regularizer);
``replay_distill_wa`` additionally rescales new-class weight rows after
training (a stand-in for weight alignment).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    FeatureDataset,
    MemoryBuffer,
    TaskStream,
    features_by_class,
    memory_rows,
    rebalance_memory,
)
from .model import (
    Extractor,
    LinearHead,
    SgdState,
    ce_loss,
    cosine_lr,
    expand_head,
    sgd_step,
    weight_align,
)
from .numerics import RngStream, softmax_rows

__all__ = ["CilConfig", "CilModel", "train_task", "evaluate_accuracy", "msp_confidences"]

_METHODS = ("replay", "replay_distill", "replay_distill_wa")


@dataclass(frozen=True)
class CilConfig:
    # weight decay well above the fine-tuner's: it keeps the noise-dimension
    # weights of the expandable head small, which the logit-based scorers need
    epochs_per_task: int = 30
    batch_size: int = 128
    method: str = "replay"
    distill_temperature: float = 2.0
    distill_weight: float = 1.0
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.02
    head_init: str = "seeded_uniform"
    exemplar_strategy: str = "herding"

    def __post_init__(self):
        if self.epochs_per_task < 1:
            raise ValueError("need at least one epoch per task")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.distill_temperature <= 0:
            raise ValueError("distillation temperature must be positive")
        if self.method not in _METHODS:
            raise ValueError(f"unknown CIL method {self.method!r}")


@dataclass
class CilModel:
    """Frozen extractor plus the growing head; ``seen_classes`` maps head
    rows to global class ids (row i predicts seen_classes[i]).

    ``feature_tau`` optionally L2-normalizes penultimate features and
    divides them by the given temperature before the head, the transform
    used by the normalized-feature fine-tuner (train and test alike).
    """

    extractor: Extractor
    head: LinearHead
    seen_classes: list[int] = field(default_factory=list)
    feature_tau: float | None = None

    @classmethod
    def fresh(cls, extractor: Extractor, dim: int) -> "CilModel":
        return cls(extractor, LinearHead.empty(dim), [])

    def class_to_row(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.seen_classes)}

    def penultimate(self, X: np.ndarray) -> np.ndarray:
        Z = self.extractor.extract(X)
        if self.feature_tau:
            norms = np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
            Z = Z / (norms * self.feature_tau)
        return Z

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.head.logits(self.penultimate(X))


def _distill_grads(
    Z_new: np.ndarray, P_old: np.ndarray, T: float
) -> tuple[float, np.ndarray]:
    """KL(P_old || softmax(Z_new/T)) * T^2, mean over rows, with dL/dZ_new."""
    n, c_old = P_old.shape
    Q = softmax_rows(Z_new[:, :c_old], T)
    logq = np.log(np.maximum(Q, 1e-300))
    logp = np.log(np.maximum(P_old, 1e-300))
    loss = float((P_old * (logp - logq)).sum(axis=1).mean() * T * T)
    G = np.zeros_like(Z_new)
    G[:, :c_old] = T * (Q - P_old) / n
    return loss, G


def train_task(
    model: CilModel,
    stream: TaskStream,
    t: int,
    mem: MemoryBuffer,
    cfg: CilConfig,
    rng: RngStream,
    log_sink: list | None = None,
) -> tuple[CilModel, MemoryBuffer]:
    """Train step t (1-based) and rebalance the replay memory.

    ``mem`` must reflect steps < t; the returned buffer covers classes
    through t.  The head is expanded before training and, for the WA
    method with t > 1, aligned afterwards.
    """
    task = stream.tasks[t - 1]
    if task.train.n == 0:
        raise ValueError(f"task {t} has an empty train set")

    fbc = features_by_class(stream, t)
    mem_X_raw, mem_y = memory_rows(mem, fbc)

    old_count = model.head.n_classes
    old_head = model.head.clone() if (cfg.method != "replay" and t > 1) else None

    head = expand_head(
        model.head, len(task.classes), cfg.head_init, rng.child(f"init-t{t}")
    )
    seen = list(model.seen_classes) + list(task.classes)
    row_of = {c: i for i, c in enumerate(seen)}

    X_raw = np.concatenate([task.train.features, mem_X_raw]) if mem_X_raw.size else task.train.features
    y = np.concatenate([task.train.labels, mem_y]) if mem_y.size else task.train.labels
    X = model.extractor.extract(X_raw)
    y_rows = np.array([row_of[int(c)] for c in y], dtype=np.int64)
    if old_head is not None:
        P_old = softmax_rows(old_head.logits(X), cfg.distill_temperature)

    n = X.shape[0]
    iters = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs_per_task * iters
    state = SgdState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs_per_task):
        perm = rng.child(f"epoch-t{t}-{epoch}").gen.permutation(n)
        epoch_loss = 0.0
        for it in range(iters):
            sel = perm[it * cfg.batch_size : (it + 1) * cfg.batch_size]
            bx, by = X[sel], y_rows[sel]
            loss, dW, db = ce_loss(head, bx, by)
            if old_head is not None and cfg.distill_weight != 0.0:
                dl, G = _distill_grads(head.logits(bx), P_old[sel], cfg.distill_temperature)
                loss += cfg.distill_weight * dl
                dW += cfg.distill_weight * (G.T @ bx)
                db += cfg.distill_weight * G.sum(axis=0)
            sgd_step(state, head, dW, db, step, total_steps)
            epoch_loss += loss
            step += 1
        if log_sink is not None:
            preds = np.argmax(head.logits(X), axis=1)
            log_sink.append(
                {
                    "task": t,
                    "epoch": epoch,
                    "loss": epoch_loss / iters,
                    "lr": cosine_lr(cfg.lr0, step, total_steps),
                    "train_acc": float((preds == y_rows).mean()),
                }
            )

    if cfg.method == "replay_distill_wa" and t > 1:
        head = weight_align(head, list(range(old_count)), list(range(old_count, len(seen))))

    new_model = CilModel(model.extractor, head, seen)
    new_mem = rebalance_memory(
        mem, stream, t, fbc, cfg.exemplar_strategy, rng.child(f"mem-t{t}")
    )
    return new_model, new_mem


def evaluate_accuracy(model: CilModel, test: FeatureDataset) -> float:
    """Fraction of rows whose argmax logit matches the label (ties go to
    the lowest class index).  Labels outside the seen set are an error."""
    row_of = model.class_to_row()
    unseen = set(np.unique(test.labels)) - set(row_of)
    if unseen:
        raise ValueError(f"labels not yet seen: {sorted(unseen)}")
    preds = np.argmax(model.logits(test.features), axis=1)
    pred_classes = np.array(model.seen_classes)[preds]
    return float((pred_classes == test.labels).mean())


def msp_confidences(model: CilModel, X: np.ndarray) -> np.ndarray:
    """Per-row max softmax probability under the model head."""
    return softmax_rows(model.logits(X)).max(axis=1)
