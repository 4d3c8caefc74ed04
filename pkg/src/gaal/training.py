"""Alternating unimodal training over a shared head, with cross-modal gradient surgery."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import ArrayData, BatchPlan
from .numerics import RngStream, softmax_rows
from .surgery import (
    SurgeryConfig,
    SurgeryResult,
    cosine_similarity,
    entropies,
    orthogonalize,
    project_gradient,
    select_hard,
)

log = logging.getLogger(__name__)

BASELINE_MODES = ("gaal", "joint", "alt_no_surgery", "orthogonal")

# child stream ids under the root seed
STREAM_DATA, STREAM_INIT, STREAM_SHUFFLE, STREAM_SPLIT = 1, 2, 3, 4


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_encoder: float = 1e-2
    lr_head: float = 1e-2
    momentum: float = 0.9
    surgery: SurgeryConfig = field(default_factory=SurgeryConfig)
    seed: int = 0
    baseline_mode: str = "gaal"
    order: tuple[str, ...] = ("I", "T")
    # ("I",) or ("T",) trains a single-modality model
    modalities: tuple[str, ...] = ("I", "T")
    hidden: tuple[int, ...] = (64,)
    latent: int = 32
    patience: int = 10
    fusion_weight: float = 0.5
    # start both branches from identical weights (duplicated-modality checks)
    tie_init: bool = False

    def __post_init__(self):
        self.order = tuple(self.order)
        self.modalities = tuple(self.modalities)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr_encoder > 0 and self.lr_head > 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ValueError(f"unknown baseline mode {self.baseline_mode!r}; expected one of {BASELINE_MODES}")
        if sorted(self.order) != ["I", "T"]:
            raise ValueError(f"order must be a permutation of ('I', 'T'), got {self.order}")
        if not self.modalities or any(m not in ("I", "T") for m in self.modalities) or len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"modalities must be a non-empty subset of ('I', 'T'), got {self.modalities}")
        if self.baseline_mode == "joint" and len(self.modalities) != 2:
            raise ValueError("the joint baseline needs both modalities")
        if self.latent < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0 <= self.fusion_weight <= 1:
            raise ValueError(f"fusion_weight must lie in [0, 1], got {self.fusion_weight}")
        self.surgery.validate()

    @property
    def cgs_active(self) -> bool:
        return self.baseline_mode == "orthogonal" or (self.baseline_mode == "gaal" and self.surgery.enable_cgs)


@dataclass
class StepDiag:
    t: int
    modality: str
    loss: float
    cos_raw: float | None = None
    v: float | None = None
    applied: bool | None = None
    n_hard: int | None = None
    g_norm: float = 0.0
    gp_norm: float | None = None
    # not part of the CSV log
    gp_dot_after: float | None = None
    gp_dot_raw: float | None = None
    cos_prev_update: float | None = None
    conflict_cos: float | None = None

    CSV_FIELDS = ("t", "modality", "loss", "cos_raw", "v", "applied", "n_hard", "g_norm", "gp_norm")

    def csv_row(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, bool):
                return "1" if x else "0"
            if isinstance(x, (int, np.integer)):
                return str(int(x))
            if isinstance(x, str):
                return x
            return repr(float(x))

        return [fmt(getattr(self, k)) for k in self.CSV_FIELDS]


class MomentumSGD:
    """Momentum SGD for encoder tensors; the head gets plain SGD elsewhere."""

    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, list[np.ndarray]] = {}

    def step(self, key: str, params: M.MlpParams, grads: M.MlpParams) -> M.MlpParams:
        flat_p = list(params.tensors())
        flat_g = list(grads.tensors())
        vel = self.velocity.get(key)
        if vel is None:
            vel = [np.zeros_like(p) for p in flat_p]
        vel = [self.momentum * v + g for v, g in zip(vel, flat_g)]
        self.velocity[key] = vel
        new = [p - self.lr * v for p, v in zip(flat_p, vel)]
        return M.MlpParams(new[0::2], new[1::2])


def reference_gradient(state: M.ModelState, modality: str, x, labels, hard_idx) -> np.ndarray:
    """Mean per-sample head gradient of ``modality`` over ``hard_idx``."""
    hard_idx = np.asarray(hard_idx, dtype=np.int64).ravel()
    if hard_idx.size == 0:
        raise ValueError("reference gradient needs at least one sample")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if hard_idx.min() < 0 or hard_idx.max() >= x.shape[0]:
        raise IndexError("hard sample index outside the batch")
    res = M.backward(state, modality, x[hard_idx], labels[hard_idx])
    return res.head_grad_per_sample.mean(axis=0)


def _check_finite(loss: float, grad: np.ndarray, t: int, what: str) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at iteration {t} ({what})")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at iteration {t} ({what})")


def _apply_head(head: M.SharedClassifier, update: np.ndarray, lr: float) -> M.SharedClassifier:
    return head.with_vector(head.vector() - lr * update)


def gaal_step(state: M.ModelState, batch: ArrayData, modality: str, cfg: TrainConfig, optimizer: MomentumSGD | None = None, t: int = 1):
    """One alternating step for ``modality`` on ``batch``.

    Returns ``(new_state, diag, applied_head_gradient)``.
    """
    M.check_modality(modality)
    if optimizer is None:
        optimizer = MomentumSGD(cfg.lr_encoder, cfg.momentum)
    x = batch.modality(modality)
    y = batch.labels

    res = M.backward(state, modality, x, y)
    _check_finite(res.loss, res.head_vector, t, modality)
    new_enc = optimizer.step(modality, state.encoder(modality), res.encoder_grads)
    state = state.with_encoder(modality, new_enc)
    g = res.head_vector

    diag = StepDiag(t=t, modality=modality, loss=res.loss, g_norm=float(np.linalg.norm(g)))
    g_tilde = g
    other = M.other(modality)
    if other in cfg.modalities:
        sc = cfg.surgery
        x_o = batch.modality(other)
        if sc.enable_ugg:
            p_o = softmax_rows(M.forward_logits(state, other, x_o))
            idx = select_hard(entropies(p_o), sc.lam(other))
        else:
            idx = np.arange(len(y))
        g_p = reference_gradient(state, other, x_o, y, idx)
        _check_finite(0.0, g_p, t, other)
        diag.n_hard = int(idx.size)
        diag.gp_norm = float(np.linalg.norm(g_p))
        diag.gp_dot_raw = float(g_p @ g)
        if cfg.baseline_mode == "orthogonal":
            out = orthogonalize(g, g_p, sc.delta)
        elif cfg.cgs_active:
            out = project_gradient(g, g_p, sc.epsilon, sc.delta)
        else:
            out = SurgeryResult(g, 0.0, cosine_similarity(g, g_p, sc.delta), False)
        g_tilde = out.g_tilde
        diag.cos_raw, diag.v, diag.applied = out.cos_raw, out.v, out.applied
        diag.gp_dot_after = float(g_p @ g_tilde)
    state = state.replace(head=_apply_head(state.head, g_tilde, cfg.lr_head))
    return state, diag, g_tilde


def joint_step(state: M.ModelState, batch: ArrayData, cfg: TrainConfig, optimizer: MomentumSGD, t: int = 1, trace_conflict: bool = False):
    """One update of the naive joint baseline (fused head over concatenated latents)."""
    res = M.joint_backward(state, batch.x_image, batch.x_tabular, batch.labels)
    _check_finite(res.loss, res.head_grad.vector(), t, "joint")
    diag = StepDiag(t=t, modality="J", loss=res.loss, g_norm=float(np.linalg.norm(res.head_grad.vector())))
    if trace_conflict:
        diag.conflict_cos = image_conflict_cosine(state, res, batch.labels)
    enc_i = optimizer.step("I", state.encoder_image, res.image_grads)
    enc_t = optimizer.step("T", state.encoder_tabular, res.tabular_grads)
    head = _apply_head(state.head, res.head_grad.vector(), cfg.lr_head)
    return M.ModelState(enc_i, enc_t, head), diag


def image_conflict_cosine(state: M.ModelState, res: M.JointBackwardResult, labels) -> float:
    """Cosine between the multimodal gradient and the image-branch gradient.

    The fused head splits exactly into branch logits ``f_m = 2 W_m u_m + b``
    whose mean is the fused logit.  Both gradients are taken w.r.t. the image
    branch's own parameters (its encoder and the map ``u_I -> f_I``); in these
    coordinates the multimodal gradient differs from the image one only by the
    logit residual it backpropagates (up to a factor 1/2).
    """
    u_i, u_t = res.latents
    c_i, _ = res.caches
    d = state.latent_dim
    w_branch = 2.0 * state.head.weight[:, :d]
    y = np.asarray(labels)
    b = len(y)
    f_i = u_i @ w_branch.T + state.head.bias
    f_t = 2.0 * (u_t @ state.head.weight[:, d:].T) + state.head.bias

    def branch_grad(r):
        g_enc, _ = M.encoder_backward(state.encoder_image, c_i, (r / b) @ w_branch)
        return np.concatenate([t.ravel() for t in g_enc.tensors()] + [(r.T @ u_i).ravel() / b, r.sum(axis=0) / b])

    r_mm, _ = M.logit_residual(0.5 * (f_i + f_t), y)
    r_img, _ = M.logit_residual(f_i, y)
    return cosine_similarity(branch_grad(r_mm), branch_grad(r_img))


def init_state(cfg: TrainConfig, d_img: int, d_tab: int, n_classes: int) -> M.ModelState:
    chain = list(cfg.hidden) + [cfg.latent]
    rng = RngStream(cfg.seed, STREAM_INIT)
    state = M.init_params([d_img] + chain, [d_tab] + chain, n_classes, rng, fused=cfg.baseline_mode == "joint")
    if cfg.tie_init:
        if d_img != d_tab:
            raise ValueError(f"tie_init needs equal input widths, got {d_img} and {d_tab}")
        head = state.head.copy()
        if state.fused:
            d = state.latent_dim
            head.weight[:, d:] = head.weight[:, :d]
        state = M.ModelState(state.encoder_image, state.encoder_image.copy(), head)
    return state


@dataclass
class EpochMetrics:
    epoch: int
    acc_multi: float
    acc_image: float
    acc_tabular: float
    loss_I: float
    loss_T: float

    FIELDS = ("epoch", "acc_multi", "acc_image", "acc_tabular", "loss_I", "loss_T")

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in self.FIELDS[1:]]


@dataclass
class TrainResult:
    state: M.ModelState
    diags: list[StepDiag]
    epochs: list[EpochMetrics]
    best_epoch: int
    final_state: M.ModelState = None


def selection_score(cfg: TrainConfig, m: EpochMetrics) -> float:
    if len(cfg.modalities) == 1:
        return m.acc_image if cfg.modalities[0] == "I" else m.acc_tabular
    return m.acc_multi


def train(train_data: ArrayData, val_data: ArrayData | None, cfg: TrainConfig, state: M.ModelState | None = None, trace_conflict: bool = False) -> TrainResult:
    """Run alternating (or joint) training with early stopping on validation accuracy.

    Iteration ``t`` runs one modality step; a fresh batch is drawn whenever
    ``t`` is odd (two-modality runs), so both modalities see the same batch.
    """
    from .inference import evaluate_arrays

    cfg.validate()
    if state is None:
        state = init_state(cfg, train_data.x_image.shape[1], train_data.x_tabular.shape[1], train_data.n_classes)
    optimizer = MomentumSGD(cfg.lr_encoder, cfg.momentum)
    plan = BatchPlan(len(train_data), cfg.batch_size, RngStream(cfg.seed, STREAM_SHUFFLE))
    order = [m for m in cfg.order if m in cfg.modalities]
    diags: list[StepDiag] = []
    history: list[EpochMetrics] = []
    best_state, best_score, best_epoch, stale = state, -1.0, 0, 0
    t = 1
    prev_update = None

    for epoch in range(1, cfg.epochs + 1):
        losses = {"I": [], "T": []}
        for idx in plan.batches(epoch):
            batch = train_data.take(idx)
            if cfg.baseline_mode == "joint":
                state, d = joint_step(state, batch, cfg, optimizer, t, trace_conflict)
                diags.append(d)
                losses["I"].append(d.loss)
                losses["T"].append(d.loss)
                t += 1
                continue
            for m in order:
                state, d, upd = gaal_step(state, batch, m, cfg, optimizer, t)
                if prev_update is not None:
                    d.cos_prev_update = cosine_similarity(upd, prev_update)
                prev_update = upd
                diags.append(d)
                losses[m].append(d.loss)
                t += 1
        mean = lambda v: float(np.mean(v)) if v else float("nan")
        rep = evaluate_arrays(state, val_data if val_data is not None else train_data, cfg.fusion_weight)
        em = EpochMetrics(epoch, rep.acc_multi, rep.acc_image, rep.acc_tabular, mean(losses["I"]), mean(losses["T"]))
        history.append(em)
        score = selection_score(cfg, em)
        log.debug("epoch %d score %.4f loss_I %.4f loss_T %.4f", epoch, score, em.loss_I, em.loss_T)
        if val_data is None:
            best_state, best_epoch = state, epoch
            continue
        if score > best_score:
            best_state, best_score, best_epoch, stale = state, score, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(best_state, diags, history, best_epoch, state)
