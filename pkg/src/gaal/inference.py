"""Unimodal and late-fused prediction, accuracy reports, and the joint-learning conflict trace."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import ArrayData
from .numerics import ShapeError, as_matrix, softmax_rows


def modality_logits(state: M.ModelState, modality: str, x) -> np.ndarray:
    """Logits of one branch.

    A fused head ``W_I u_I + W_T u_T + b`` is read as the mean of the branch
    logits ``2 W_m u_m + b``, so joint models fit the same late-fusion form.
    """
    if not state.fused:
        return M.forward_logits(state, modality, x)
    u, _ = M.encode(state.encoder(modality), x)
    d = state.latent_dim
    w = state.head.weight[:, :d] if modality == "I" else state.head.weight[:, d:]
    return 2.0 * (u @ w.T) + state.head.bias


def unimodal_predict(state: M.ModelState, modality: str, x) -> np.ndarray:
    return softmax_rows(modality_logits(state, M.check_modality(modality), x))


def fuse_logits(logits_image, logits_tabular, weight: float = 0.5) -> np.ndarray:
    li, lt = as_matrix(logits_image), as_matrix(logits_tabular)
    if li.shape != lt.shape:
        raise ShapeError(f"cannot fuse logits of shapes {li.shape} and {lt.shape}")
    if weight == 0.5:
        return 0.5 * (li + lt)
    return weight * li + (1.0 - weight) * lt


def fused_predict(state: M.ModelState, x_image, x_tabular, weight: float = 0.5) -> np.ndarray:
    """``softmax(w f_I + (1 - w) f_T)``, with ``w = 1/2`` by default."""
    xi, xt = as_matrix(x_image), as_matrix(x_tabular)
    if xi.shape[0] != xt.shape[0]:
        raise ShapeError(f"modalities have different row counts: {xi.shape[0]} vs {xt.shape[0]}")
    return softmax_rows(fuse_logits(modality_logits(state, "I", xi), modality_logits(state, "T", xt), weight))


def argmax_rows(p) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(as_matrix(p), axis=1)


def accuracy(p, labels) -> float:
    p = as_matrix(p)
    y = np.asarray(labels).ravel()
    if y.size == 0 or p.shape[0] == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if p.shape[0] != y.size:
        raise ShapeError(f"{p.shape[0]} predictions for {y.size} labels")
    return float(np.mean(argmax_rows(p) == y))


@dataclass
class PredictionSet:
    logits_I: np.ndarray
    logits_T: np.ndarray
    p_I: np.ndarray
    p_T: np.ndarray
    p_fused: np.ndarray
    labels: np.ndarray


def predict_all(state: M.ModelState, data: ArrayData, weight: float = 0.5) -> PredictionSet:
    li = modality_logits(state, "I", data.x_image)
    lt = modality_logits(state, "T", data.x_tabular)
    pf = softmax_rows(fuse_logits(li, lt, weight))
    return PredictionSet(li, lt, softmax_rows(li), softmax_rows(lt), pf, np.asarray(data.labels))


@dataclass
class EvalReport:
    acc_multi: float
    acc_image: float
    acc_tabular: float
    per_class: tuple[float, ...]
    n_test: int

    CSV_FIELDS = ("acc_multi", "acc_image", "acc_tabular", "n_test")

    def to_text(self) -> str:
        lines = [
            f"acc_multi={self.acc_multi!r}",
            f"acc_image={self.acc_image!r}",
            f"acc_tabular={self.acc_tabular!r}",
            f"n_test={self.n_test}",
        ]
        lines += [f"acc_class_{c}={a!r}" for c, a in enumerate(self.per_class)]
        return "\n".join(lines) + "\n"

    def csv_row(self) -> list[str]:
        return [repr(self.acc_multi), repr(self.acc_image), repr(self.acc_tabular), str(self.n_test)]


def report(preds: PredictionSet) -> EvalReport:
    y = preds.labels
    hit = argmax_rows(preds.p_fused) == y
    n_classes = preds.p_fused.shape[1]
    per_class = tuple(float(hit[y == c].mean()) if np.any(y == c) else float("nan") for c in range(n_classes))
    return EvalReport(
        accuracy(preds.p_fused, y),
        accuracy(preds.p_I, y),
        accuracy(preds.p_T, y),
        per_class,
        int(y.size),
    )


def evaluate_arrays(state: M.ModelState, data: ArrayData, weight: float = 0.5) -> EvalReport:
    return report(predict_all(state, data, weight))


# -- conflict diagnostic ---------------------------------------------------


@dataclass
class ConflictTrace:
    cosines: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def negative_fraction(self) -> float:
        if self.cosines.size == 0:
            return 0.0
        return float(np.mean(self.cosines < 0))


def histogram(cosines, n_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.clip(cosines, -1.0, 1.0), bins=n_bins, range=(-1.0, 1.0))
    return counts, edges


def conflict_trace(train_data: ArrayData, val_data: ArrayData | None, cfg, n_bins: int = 20) -> ConflictTrace:
    """Train the naive joint baseline and record, per step, the cosine between
    the multimodal gradient and the image-branch gradient."""
    from .training import train

    cfg = dataclasses.replace(cfg, baseline_mode="joint", modalities=("I", "T"))
    result = train(train_data, val_data, cfg, trace_conflict=True)
    cos = np.array([d.conflict_cos for d in result.diags], dtype=np.float64)
    counts, edges = histogram(cos, n_bins)
    return ConflictTrace(cos, edges, counts)
