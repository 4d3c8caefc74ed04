"""Conflict detection, constrained projection and entropy-based hard-sample selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

DEFAULT_DELTA = 1e-12


@dataclass
class SurgeryConfig:
    epsilon: float = 0.01
    lambda_image: float = 0.5
    lambda_tabular: float = 0.5
    enable_cgs: bool = True
    enable_ugg: bool = True
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        for name in ("lambda_image", "lambda_tabular"):
            lam = getattr(self, name)
            if not 0 < lam <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {lam}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    def lam(self, modality: str) -> float:
        return self.lambda_image if modality == "I" else self.lambda_tabular


@dataclass
class SurgeryResult:
    g_tilde: np.ndarray
    v: float
    cos_raw: float
    applied: bool


def _pair(g, g_p):
    g = np.asarray(g, dtype=np.float64).ravel()
    g_p = np.asarray(g_p, dtype=np.float64).ravel()
    if g.shape != g_p.shape:
        raise ShapeError(f"gradient length mismatch: {g.size} vs {g_p.size}")
    return g, g_p


def cosine_similarity(g, g_p, delta: float = DEFAULT_DELTA) -> float:
    """Cosine of the angle between two gradients; 0 if either norm is below ``delta``."""
    g, g_p = _pair(g, g_p)
    ng, np_ = math.sqrt(g @ g), math.sqrt(g_p @ g_p)
    if ng < delta or np_ < delta:
        return 0.0
    return float(min(1.0, max(-1.0, (g @ g_p) / (ng * np_))))


def project_gradient(g, g_p, epsilon: float = 0.0, delta: float = DEFAULT_DELTA) -> SurgeryResult:
    """Nearest point to ``g`` in the half-space ``g_p . x >= epsilon``.

    Closed form: ``x = g + v g_p`` with ``v = max(0, (epsilon - g_p.g) / |g_p|^2)``.
    When ``|g_p|^2 < delta`` the constraint direction is undefined and ``g``
    is returned untouched.
    """
    g, g_p = _pair(g, g_p)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(g_p)) and math.isfinite(epsilon)):
        raise ValueError("project_gradient received non-finite input")
    cos = cosine_similarity(g, g_p, delta)
    sq = float(g_p @ g_p)
    if sq < delta:
        return SurgeryResult(g, 0.0, cos, False)
    v = max(0.0, (epsilon - float(g_p @ g)) / sq)
    if v > 0:
        return SurgeryResult(g + v * g_p, v, cos, True)
    return SurgeryResult(g, 0.0, cos, False)


def orthogonalize(g, g_p, delta: float = DEFAULT_DELTA) -> SurgeryResult:
    """Remove the component of ``g`` along ``g_p`` regardless of sign.

    Stand-in for an orthogonalising baseline; ``v`` may be negative here.
    """
    g, g_p = _pair(g, g_p)
    cos = cosine_similarity(g, g_p, delta)
    sq = float(g_p @ g_p)
    if sq < delta:
        return SurgeryResult(g, 0.0, cos, False)
    v = -float(g_p @ g) / sq
    return SurgeryResult(g + v * g_p, v, cos, v != 0.0)


def sample_entropy(p, n_classes: int | None = None) -> float:
    """Shannon entropy (nats) of one probability row, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if n_classes is not None and p.size != n_classes:
        raise ValueError(f"distribution has {p.size} entries, expected {n_classes}")
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("entropy needs a finite, non-negative distribution summing to 1")
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return min(max(h, 0.0), math.log(p.size))


def entropies(probs) -> np.ndarray:
    """Row-wise entropy for a batch of probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] == 0:
        raise ValueError(f"expected a [B x Y] probability matrix, got shape {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("every row must be a probability distribution")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1), 0.0, math.log(probs.shape[1]))


def n_selected(batch_size: int, lam: float) -> int:
    # 1e-12 keeps e.g. 0.3 * 10 from rounding up to 4
    return max(1, math.ceil(lam * batch_size - 1e-12))


def select_hard(entropy_values, lam: float) -> np.ndarray:
    """Indices of the ``max(1, ceil(lam * B))`` highest entropies.

    Ties go to the smaller index; the result is sorted ascending.
    """
    h = np.asarray(entropy_values, dtype=np.float64).ravel()
    if h.size == 0:
        raise ValueError("cannot select hard samples from an empty batch")
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    k = n_selected(h.size, lam)
    # stable sort on -h keeps index order among equal entropies
    order = np.argsort(-h, kind="stable")
    return np.sort(order[:k])
