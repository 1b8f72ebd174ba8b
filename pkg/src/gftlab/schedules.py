"""Guidance-scale / pseudo-temperature conversions, per-step beta schedules, metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def beta_of_scale(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("guidance scale must be >= 0")
    out = 1.0 / (1.0 + s)
    return float(out) if out.ndim == 0 else out


def scale_of_beta(beta):
    beta = np.asarray(beta, dtype=np.float64)
    if np.any((beta <= 0) | (beta > 1)):
        raise ValueError("beta must lie in (0, 1]")
    out = 1.0 / beta - 1.0
    return float(out) if out.ndim == 0 else out


def _check(n, length):
    if length < 2:
        raise ValueError("schedule length N must be >= 2")
    n = np.asarray(n, dtype=np.float64)
    if np.any((n < 0) | (n > length - 1)):
        raise ValueError("step index outside [0, N-1]")
    return n / (length - 1)


def pyramid_beta(n, length, alpha, beta0):
    frac = _check(n, length)
    out = 1.0 / (frac**alpha * (1.0 / beta0 - 1.0) + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def power_cosine_beta(n, length, alpha, beta0):
    frac = _check(n, length)
    ramp = (1.0 - np.cos(frac**alpha * np.pi)) / 2.0
    out = 1.0 / (ramp * (1.0 / beta0 - 1.0) + 1.0)
    return float(out) if np.ndim(out) == 0 else out


SCHEDULE_KINDS = ("constant", "pyramid", "power-cosine")


@dataclass(frozen=True)
class BetaSchedule:
    kind: str = "constant"
    beta0: float = 1.0
    alpha: float = 1.0
    length: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.kind != "constant" and self.length < 2:
            raise ValueError("non-constant schedules need N >= 2")

    def betas(self, beta0=None) -> np.ndarray:
        """Per-step betas, shape (N,) or (B, N) when ``beta0`` is an array."""
        b0 = self.beta0 if beta0 is None else np.asarray(beta0, dtype=np.float64)
        b0 = np.asarray(b0, dtype=np.float64)[..., None]
        n = np.arange(self.length)
        if self.kind == "constant":
            return np.broadcast_to(b0, b0.shape[:-1] + (self.length,)).copy()
        frac = n / (self.length - 1)
        if self.kind == "pyramid":
            ramp = frac**self.alpha
        else:
            ramp = (1.0 - np.cos(frac**self.alpha * np.pi)) / 2.0
        return 1.0 / (ramp * (1.0 / b0 - 1.0) + 1.0)


# -- metrics -----------------------------------------------------------------------


def _pair(p, q, atol=1e-8):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if abs(d.sum() - 1.0) > atol:
            raise ValueError(f"{name} sums to {d.sum()}, not 1")
    return p, q


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def grid_kl(p, q, floor=1e-12) -> float:
    p, q = _pair(p, q)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], floor)))))


def field_rmse(f, g, weights) -> float:
    """sqrt(sum_i w_i |f_i - g_i|^2 / sum_i w_i) over grid points i."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if f.shape != g.shape or f.shape[0] != w.shape[0]:
        raise ValueError("field and weight shapes do not match")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    sq = ((f - g) ** 2).reshape(f.shape[0], -1).sum(axis=1)
    return float(np.sqrt(np.sum(w * sq) / np.sum(w)))


def field_rms(f, weights) -> float:
    return field_rmse(f, np.zeros_like(np.asarray(f, dtype=np.float64)), weights)
