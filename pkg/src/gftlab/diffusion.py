"""Continuous 2-D testbed: VP cosine schedule, Gaussian-mixture oracle, losses, DDIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .models import NULL_CLASS
from .prng import Prng
from .schedules import beta_of_scale, field_rms, field_rmse

DROPOUT = 0.10
ALPHA_GUARD = 1e-8


def alpha_sigma(t):
    """Variance-preserving cosine pair, exact at both endpoints."""
    t = np.asarray(t, dtype=np.float64)
    alpha = np.where(t >= 1.0, 0.0, np.cos(0.5 * np.pi * t))
    sigma = np.sin(0.5 * np.pi * t)
    return alpha, sigma


def forward_diffuse(x, eps, t):
    alpha, sigma = alpha_sigma(t)
    return alpha[..., None] * x + sigma[..., None] * eps


# -- mixture oracle ------------------------------------------------------------------


@dataclass
class ConditionalMixture2D:
    """Per-class diagonal Gaussian mixtures stored as one flat component list."""

    prior: np.ndarray  # (C,)
    comp_class: np.ndarray  # (M,)
    comp_weight: np.ndarray  # (M,) weights within their class
    means: np.ndarray  # (M, 2)
    variances: np.ndarray  # (M, 2)

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.comp_class = np.asarray(self.comp_class, dtype=np.int64)
        self.comp_weight = np.asarray(self.comp_weight, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1, 2)
        if abs(self.prior.sum() - 1.0) > 1e-12 or np.any(self.prior < 0):
            raise ValueError("class prior must be nonnegative and sum to 1")
        if np.any(self.comp_weight < 0) or np.any(self.variances <= 0):
            raise ValueError("weights must be nonnegative and variances positive")
        for k in range(self.num_classes):
            total = self.comp_weight[self.comp_class == k].sum()
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"component weights of class {k} sum to {total}")

    @property
    def num_classes(self) -> int:
        return self.prior.shape[0]

    @classmethod
    def default(cls, radius=2.0, tau=0.35):
        """3 classes, 1-2 components each, means on a circle."""
        angles = 2.0 * np.pi * np.arange(5) / 5
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(
            prior=np.full(3, 1.0 / 3.0),
            comp_class=[0, 0, 1, 2, 2],
            comp_weight=[0.5, 0.5, 1.0, 0.5, 0.5],
            means=means,
            variances=np.full((5, 2), tau**2),
        )

    def config(self) -> dict:
        return {"prior": self.prior.tolist(), "comp_class": self.comp_class.tolist(),
                "comp_weight": self.comp_weight.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_config(cls, cfg: dict):
        return cls(**cfg)

    def _log_weights(self, c):
        c = np.asarray(c, dtype=np.int64)
        uncond = np.log(self.prior[self.comp_class] * self.comp_weight)
        with np.errstate(divide="ignore"):
            cond = np.where(self.comp_class[None, :] == c[:, None], np.log(self.comp_weight)[None, :], -np.inf)
        return np.where((c == NULL_CLASS)[:, None], uncond[None, :], cond)

    def _components(self, x, t, c):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        alpha, sigma = alpha_sigma(t)
        mu = alpha[:, None, None] * self.means[None]  # (B, M, 2)
        var = alpha[:, None, None] ** 2 * self.variances[None] + sigma[:, None, None] ** 2
        diff = x[:, None, :] - mu
        log_n = -0.5 * np.sum(diff**2 / var + np.log(2.0 * np.pi * var), axis=-1)
        log_joint = log_n + self._log_weights(c)
        return diff, var, log_joint

    def log_density(self, x, t, c):
        _, _, log_joint = self._components(x, t, c)
        return logsumexp(log_joint, axis=1)

    def score(self, x, t, c):
        diff, var, log_joint = self._components(x, t, c)
        resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        return np.sum(resp[..., None] * (-diff / var), axis=1)

    def sample(self, prng: Prng, n: int):
        """Draw (x, c) pairs from the joint."""
        c = prng.categorical(np.broadcast_to(self.prior, (n, self.num_classes)))
        probs = (self.comp_class[None, :] == c[:, None]) * self.comp_weight[None, :]
        comp = prng.categorical(probs)
        z = prng.normal((n, 2))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z, c


def analytic_scores(mix: ConditionalMixture2D, x_t, t, c):
    return mix.score(x_t, t, c)


def cfg_combine(eps_c, eps_u, s):
    """eps_c + s (eps_c - eps_u), the same as (1+s) eps_c - s eps_u."""
    s = np.asarray(s, dtype=np.float64)
    if isinstance(eps_c, ad.Node) or isinstance(eps_u, ad.Node):
        s_col = s[..., None] if s.ndim else s
        return ad.add(eps_c, ad.mul(ad.sub(eps_c, eps_u), s_col))
    eps_c, eps_u = np.asarray(eps_c), np.asarray(eps_u)
    s_col = s[..., None] if s.ndim and s.ndim < eps_c.ndim else s
    return eps_c + s_col * (eps_c - eps_u)


def theorem1_target(mix: ConditionalMixture2D, x_t, t, c, beta):
    """Optimal guidance-free noise prediction for pseudo-temperature beta."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    b = x_t.shape[0]
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (b,))
    if np.any(beta <= 0):
        raise ValueError("beta must be > 0")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
    _, sigma = alpha_sigma(t)
    s_c = mix.score(x_t, t, c)
    s_u = mix.score(x_t, t, np.full(b, NULL_CLASS))
    inv = (1.0 / beta)[:, None]
    return -sigma[:, None] * (inv * s_c - (inv - 1.0) * s_u)


# -- losses ----------------------------------------------------------------------------


@dataclass
class DiffusionDraws:
    beta: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    mask: np.ndarray

    @property
    def masked_fraction(self) -> float:
        return float(np.mean(self.mask))


def draw_diffusion(prng: Prng, batch: int, dim=2, dropout=DROPOUT, beta=None) -> DiffusionDraws:
    """Per-sample beta, t, noise and null-condition mask, in that order.

    beta ~ 1 - U[0,1) so it never hits 0; a float ``beta`` pins every sample.
    """
    b = 1.0 - prng.uniform(batch)
    if beta is not None:
        b = np.full(batch, float(beta))
    t = prng.uniform(batch)
    eps = prng.normal((batch, dim))
    mask = prng.bernoulli(dropout, batch)
    return DiffusionDraws(b, t, eps, mask)


def _reduce(per_sample, weights):
    if weights is None:
        return ad.mean(per_sample)
    w = np.asarray(weights, dtype=np.float64)
    return ad.sum_(ad.mul(per_sample, w / w.sum()))


def _inputs(x, c, draws):
    x_t = forward_diffuse(x, draws.eps, draws.t)
    c_in = np.where(draws.mask, NULL_CLASS, c)
    # a zero beta gives the live branch no weight; feed 1 to stay in the net's domain
    beta_in = np.where(draws.mask | (draws.beta == 0.0), 1.0, draws.beta)
    return x_t, c_in, beta_in


def gft_diffusion_loss(net, x, c, draws: DiffusionDraws, weights=None, uncond=None):
    """mean |beta*eps_s(x_t|c_null, beta_in) + (1-beta)*sg[eps_u(x_t)] - eps|^2.

    Masked samples feed beta_in = 1.  ``uncond`` substitutes a precomputed
    unconditional prediction for the stopped branch.
    """
    x_t, c_in, beta_in = _inputs(x, c, draws)
    live = net(x_t, draws.t, c_in, beta_in)
    if uncond is None:
        with ad.no_grad():
            uncond = net(x_t, draws.t, NULL_CLASS, 1.0)
    frozen = ad.stop_gradient(uncond)
    beta = draws.beta[:, None]
    pred = ad.add(ad.mul(live, beta), ad.mul(frozen, 1.0 - beta))
    per = ad.sum_(ad.square(ad.sub(pred, draws.eps)), axis=1)
    return _reduce(per, weights)


def cfg_diffusion_loss(net, x, c, draws: DiffusionDraws, weights=None):
    x_t, c_in, _ = _inputs(x, c, draws)
    pred = net(x_t, draws.t, c_in, 1.0)
    per = ad.sum_(ad.square(ad.sub(pred, draws.eps)), axis=1)
    return _reduce(per, weights)


def uncond_mse_loss(net, x, draws: DiffusionDraws):
    """Per-coordinate mean squared error of the unconditional model."""
    x_t = forward_diffuse(x, draws.eps, draws.t)
    pred = net(x_t, draws.t, NULL_CLASS, 1.0)
    return ad.mean(ad.square(ad.sub(pred, draws.eps)))


def gft_diffusion_step(net, x, c, prng: Prng, dropout=DROPOUT, beta=None):
    draws = draw_diffusion(prng, x.shape[0], x.shape[1], dropout, beta)
    return gft_diffusion_loss(net, x, c, draws), draws


def cfg_diffusion_step(net, x, c, prng: Prng, dropout=DROPOUT):
    draws = draw_diffusion(prng, x.shape[0], x.shape[1], dropout)
    return cfg_diffusion_loss(net, x, c, draws), draws


@dataclass
class DistillDraws:
    s: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def draw_distill(prng: Prng, batch: int, s_range=(0.0, 3.0), dim=2) -> DistillDraws:
    lo, hi = s_range
    s = lo + (hi - lo) * prng.uniform(batch)
    t = prng.uniform(batch)
    eps = prng.normal((batch, dim))
    return DistillDraws(s, t, eps)


def guidance_distillation_loss(student, teacher, x, c, draws: DistillDraws, weights=None):
    """mean |eps_student(x_t|c, 1/(1+s)) - [(1+s) eps_c - s eps_u]|^2 with a frozen teacher."""
    x_t = forward_diffuse(x, draws.eps, draws.t)
    with ad.no_grad():
        eps_c = teacher(x_t, draws.t, c, 1.0).value
        eps_u = teacher(x_t, draws.t, NULL_CLASS, 1.0).value
    target = cfg_combine(eps_c, eps_u, draws.s)
    pred = student(x_t, draws.t, c, beta_of_scale(draws.s))
    per = ad.sum_(ad.square(ad.sub(pred, target)), axis=1)
    return _reduce(per, weights)


def guidance_distillation_step(student, teacher, x, c, prng: Prng, s_range=(0.0, 3.0)):
    draws = draw_distill(prng, x.shape[0], s_range, x.shape[1])
    return guidance_distillation_loss(student, teacher, x, c, draws), draws


# -- sampling -------------------------------------------------------------------------


def gft_field(net):
    def field(x, t, c, beta):
        with ad.no_grad():
            return net(x, t, c, beta).value

    return field


def cfg_field(net):
    """CFG sampling field at s = 1/beta - 1, two network calls per evaluation."""

    def field(x, t, c, beta):
        s = 1.0 / np.asarray(beta, dtype=np.float64) - 1.0
        with ad.no_grad():
            eps_c = net(x, t, c, 1.0).value
            eps_u = net(x, t, NULL_CLASS, 1.0).value
        return cfg_combine(eps_c, eps_u, s)

    return field


def ddim_sample(field, c, beta, steps: int, prng: Prng, n: int = 1, dim: int = 2):
    """Deterministic DDIM on the uniform grid t_k = k/K, from x_1 ~ N(0, I)."""
    if steps < 1:
        raise ValueError("need at least one step")
    if not 0.0 < float(beta) <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    x = prng.normal((n, dim))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    grid = np.arange(steps + 1) / steps
    for k in range(steps, 0, -1):
        t, t_next = grid[k], grid[k - 1]
        a, s = alpha_sigma(t)
        a_next, s_next = alpha_sigma(t_next)
        eps = field(x, np.full(n, t), c, np.full(n, float(beta)))
        x0 = (x - s * eps) / max(float(a), ALPHA_GUARD)
        x = a_next * x0 + s_next * eps
    return x


# -- field evaluation -----------------------------------------------------------------


def eval_grid(half_width=4.0, points=41):
    ax = np.linspace(-half_width, half_width, points)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def field_report(net, mix, betas, ts, grid, c=0):
    """Model vs optimal guidance-free field on a grid.

    Returns (rows, summary): rows hold (beta, t, x, y, model_x, model_y,
    target_x, target_y); summary maps (beta, t) to absolute and relative
    density-weighted RMSE, weighted by p_t(x | c).
    """
    rows, summary = [], {}
    g = grid.shape[0]
    for beta in betas:
        for t in ts:
            tt = np.full(g, float(t))
            with ad.no_grad():
                model = net(grid, tt, np.full(g, c), np.full(g, float(beta))).value
            target = theorem1_target(mix, grid, tt, np.full(g, c), float(beta))
            w = np.exp(mix.log_density(grid, tt, np.full(g, c)))
            rmse = field_rmse(model, target, w)
            summary[(float(beta), float(t))] = {"rmse": rmse, "relative_rmse": rmse / field_rms(target, w)}
            for p, m, tg in zip(grid, model, target):
                rows.append((float(beta), float(t), p[0], p[1], m[0], m[1], tg[0], tg[1]))
    return rows, summary
