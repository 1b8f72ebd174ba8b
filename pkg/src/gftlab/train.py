"""Seeded training loops for CFG, GFT, guidance distillation and CCA."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import RunConfig
from .diffusion import (
    ConditionalMixture2D,
    cfg_combine,
    cfg_diffusion_loss,
    draw_diffusion,
    draw_distill,
    eval_grid,
    field_report,
    gft_diffusion_loss,
    guidance_distillation_loss,
)
from .discrete import (
    build_toy_joint,
    cca_loss_terms,
    cfg_ar_loss,
    cfg_model_distribution,
    draw_ar,
    draw_negatives,
    exact_model_distribution,
    gft_ar_loss,
    tilted_target_chain,
)
from .models import NULL_CLASS, ARLogitNet, ExactTableNet, Module, NoisePredictor, OracleDenoiser, TabularLogits
from .prng import Prng
from .schedules import BetaSchedule, grid_kl, scale_of_beta, tv_distance

# (recorded forwards, gradient-free forwards, backwards) per update
EXPECTED_COUNTS = {"cfg": (1, 0, 1), "gft": (1, 1, 1), "distill": (1, 2, 1), "cca": (2, 2, 2)}

LOSS_COLUMNS = ("step", "loss", "beta_mean", "masked_fraction", "grad_norm", "wallclock_ms")


class NumericFailure(RuntimeError):
    pass


class CounterMismatch(RuntimeError):
    pass


class CFGNet(Module):
    """Wraps a conditional/unconditional network as a CFG field at s = 1/beta - 1."""

    kind = "cfg_wrapper"

    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, x_t, t, c, beta=1.0):
        with ad.no_grad():
            eps_c = self.net(x_t, t, c, 1.0).value
            eps_u = self.net(x_t, t, NULL_CLASS, 1.0).value
        s = 1.0 / np.broadcast_to(np.asarray(beta, dtype=np.float64), (eps_c.shape[0],)) - 1.0
        return ad.constant(cfg_combine(eps_c, eps_u, s))

    __call__ = forward


def default_mixture(cfg: RunConfig) -> ConditionalMixture2D:
    return ConditionalMixture2D.default(radius=cfg.mixture_radius, tau=cfg.mixture_tau)


def default_joint(cfg: RunConfig):
    return build_toy_joint(cfg.joint_seed, cfg.vocab, cfg.length, cfg.num_classes, cfg.skew)


def tabular_from_exact(joint) -> TabularLogits:
    """Tabular logits initialized to the exact conditional and unconditional log-tables."""
    v, n_len, n_cls = joint.vocab, joint.length, joint.num_classes
    rows = []
    for c in list(range(n_cls)) + [NULL_CLASS]:
        tables = joint.uncond if c == NULL_CLASS else [t[c] for t in joint.cond]
        rows.append(np.concatenate([np.log(t) for t in tables], axis=0))
    return TabularLogits(v, n_len, n_cls, init=np.stack(rows))


def build_network(cfg: RunConfig):
    if cfg.testbed == "diffusion2d":
        return NoisePredictor(num_classes=3, dim=2, hidden=cfg.hidden, emb_dim=cfg.emb_dim,
                              fourier_pairs=cfg.fourier_pairs, beta_hidden=cfg.beta_hidden, seed=cfg.seed)
    if cfg.model == "tabular":
        if cfg.method == "cca":
            return tabular_from_exact(default_joint(cfg))
        return TabularLogits(cfg.vocab, cfg.length, cfg.num_classes)
    return ARLogitNet(vocab=cfg.vocab, length=cfg.length, num_classes=cfg.num_classes, hidden=cfg.ar_hidden,
                      emb_dim=cfg.ar_emb_dim, fourier_pairs=cfg.fourier_pairs, beta_hidden=cfg.beta_hidden,
                      seed=cfg.seed)


def _frozen(source: str, exact):
    if source in ("oracle", "exact"):
        return exact
    net, _, _ = checkpoint.load(source)
    return net


def lr_at(cfg: RunConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps == 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))


@dataclass
class Run:
    """Everything a training loop needs, built from one RunConfig."""

    cfg: RunConfig
    net: Module
    frozen: Module | None = None
    mixture: ConditionalMixture2D | None = None
    joint: object = None
    ema: ad.Ema | None = None
    optimizer: ad.Adam | None = None
    loss_rows: list = field(default_factory=list)
    counters: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def build(cls, cfg: RunConfig, net=None):
        run = cls(cfg, net if net is not None else build_network(cfg))
        if cfg.testbed == "diffusion2d":
            run.mixture = default_mixture(cfg)
            if cfg.method == "distill":
                run.frozen = _frozen(cfg.teacher, OracleDenoiser(run.mixture))
        else:
            run.joint = default_joint(cfg)
            if cfg.method == "cca":
                run.frozen = _frozen(cfg.reference, ExactTableNet(run.joint, guided=False))
        run.optimizer = ad.Adam(list(run.net.params.values()), lr=cfg.lr)
        if cfg.ema:
            run.ema = ad.Ema(run.net.params, cfg.ema_decay)
        return run

    @property
    def schedule(self):
        if self.cfg.schedule_kind == "constant":
            return None
        return BetaSchedule(self.cfg.schedule_kind, 1.0, self.cfg.schedule_alpha, self.cfg.length)

    def batch(self, step: int):
        prng = Prng(self.cfg.seed).fork("data", step)
        if self.cfg.testbed == "diffusion2d":
            return self.mixture.sample(prng, self.cfg.batch_size)
        return self.joint.sample(prng, self.cfg.batch_size)

    def losses(self, step: int):
        """Loss graphs for one update plus (beta_mean, masked_fraction)."""
        cfg = self.cfg
        data, c = self.batch(step)
        prng = Prng(cfg.seed).fork("draws", step)
        b = data.shape[0]
        if cfg.testbed == "diffusion2d":
            if cfg.method == "distill":
                draws = draw_distill(prng, b, (cfg.s_min, cfg.s_max))
                loss = guidance_distillation_loss(self.net, self.frozen, data, c, draws)
                return [loss], float(np.mean(1.0 / (1.0 + draws.s))), 0.0
            draws = draw_diffusion(prng, b, 2, cfg.dropout, cfg.fixed_beta)
            if cfg.method == "gft":
                return [gft_diffusion_loss(self.net, data, c, draws)], float(draws.beta.mean()), draws.masked_fraction
            return [cfg_diffusion_loss(self.net, data, c, draws)], 1.0, draws.masked_fraction
        if cfg.method == "cca":
            c_neg = draw_negatives(Prng(cfg.seed).fork("negatives", step), c)
            pos, neg = cca_loss_terms(self.net, self.frozen, data, c, c_neg, cfg.cca_s)
            return [pos, neg], beta_of(cfg.cca_s), 0.0
        draws = draw_ar(prng, b, cfg.length, cfg.dropout, cfg.fixed_beta, self.schedule)
        if cfg.method == "gft":
            return [gft_ar_loss(self.net, data, c, draws)], float(draws.beta.mean()), draws.masked_fraction
        return [cfg_ar_loss(self.net, data, c, draws)], 1.0, draws.masked_fraction

    def update(self):
        t0 = time.perf_counter()
        self.net.zero_grad()
        with ad.counting() as counts:
            graphs, beta_mean, masked = self.losses(self.step)
            loss = 0.0
            for g in graphs:
                loss += float(g.value)
                ad.backward(g)
        if not np.isfinite(loss):
            raise NumericFailure(f"non-finite loss at step {self.step}")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.net.params.values()]
        grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(grad_norm):
            raise NumericFailure(f"non-finite gradient at step {self.step}")
        self.optimizer.step(grads, lr=lr_at(self.cfg, self.step))
        if self.ema is not None:
            self.ema.update(self.net.params)
        got = (counts.recorded_forwards, counts.free_forwards, counts.backwards)
        if got != EXPECTED_COUNTS[self.cfg.method]:
            raise CounterMismatch(f"{self.cfg.method}: counted {got}, expected {EXPECTED_COUNTS[self.cfg.method]}")
        if counts.recorded_forwards != counts.backwards:
            raise CounterMismatch("recorded forwards differ from backwards")
        wall = (time.perf_counter() - t0) * 1000.0
        self.counters.append(counts)
        row = (self.step, loss, beta_mean, masked, grad_norm, wall)
        self.step += 1
        return row

    def train(self, steps=None, callback=None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            row = self.update()
            if (row[0] % self.cfg.log_every) == 0 or self.step == self.cfg.steps:
                self.loss_rows.append(row)
            if callback is not None:
                callback(self, row)
        return self

    def eval_net(self):
        """The network used for evaluation (EMA shadow when configured)."""
        if self.cfg.eval_ema and self.ema is not None:
            shadow = build_network(self.cfg) if not isinstance(self.net, TabularLogits) else tabular_from_exact(self.joint)
            shadow.load_arrays({k: v.copy() for k, v in self.ema.shadow.items()})
            return shadow
        return self.net

    def metadata(self) -> dict:
        from .config import code_hash

        config = {k: v for k, v in self.cfg.to_dict().items() if k != "out"}  # where it lives is not what it is
        meta = {"config": config, "config_hash": self.cfg.hash(), "code_hash": code_hash(),
                "step": self.step, "seed": self.cfg.seed}
        if self.mixture is not None:
            meta["mixture"] = self.mixture.config()
        if self.joint is not None:
            meta["joint"] = self.joint.config()
        return meta


def beta_of(s):
    return 1.0 / (1.0 + s)


# -- evaluation --------------------------------------------------------------------------


def diffusion_metrics(net, mixture, cfg: RunConfig, method=None):
    """Rows (class, beta, t, rmse, relative_rmse) against the optimal guidance-free field."""
    field_net = CFGNet(net) if (method or cfg.method) == "cfg" else net
    grid = eval_grid(cfg.grid_half_width, cfg.grid_points)
    rows = []
    for c in range(mixture.num_classes):
        _, summary = field_report(field_net, mixture, cfg.eval_betas, cfg.eval_ts, grid, c=c)
        for (beta, t), v in summary.items():
            rows.append((c, beta, t, v["rmse"], v["relative_rmse"]))
    return rows


def _modal(p):
    return float(p.max())


def target_for(joint, c, beta, cfg: RunConfig):
    """Per-step tilted target; a non-constant schedule tilts step n by 1/beta_n - 1."""
    if cfg.schedule_kind == "constant":
        return tilted_target_chain(joint, c, scale_of_beta(beta)).sequence_probs
    betas = BetaSchedule(cfg.schedule_kind, beta, cfg.schedule_alpha, cfg.length).betas()
    return tilted_target_chain(joint, c, 1.0 / betas - 1.0).sequence_probs


def model_distribution(net, c, beta, cfg: RunConfig, method=None):
    method = method or cfg.method
    if cfg.schedule_kind == "constant":
        betas = beta
    else:
        betas = BetaSchedule(cfg.schedule_kind, beta, cfg.schedule_alpha, cfg.length).betas()
    if method == "cfg":
        return cfg_model_distribution(net, c, 1.0 / np.asarray(betas) - 1.0)
    if method == "cca":
        return exact_model_distribution(net, c, 1.0)
    return exact_model_distribution(net, c, betas)


def ar_metrics(net, joint, cfg: RunConfig, method=None):
    """Rows (class, beta, tv, kl, modal_p_model, modal_p_target)."""
    method = method or cfg.method
    betas = (beta_of(cfg.cca_s),) if method == "cca" else cfg.eval_betas
    rows = []
    for c in range(joint.num_classes):
        for beta in betas:
            p_model = model_distribution(net, c, beta, cfg, method)
            p_target = target_for(joint, c, beta, cfg)
            rows.append((c, float(beta), tv_distance(p_model, p_target), grid_kl(p_target, p_model),
                         _modal(p_model), _modal(p_target)))
    return rows


def evaluate(run: Run):
    net = run.eval_net()
    if run.cfg.testbed == "diffusion2d":
        return ("class", "beta", "t", "rmse", "relative_rmse"), diffusion_metrics(net, run.mixture, run.cfg)
    return ("class", "beta", "tv", "kl", "modal_p_model", "modal_p_target"), ar_metrics(net, run.joint, run.cfg)
