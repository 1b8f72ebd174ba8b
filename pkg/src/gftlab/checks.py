"""Fast invariant suite run by ``gftlab check``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .diffusion import (
    ConditionalMixture2D,
    alpha_sigma,
    cfg_combine,
    cfg_diffusion_loss,
    draw_diffusion,
    gft_diffusion_loss,
    theorem1_target,
)
from .discrete import build_toy_joint, tilted_target_chain
from .models import NULL_CLASS, NoisePredictor
from .prng import Prng
from .schedules import power_cosine_beta, pyramid_beta


def _tiny_net(seed=0):
    net = NoisePredictor(hidden=(8, 8), emb_dim=8, fourier_pairs=2, beta_hidden=4, seed=seed)
    w = net.params["beta_mlp.1.w"]
    w.value = 0.1 * Prng(seed).fork("perturb").normal(w.shape)
    return net


def check_schedule_identity():
    t = np.linspace(0.0, 1.0, 1001)
    a, s = alpha_sigma(t)
    err = float(np.max(np.abs(a**2 + s**2 - 1.0)))
    return err <= 1e-12, f"max |a^2+s^2-1| = {err:.2e}"


def check_guided_target_algebra():
    mix = ConditionalMixture2D.default()
    x = Prng(1).normal((64, 2)) * 2.0
    t = Prng(2).uniform(64) * 0.98
    c = Prng(3).integers(3, 64)
    worst = 0.0
    for beta in (1.0, 0.5, 0.25, 0.1):
        _, sigma = alpha_sigma(t)
        e_c = -sigma[:, None] * mix.score(x, t, c)
        e_u = -sigma[:, None] * mix.score(x, t, np.full(64, NULL_CLASS))
        got = theorem1_target(mix, x, t, c, beta)
        worst = max(worst, float(np.max(np.abs(got - cfg_combine(e_c, e_u, 1.0 / beta - 1.0)))))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


def check_stop_gradient():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(4), 16)
    draws = draw_diffusion(Prng(5), 16)
    net = _tiny_net()
    net.zero_grad()
    ad.backward(gft_diffusion_loss(net, x, c, draws))
    g1 = {k: p.grad.copy() for k, p in net.params.items()}
    from .diffusion import forward_diffuse

    with ad.no_grad():
        u = net(forward_diffuse(x, draws.eps, draws.t), draws.t, NULL_CLASS, 1.0).value
    net.zero_grad()
    ad.backward(gft_diffusion_loss(net, x, c, draws, uncond=ad.constant(u.copy())))
    same = all(np.array_equal(g1[k], p.grad) for k, p in net.params.items())
    return same, "bitwise equal" if same else "gradients differ"


def check_beta_one_reduction():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(6), 32)
    net = _tiny_net(1)
    draws = draw_diffusion(Prng(7), 32, beta=1.0)
    a = gft_diffusion_loss(net, x, c, draws).value
    b = cfg_diffusion_loss(net, x, c, draws).value
    return bool(a == b), f"gft={float(a)!r} cfg={float(b)!r}"


def check_gradients():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(8), 4)
    net = _tiny_net(2)
    report = ad.finite_diff_check(lambda: gft_diffusion_loss(net, x, c, draw_diffusion(Prng(9), 4)), net.params)
    return report.passed, f"max relative error {report.max_rel_error:.2e}"


def check_tilted_monotone():
    joint = build_toy_joint()
    ok, detail = True, []
    for c in range(joint.num_classes):
        modal = [tilted_target_chain(joint, c, s).sequence_probs.max() for s in (0, 1, 3, 9)]
        ok &= all(b >= a for a, b in zip(modal, modal[1:]))
        detail.append(",".join(f"{m:.3f}" for m in modal))
    return ok, "; ".join(detail)


def check_schedule_endpoints():
    worst = 0.0
    for n_len in (2, 5, 16):
        for beta0 in (0.1, 0.5, 0.9):
            for fn in (pyramid_beta, power_cosine_beta):
                worst = max(worst, abs(fn(0, n_len, 1.5, beta0) - 1.0), abs(fn(n_len - 1, n_len, 1.5, beta0) - beta0))
    return worst <= 1e-12, f"max endpoint error {worst:.2e}"


def check_checkpoint_roundtrip():
    net = _tiny_net(3)
    x = Prng(10).normal((8, 2))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "net.gft"
        checkpoint.save(path, net, {"step": 0})
        loaded, _, _ = checkpoint.load(path)
    with ad.no_grad():
        same = np.array_equal(net(x, 0.3, 1, 0.5).value, loaded(x, 0.3, 1, 0.5).value)
    return same, "bitwise equal forwards" if same else "forwards differ"


CHECKS = {
    "schedule identity": check_schedule_identity,
    "guided-target algebra": check_guided_target_algebra,
    "stop-gradient exactness": check_stop_gradient,
    "beta=1 reduction": check_beta_one_reduction,
    "finite-difference gradients": check_gradients,
    "tilted sharpening": check_tilted_monotone,
    "schedule endpoints": check_schedule_endpoints,
    "checkpoint round-trip": check_checkpoint_roundtrip,
}


def run_checks():
    results = []
    for name, fn in CHECKS.items():
        ok, detail = fn()
        results.append((name, bool(ok), detail))
    return results
