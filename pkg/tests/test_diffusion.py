import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gftlab import autodiff as ad
from gftlab.diffusion import (
    ALPHA_GUARD,
    ConditionalMixture2D,
    DiffusionDraws,
    DistillDraws,
    alpha_sigma,
    analytic_scores,
    cfg_combine,
    cfg_diffusion_loss,
    cfg_field,
    ddim_sample,
    draw_diffusion,
    eval_grid,
    field_report,
    forward_diffuse,
    gft_diffusion_loss,
    gft_diffusion_step,
    gft_field,
    guidance_distillation_loss,
    theorem1_target,
    uncond_mse_loss,
)
from gftlab.models import NULL_CLASS, NoisePredictor, OracleDenoiser
from gftlab.prng import Prng


class Zero:
    def __call__(self, x_t, t, c, beta=1.0):
        ad.record_forward()
        return ad.constant(np.zeros_like(np.asarray(x_t)))


def _unit_gaussian(mu):
    return ConditionalMixture2D(prior=[1.0], comp_class=[0], comp_weight=[1.0], means=[mu], variances=[[1.0, 1.0]])


def _tiny(seed=0):
    net = NoisePredictor(hidden=(8, 8), emb_dim=8, fourier_pairs=2, beta_hidden=4, seed=seed)
    net.params["beta_mlp.1.w"].value = 0.1 * Prng(seed).normal(net.params["beta_mlp.1.w"].shape)
    return net


def test_schedule_endpoints_and_identity():
    a, s = alpha_sigma(np.array([0.0, 1.0]))
    assert a.tolist() == [1.0, 0.0] and s.tolist() == [0.0, 1.0]
    a, s = alpha_sigma(np.linspace(0, 1, 1001))
    assert np.max(np.abs(a**2 + s**2 - 1)) <= 1e-12


def test_forward_diffuse_examples():
    x, e = np.array([[0.3, -1.0]]), np.array([[2.0, 0.5]])
    assert np.array_equal(forward_diffuse(x, e, np.array([0.0])), x)
    assert np.array_equal(forward_diffuse(x, e, np.array([1.0])), e)
    got = forward_diffuse(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([0.5]))
    assert np.allclose(got, [[np.sqrt(0.5), np.sqrt(0.5)]], atol=1e-15)


def test_variance_preservation():
    p = Prng(0)
    x, e = p.normal((100_000, 2)), p.normal((100_000, 2))
    for t in (0.1, 0.5, 0.9):
        v = forward_diffuse(x, e, np.full(100_000, t)).var(axis=0)
        assert np.all(np.abs(v - 1) < 0.05)


@pytest.mark.parametrize("t", [0.0, 0.3, 0.8, 1.0])
def test_unit_gaussian_score_is_stationary(t):
    x = Prng(1).normal((10, 2))
    assert np.allclose(analytic_scores(_unit_gaussian([0, 0]), x, t, 0), -x, atol=1e-12)


def test_mirrored_pair_score_vanishes_at_origin():
    mix = ConditionalMixture2D(prior=[1.0], comp_class=[0, 0], comp_weight=[0.5, 0.5],
                               means=[[1.5, 0.5], [-1.5, -0.5]], variances=[[0.2, 0.3], [0.2, 0.3]])
    assert np.allclose(analytic_scores(mix, np.zeros((1, 2)), 0.4, 0), 0.0, atol=1e-15)


def test_score_matches_quadrature():
    # grad log of the integral of N(x | a y, s^2 I) p(y) dy, by trapezoid quadrature over y
    mix = ConditionalMixture2D(prior=[1.0], comp_class=[0, 0], comp_weight=[0.3, 0.7],
                               means=[[1.0, -0.5], [-0.8, 0.6]], variances=[[0.25, 0.16], [0.36, 0.2]])
    t = 0.45
    a, s = (float(v) for v in alpha_sigma(t))
    ax = np.linspace(-5, 5, 1201)
    y1, y2 = np.meshgrid(ax, ax, indexing="ij")
    py = sum(w * np.exp(-0.5 * ((y1 - m[0]) ** 2 / v[0] + (y2 - m[1]) ** 2 / v[1])) / (2 * np.pi * np.sqrt(v[0] * v[1]))
             for w, m, v in zip(mix.comp_weight, mix.means, mix.variances))
    for x in ([0.4, 0.1], [-1.2, 0.9]):
        k = np.exp(-0.5 * ((x[0] - a * y1) ** 2 + (x[1] - a * y2) ** 2) / s**2) * py
        dens = k.sum()
        grad = np.array([((a * y1 - x[0]) * k).sum(), ((a * y2 - x[1]) * k).sum()]) / s**2
        assert np.allclose(analytic_scores(mix, np.array([x]), t, 0)[0], grad / dens, atol=1e-6)


def test_cfg_combine_examples():
    ec, eu = np.array([1.0, 0.0]), np.array([0.0, 0.0])
    assert np.array_equal(cfg_combine(ec, eu, 0.0), ec)
    assert np.array_equal(cfg_combine(ec, ec, 2.7), ec)
    assert np.array_equal(cfg_combine(ec, eu, 1.0), [2.0, 0.0])


def test_guided_target_examples():
    mix = ConditionalMixture2D.default()
    x = Prng(3).normal((20, 2)) * 2
    t = np.full(20, 0.4)
    _, sigma = alpha_sigma(t)
    cond = -sigma[:, None] * analytic_scores(mix, x, t, 1)
    assert np.allclose(theorem1_target(mix, x, t, 1, 1.0), cond, atol=1e-15)
    for beta in (0.1, 0.25, 0.5):
        want = cfg_combine(cond, -sigma[:, None] * analytic_scores(mix, x, t, NULL_CLASS), 1 / beta - 1)
        assert np.allclose(theorem1_target(mix, x, t, 1, beta), want, atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        theorem1_target(mix, x, t, 1, 0.0)


def test_guided_target_when_condition_is_uninformative():
    one = ConditionalMixture2D(prior=[0.5, 0.5], comp_class=[0, 1], comp_weight=[1.0, 1.0],
                               means=[[0.5, 0.5], [0.5, 0.5]], variances=[[0.3, 0.3], [0.3, 0.3]])
    x = Prng(4).normal((8, 2))
    _, sigma = alpha_sigma(0.6)
    uncond = -sigma * analytic_scores(one, x, 0.6, NULL_CLASS)
    for beta in (1.0, 0.5, 0.1):
        assert np.allclose(theorem1_target(one, x, 0.6, 0, beta), uncond, atol=1e-12)


def test_gft_equals_cfg_when_beta_is_one():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(5), 64)
    draws = draw_diffusion(Prng(6), 64, beta=1.0)
    net = _tiny()
    assert gft_diffusion_loss(net, x, c, draws).value == cfg_diffusion_loss(net, x, c, draws).value


def test_gft_with_beta_zero_is_frozen():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(7), 32)
    draws = draw_diffusion(Prng(8), 32, beta=0.0)
    net = _tiny()
    loss = gft_diffusion_loss(net, x, c, draws)
    with ad.no_grad():
        u = net(forward_diffuse(x, draws.eps, draws.t), draws.t, NULL_CLASS, 1.0).value
    assert float(loss.value) == pytest.approx(np.mean(np.sum((u - draws.eps) ** 2, axis=1)), rel=1e-14)
    ad.backward(loss)
    assert all(p.grad is None or np.all(p.grad == 0) for p in net.params.values())


def test_oracle_gft_residual_equals_conditional_residual():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(9), 500)
    draws = draw_diffusion(Prng(10), 500)
    draws.t = np.minimum(draws.t, 0.999)
    oracle = OracleDenoiser(mix)
    gft = float(gft_diffusion_loss(oracle, x, c, draws).value)
    cfg = float(cfg_diffusion_loss(oracle, x, c, draws).value)
    assert gft == pytest.approx(cfg, rel=1e-10)
    for i in range(0, 500, 97):
        w = np.zeros(500)
        w[i] = 1.0
        assert float(gft_diffusion_loss(oracle, x, c, draws, weights=w).value) == pytest.approx(
            float(cfg_diffusion_loss(oracle, x, c, draws, weights=w).value), rel=1e-10, abs=1e-12)


def test_zero_predictor_cfg_loss_is_dimension():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(11), 100_000)
    draws = draw_diffusion(Prng(12), 100_000)
    assert float(cfg_diffusion_loss(Zero(), x, c, draws).value) == pytest.approx(2.0, abs=0.03)


class Shifted(OracleDenoiser):
    def forward(self, x_t, t, c, beta=1.0):
        return ad.constant(super().forward(x_t, t, c, beta).value + 0.05)

    __call__ = forward


def test_exact_conditional_denoiser_beats_perturbed():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(13), 20_000)
    draws = draw_diffusion(Prng(14), 20_000)
    draws.t = np.minimum(draws.t, 0.999)
    exact = float(cfg_diffusion_loss(OracleDenoiser(mix), x, c, draws).value)
    assert exact < float(cfg_diffusion_loss(Shifted(mix), x, c, draws).value)


def test_cfg_loss_deterministic():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(15), 32)
    a = cfg_diffusion_loss(_tiny(), x, c, draw_diffusion(Prng(16), 32)).value
    b = cfg_diffusion_loss(_tiny(), x, c, draw_diffusion(Prng(16), 32)).value
    assert a == b


def _masked(draws, value=True):
    return DiffusionDraws(draws.beta, draws.t, draws.eps, np.full(draws.beta.shape, value))


@pytest.mark.parametrize("seed", range(3))
def test_masked_gradient_scales_with_beta(seed):
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(seed), 6)
    draws = _masked(draw_diffusion(Prng(100 + seed), 6))
    net = _tiny(seed)
    for i in range(6):
        w = np.zeros(6)
        w[i] = 1.0
        net.zero_grad()
        ad.backward(gft_diffusion_loss(net, x, c, draws, weights=w))
        g_gft = {k: p.grad.copy() for k, p in net.params.items() if p.grad is not None}
        one = DiffusionDraws(draws.beta[i:i + 1], draws.t[i:i + 1], draws.eps[i:i + 1], draws.mask[i:i + 1])
        net.zero_grad()
        ad.backward(uncond_mse_loss(net, x[i:i + 1], one))
        for k, g in g_gft.items():
            want = 2.0 * draws.beta[i] * net.params[k].grad
            assert np.linalg.norm(g - want) <= 1e-10 * max(np.linalg.norm(want), 1e-300)


def test_gft_gradient_matches_finite_differences():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(17), 4)
    net = _tiny(5)
    report = ad.finite_diff_check(lambda: gft_diffusion_step(net, x, c, Prng(18))[0], net.params)
    assert report.passed


def test_distill_oracle_student_has_zero_loss():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(19), 64)
    p = Prng(20)
    draws = DistillDraws(3 * p.uniform(64), np.minimum(p.uniform(64), 0.99), p.normal((64, 2)))
    loss = guidance_distillation_loss(OracleDenoiser(mix), OracleDenoiser(mix), x, c, draws)
    assert float(loss.value) < 1e-24


def test_distill_at_zero_scale_targets_conditional():
    mix = ConditionalMixture2D.default()
    x, c = mix.sample(Prng(21), 64)
    p = Prng(22)
    draws = DistillDraws(np.zeros(64), np.minimum(p.uniform(64), 0.99), p.normal((64, 2)))
    x_t = forward_diffuse(x, draws.eps, draws.t)
    eps_c = OracleDenoiser(mix)(x_t, draws.t, c, 1.0).value
    got = float(guidance_distillation_loss(Zero(), OracleDenoiser(mix), x, c, draws).value)
    assert got == pytest.approx(np.mean(np.sum(eps_c**2, axis=1)), rel=1e-14)


def _gaussian_field(mu):
    mix = _unit_gaussian(mu)

    def field(x, t, c, beta):
        _, sigma = alpha_sigma(t)
        return -sigma[:, None] * mix.score(x, t, 0)

    return field


def test_ddim_recovers_gaussian_mean():
    mu = np.array([1.0, -0.5])
    n = 10_000
    x = ddim_sample(_gaussian_field(mu), 0, 1.0, 200, Prng(23), n=n)
    assert np.all(np.abs(x.mean(axis=0) - mu) < 3 * x.std(axis=0) / np.sqrt(n))
    assert np.all(np.abs(x.std(axis=0) - 1.0) < 0.05)


def test_ddim_single_step_closed_form():
    x1 = Prng(24).normal((5, 2))
    out = ddim_sample(_gaussian_field([0.7, 0.2]), 0, 1.0, 1, Prng(24), n=5)
    # at t=1 the exact field returns x_1, so (x_1 - 1 * x_1) / guard = 0
    assert np.array_equal(out, np.zeros((5, 2)))
    half = ddim_sample(lambda x, t, c, b: 0.5 * x, 0, 1.0, 1, Prng(24), n=5)
    assert np.allclose(half, 0.5 * x1 / ALPHA_GUARD, rtol=1e-15)


@pytest.mark.parametrize("k", [1, 7, 50])
def test_ddim_call_counts(k):
    net = _tiny()
    with ad.counting() as gft:
        ddim_sample(gft_field(net), 1, 0.5, k, Prng(0), n=3)
    with ad.counting() as cfg:
        ddim_sample(cfg_field(net), 1, 0.5, k, Prng(0), n=3)
    assert gft.forwards == k and cfg.forwards == 2 * k


def test_field_report_oracle_is_exact():
    mix = ConditionalMixture2D.default()
    grid = eval_grid(4.0, 11)
    rows, summary = field_report(OracleDenoiser(mix), mix, (1.0, 0.5, 0.25, 0.1), (0.3, 0.6), grid)
    assert len(rows) == 4 * 2 * grid.shape[0]
    assert all(v["rmse"] == 0.0 for v in summary.values())


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.0, 0.99))
def test_guided_target_cfg_identity_property(beta, t):
    mix = ConditionalMixture2D.default()
    x = Prng(25).normal((16, 2)) * 2
    tt = np.full(16, t)
    _, sigma = alpha_sigma(tt)
    ec = -sigma[:, None] * mix.score(x, tt, 2)
    eu = -sigma[:, None] * mix.score(x, tt, NULL_CLASS)
    got = theorem1_target(mix, x, tt, 2, beta)
    assert np.allclose(got, cfg_combine(ec, eu, 1 / beta - 1), rtol=0, atol=1e-12 * max(1.0, 1 / beta))
