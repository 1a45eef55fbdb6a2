"""Flow matching: path identities, solvers, inversion, inpainting."""

import numpy as np
import pytest

from arflow.fm import (FmError, FmSamplerConfig, OtPath,
                       SolverBudgetError, dopri5_integrate, draw_half_mask,
                       draw_seconds_mask, euler_integrate, euler_sample,
                       fm_loss, invert, psi, sup_inpaint, target_field,
                       write_trace, zs_inpaint)
from arflow.rng import SeededRng
from arflow.training import make_fm_model
from arflow.world import NormStats, WorldSpec, gen_sample


@pytest.fixture(scope="module")
def path():
    return OtPath(sigma_min=1e-4)


@pytest.fixture(scope="module")
def world():
    return WorldSpec(seed=5)


@pytest.fixture(scope="module")
def desk_model(world):
    stats = NormStats(mean=0.0, mean_std=2.0, n_segments=1)
    model = make_fm_model(world, stats, n_blocks=2, model_dim=24, n_heads=1,
                          ff_dim=64, seed=3)
    # the zero-initialized regression head predicts the zero field; give it
    # weight so conditioning visibly moves the samples
    model.params["out.w"] = SeededRng(30).gauss(model.params["out.w"].shape) * 0.3
    return model


# -- path ---------------------------------------------------------------------


def test_path_endpoints(path):
    rng = SeededRng(0)
    y0 = rng.gauss((4, 3)).astype(np.float64)
    y1 = rng.gauss((4, 3)).astype(np.float64)
    assert np.allclose(psi(path, 0.0, y0, y1), y0, atol=1e-6)
    assert np.allclose(psi(path, 1.0, y0, y1), path.sigma_min * y0 + y1, atol=1e-6)


def test_path_midpoint_value():
    p = OtPath(sigma_min=1e-12)    # effectively zero
    assert psi(p, 0.5, np.array(0.0), np.array(2.0)) == pytest.approx(1.0, abs=1e-9)


def test_sigma_min_bounds():
    with pytest.raises(FmError):
        OtPath(sigma_min=0.0)
    with pytest.raises(FmError):
        OtPath(sigma_min=1.0)


def test_field_constant_along_own_path(path):
    rng = SeededRng(1)
    for tau in (0.0, 0.3, 0.9):
        y0 = rng.gauss((8,)).astype(np.float64)
        y1 = rng.gauss((8,)).astype(np.float64)
        y = psi(path, tau, y0, y1)
        v = target_field(path, tau, y, y1)
        expected = y1 - (1.0 - path.sigma_min) * y0
        assert np.allclose(v, expected, atol=1e-5)


def test_field_at_tau0(path):
    rng = SeededRng(2)
    y = rng.gauss((5,)).astype(np.float64)
    y1 = rng.gauss((5,)).astype(np.float64)
    assert np.allclose(target_field(path, 0.0, y, y1),
                       y1 - (1.0 - path.sigma_min) * y)


def test_field_fixed_point_at_data(path):
    y1 = np.ones(3)
    v = target_field(path, 0.0, y1, y1)
    assert np.abs(v).max() == pytest.approx(path.sigma_min, abs=1e-9)


def test_field_denominator_guard(path):
    with pytest.raises(FmError):
        target_field(path, 2.0, np.zeros(2), np.zeros(2))


# -- loss ---------------------------------------------------------------------


def test_loss_zero_for_oracle(path):
    rng = SeededRng(3)
    z = rng.gauss((4, 6, 2)).astype(np.float64)
    holder = {}

    def oracle(y, taus):
        return holder["target"]

    # intercept the drawn noise by reproducing it from the same seed
    noise_rng = SeededRng(77)
    y0 = SeededRng(77).gauss(z.shape)
    holder["target"] = z - (1.0 - path.sigma_min) * y0
    loss = fm_loss(oracle, path, z, SeededRng(5), noise_rng)
    assert loss == pytest.approx(0.0, abs=1e-10)


def test_loss_weighting():
    path = OtPath(sigma_min=1e-4)
    z = np.zeros((1, 4, 2))

    def off_by_delta(y, taus):
        y0 = SeededRng(9).gauss(z.shape)
        return z - (1.0 - path.sigma_min) * y0 + 0.5

    loss = fm_loss(off_by_delta, path, z, None, SeededRng(9),
                   taus=np.array([0.5], dtype=np.float32))
    assert loss == pytest.approx(1.5 * 0.25, rel=1e-5)


def test_loss_endpoint_weights():
    path = OtPath(sigma_min=1e-4)
    z = np.zeros((1, 2, 2))
    for tau, want in ((0.0, 1.0), (1.0, 2.0)):
        def biased(y, taus):
            y0 = SeededRng(4).gauss(z.shape)
            return z - (1.0 - path.sigma_min) * y0 + 1.0
        loss = fm_loss(biased, path, z, None, SeededRng(4),
                       taus=np.array([tau], dtype=np.float32))
        assert loss == pytest.approx(want, rel=1e-5)


# -- euler ---------------------------------------------------------------------


def test_euler_constant_field_telescopes():
    c = np.array([0.5, -2.0])
    for n in (1, 7, 50):
        out = euler_integrate(lambda y, t: c, np.zeros(2), n)
        assert np.allclose(out, c, atol=1e-6)


def test_euler_on_oracle_field_lands_at_endpoint(path):
    rng = SeededRng(6)
    y0 = rng.gauss((5,)).astype(np.float64)
    y1 = rng.gauss((5,)).astype(np.float64)
    field = lambda y, t: target_field(path, t, y, y1)
    for n in (1, 7, 50):
        out = euler_integrate(field, y0, n)
        assert np.abs(out - (path.sigma_min * y0 + y1)).max() < 1e-5


def test_euler_exponential_closed_form():
    out = euler_integrate(lambda y, t: y, np.array([1.0]), 10)
    assert out[0] == pytest.approx(1.1**10, rel=1e-9)


def test_euler_rejects_bad_steps():
    with pytest.raises(FmError):
        euler_integrate(lambda y, t: y, np.zeros(1), 0)


def test_euler_nonfinite_detection():
    with pytest.raises(FmError, match="step 1"):
        euler_integrate(lambda y, t: y * np.inf, np.ones(1), 4)


def test_euler_trace_rows():
    trace = []
    euler_integrate(lambda y, t: y, np.ones(1), 10, trace=trace)
    assert len(trace) == 10
    assert trace[0]["tau"] == 0.0
    assert all(r["accepted"] == 1 for r in trace)


# -- dopri5 ---------------------------------------------------------------------


def test_dopri5_exponential():
    y, evals = dopri5_integrate(lambda y, t: y, np.array([1.0]), 1e-4, 1e-6)
    assert abs(y[0] - np.e) < 1e-3
    assert evals % 7 == 0


def test_dopri5_exact_on_low_degree_polynomials():
    # dy/dt = 5 t^4  ->  y(1) = 1 exactly for a 5th-order method
    y, _ = dopri5_integrate(lambda y, t: np.array([5 * t**4]), np.zeros(1),
                            1e-3, 1e-5)
    assert abs(y[0] - 1.0) < 1e-6


def test_dopri5_constant_field_first_step_accepted():
    trace = []
    y, evals = dopri5_integrate(lambda y, t: np.array([2.0]), np.zeros(1),
                                1e-3, 1e-5, trace=trace)
    assert y[0] == pytest.approx(2.0, abs=1e-12)
    assert all(r["accepted"] for r in trace)


def test_dopri5_rtol_monotone_error():
    errs = []
    for rtol in (1e-2, 1e-3, 1e-4):
        y, _ = dopri5_integrate(lambda y, t: y, np.array([1.0]), rtol, 1e-9)
        errs.append(abs(y[0] - np.e))
    assert errs[0] >= errs[1] >= errs[2]


def test_dopri5_budget_error_carries_state():
    with pytest.raises(SolverBudgetError) as err:
        dopri5_integrate(lambda y, t: 100 * np.cos(100 * t) * np.ones(1),
                         np.zeros(1), 1e-10, 1e-12, max_evals=40)
    assert err.value.n_evals <= 40
    assert err.value.state is not None
    assert 0 <= err.value.tau < 1.0


def test_trace_csv_round_trip(tmp_path):
    trace = []
    dopri5_integrate(lambda y, t: y, np.array([1.0]), 1e-3, 1e-5, trace=trace)
    path = tmp_path / "trace.csv"
    write_trace(path, trace)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "tau,h,err_norm,accepted"
    assert len(lines) == len(trace) + 1


# -- model-driven sampling ----------------------------------------------------------


def test_sampler_config_validation():
    with pytest.raises(FmError):
        FmSamplerConfig(solver="rk4")
    with pytest.raises(FmError):
        FmSamplerConfig(n_steps=0)
    with pytest.raises(FmError):
        FmSamplerConfig(rtol=-1.0)


def test_euler_sample_shapes_and_determinism(world, desk_model):
    refs = [gen_sample(world, SeededRng(7), 1.0) for _ in range(2)]
    caps = np.stack([r.caption for r in refs])
    ctrls = [r.controls for r in refs]
    cfg = FmSamplerConfig(n_steps=8, cfg_coef=3.0)
    a = euler_sample(desk_model, caps, ctrls, cfg, SeededRng(8), 50)
    b = euler_sample(desk_model, caps, ctrls, cfg, SeededRng(8), 50)
    assert a.shape == (2, world.latent_dim, 50)
    assert np.array_equal(a, b)


def test_guidance_collapse_cases(world, desk_model):
    ref = gen_sample(world, SeededRng(9), 1.0)
    # coef 1 runs the conditional stream only; coef 0 the unconditional only;
    # a null-conditioned guided run must equal the unconditional run exactly
    cfg1 = FmSamplerConfig(n_steps=4, cfg_coef=1.0)
    cfg0 = FmSamplerConfig(n_steps=4, cfg_coef=0.0)
    cfg3 = FmSamplerConfig(n_steps=4, cfg_coef=3.0)
    cond1 = euler_sample(desk_model, ref.caption[None], [ref.controls], cfg1,
                         SeededRng(10), 20)
    uncond = euler_sample(desk_model, ref.caption[None], [ref.controls], cfg0,
                          SeededRng(10), 20)
    from arflow.world import null_caption
    nullc = null_caption(world)[None]
    guided_null = euler_sample(desk_model, nullc, None, cfg3, SeededRng(10), 20)
    uncond_null = euler_sample(desk_model, nullc, None, cfg0, SeededRng(10), 20)
    assert not np.allclose(cond1, uncond)
    assert np.allclose(guided_null, uncond_null, atol=1e-5)


# -- inversion and inpainting ----------------------------------------------------------


def test_invert_list_length_and_one_step(world, desk_model):
    ref = gen_sample(world, SeededRng(11), 1.0)
    from arflow.world import normalize
    zn = normalize(ref.latent[:, :20], desk_model.norm_stats)
    states = invert(desk_model, zn, ref.caption, ref.controls, n_steps=5)
    assert len(states) == 5
    one = invert(desk_model, zn, ref.caption, ref.controls, n_steps=1)
    assert len(one) == 1


def constant_field_model(world, const):
    """A real model whose field is identically `const`: every weight zero,
    regression bias set to the constant."""
    model = make_fm_model(world, NormStats(0.0, 1.0, 1), n_blocks=2,
                          model_dim=16, n_heads=1, ff_dim=32, seed=0)
    model.params["out.b"] = np.full_like(model.params["out.b"], const)
    return model


def test_invert_round_trip_constant_field(world):
    """Euler inversion then forward replay is exact for state-independent
    fields."""
    model = constant_field_model(world, 0.3)
    ref = gen_sample(world, SeededRng(22), 0.5)
    from arflow.world import normalize
    zn = normalize(ref.latent, model.norm_stats)
    n = 6
    states = invert(model, zn, ref.caption, ref.controls, n_steps=n)
    y = states[0].copy()
    dt = 1.0 / n
    for _ in range(n):
        y = y + dt * 0.3
    assert np.abs(y - zn).max() < 1e-5


def test_invert_single_step_value(world):
    model = constant_field_model(world, 0.25)
    ref = gen_sample(world, SeededRng(23), 0.5)
    from arflow.world import normalize
    zn = normalize(ref.latent, model.norm_stats)
    states = invert(model, zn, ref.caption, ref.controls, n_steps=1)
    assert len(states) == 1
    assert np.abs(states[0] - (zn - 0.25)).max() < 1e-6


def test_zs_inpaint_context_bitwise(world, desk_model):
    ref = gen_sample(world, SeededRng(12), 1.0)
    cfg = FmSamplerConfig(n_steps=4, cfg_coef=1.0)
    out = zs_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                     (10, 30), SeededRng(13))
    assert np.array_equal(out[:, :10], ref.latent[:, :10])
    assert np.array_equal(out[:, 30:], ref.latent[:, 30:])
    assert not np.allclose(out[:, 10:30], ref.latent[:, 10:30])


def test_zs_inpaint_full_mask_is_plain_sampling(world, desk_model):
    ref = gen_sample(world, SeededRng(14), 1.0)
    cfg = FmSamplerConfig(n_steps=4, cfg_coef=1.0)
    L = ref.latent.shape[1]
    full = zs_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                      (0, L), SeededRng(15))
    plain = euler_sample(desk_model, ref.caption[None], [ref.controls], cfg,
                         SeededRng(15), L)[0]
    assert np.allclose(full, plain, atol=1e-5)


def test_zs_inpaint_empty_mask_returns_source(world, desk_model):
    ref = gen_sample(world, SeededRng(16), 1.0)
    cfg = FmSamplerConfig(n_steps=3, cfg_coef=1.0)
    out = zs_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                     (25, 25), SeededRng(17))
    assert np.array_equal(out, ref.latent)


def test_sup_inpaint_context_bitwise(world, desk_model):
    ref = gen_sample(world, SeededRng(18), 1.0)
    cfg = FmSamplerConfig(n_steps=4, cfg_coef=1.0)
    out = sup_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                      SeededRng(19), span=(12, 37))
    assert np.array_equal(out[:, :12], ref.latent[:, :12])
    assert np.array_equal(out[:, 37:], ref.latent[:, 37:])


def test_mask_policies(world):
    rng = SeededRng(20)
    for _ in range(100):
        s, e = draw_half_mask(500, rng)
        assert e - s == 250
        assert 50 <= s and e <= 500
        assert s + 250 <= 450 + 250  # start clamped into [0.1 L, 0.9 L - M]
        assert s <= 200
    for _ in range(50):
        s, e = draw_seconds_mask(world, 500, rng)
        assert e - s == 250
        assert s >= 50 and e <= 450


def test_invalid_masks_rejected(world, desk_model):
    ref = gen_sample(world, SeededRng(21), 1.0)
    cfg = FmSamplerConfig(n_steps=2)
    with pytest.raises(FmError):
        zs_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                   (30, 10), SeededRng(0))
    with pytest.raises(FmError):
        sup_inpaint(desk_model, ref.latent, ref.caption, ref.controls, cfg,
                    SeededRng(0), span=(-1, 10))
