import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import unit_rows
from cdcd.denoiser import OracleDenoiser
from cdcd.numerics import RngStream, gaussian, uniform
from cdcd.sampler import (
    SamplerConfig,
    euler_step,
    heun_step,
    integrate,
    rho_grid,
    sample,
    step_grid,
    truncate_posterior,
)
from cdcd.score import OracleSpec, oracle_score
from cdcd.warp import WarpCdf

E2 = np.array([[1.0, 0.0], [-1.0, 0.0]])
SPEC2 = OracleSpec(np.array([0.5, 0.5]), E2)


def spec(seed, v=6, d=8):
    r = RngStream(seed, 21)
    p = uniform(r, (v,)) + 0.1
    return OracleSpec(p / p.sum(), unit_rows(gaussian(r, (v, d))) * np.sqrt(d))


def test_rho_grid_examples():
    g = rho_grid(2, 1.0, 300.0, 7.0)
    assert g[0] == 300.0 and g[-1] == 1.0
    assert g[1] == pytest.approx(30.5, abs=0.1)
    assert np.allclose(rho_grid(4, 1.0, 5.0, 1.0), [5.0, 4.0, 3.0, 2.0, 1.0], atol=1e-14)


@given(st.integers(1, 400), st.floats(0.01, 5.0), st.floats(6.0, 500.0), st.floats(0.5, 12.0))
def test_rho_grid_monotone(n, lo, hi, rho):
    g = rho_grid(n, lo, hi, rho)
    assert g[0] == hi and g[-1] == lo and np.all(np.diff(g) < 0)


@given(st.integers(0, 2**31), st.sampled_from(["warped", "rho", "warped_rho"]), st.integers(1, 300))
def test_warped_grids_monotone(seed, spacing, n):
    r = RngStream(seed, 2)
    w = WarpCdf(gaussian(r, (12,)) * 2, gaussian(r, (12,)) * 2, 0.5, 200.0)
    g = step_grid(SamplerConfig(n_steps=n, spacing=spacing), w, 0.5, 200.0)
    assert g[0] == 200.0 and g[-1] == 0.5 and np.all(np.diff(g) < 0)


def test_identity_warp_grid_is_linear():
    w = WarpCdf.identity(10, 1.0, 11.0)
    assert np.allclose(step_grid(SamplerConfig(n_steps=5), w, 1.0, 11.0), [11, 9, 7, 5, 3, 1], atol=1e-13)


def test_euler_worked_example():
    x = euler_step(np.array([0.5, 0.0]), 1.0, 0.9, lambda x, t: oracle_score(SPEC2, x, t))
    assert x[0] == pytest.approx(0.4962, abs=1e-4) and x[1] == 0.0


def test_heun_equals_euler_for_constant_drift():
    field = lambda x, t: np.full_like(x, 0.3) / t
    x = np.array([1.0, -2.0])
    assert np.allclose(heun_step(x, 5.0, 4.0, field), euler_step(x, 5.0, 4.0, field), atol=1e-15)


def test_heun_exact_on_linear_drift():
    # score = -x / t^2 for a point mass at zero: dx/dt = x / t, so x(t) = x0 * t / t0
    field = lambda x, t: -x / t**2
    x, _ = integrate(np.array([3.0]), np.linspace(10.0, 1.0, 7), field, "heun")
    assert x[0] == pytest.approx(0.3, rel=1e-2)


def test_truncate_examples():
    out = truncate_posterior(np.array([0.5, 0.3, 0.15, 0.05]), nucleus_p=0.8)
    assert np.allclose(out, [0.625, 0.375, 0.0, 0.0], atol=1e-15)
    same = np.array([0.2, 0.8])
    assert np.array_equal(truncate_posterior(same), same)
    assert np.allclose(truncate_posterior(np.array([0.25, 0.75]), softmax_temp=0.5), [0.1, 0.9], atol=1e-15)


@given(st.integers(0, 2**31), st.floats(0.05, 1.0), st.floats(0.2, 3.0))
def test_truncate_is_distribution(seed, p, temp):
    probs = uniform(RngStream(seed, 5), (3, 7)) + 1e-3
    probs /= probs.sum(-1, keepdims=True)
    out = truncate_posterior(probs, temp, p)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-12) and np.all(out >= 0)
    assert np.all(out[np.arange(3), probs.argmax(-1)] > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(solver="rk4")
    with pytest.raises(ValueError):
        SamplerConfig(sigma_init=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(nucleus_p=1.5)


class Counting:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def __call__(self, *args):
        self.calls += 1
        return self.inner(*args)


def test_unit_guidance_skips_unconditional_pass():
    s = spec(0)
    for guidance, per_step in ((1.0, 1), (2.0, 2)):
        den = Counting(OracleDenoiser(s))
        sample(den, s.embeddings, SamplerConfig(n_steps=10, guidance=guidance), RngStream(0),
               batch=2, length=3, t_min=0.1, t_max=50.0)
        assert den.calls == 10 * per_step + 1


def test_sampling_deterministic():
    s = spec(1)
    cfg = SamplerConfig(n_steps=30, solver="heun", nucleus_p=0.9)
    runs = [sample(OracleDenoiser(s), s.embeddings, cfg, RngStream(4, 2), batch=5, length=4, t_min=0.1, t_max=50.0)
            for _ in range(2)]
    assert np.array_equal(runs[0].tokens, runs[1].tokens)
    assert np.array_equal(runs[0].final_state, runs[1].final_state)


def test_given_positions_stay_clean():
    s = spec(2)
    mask = np.array([[True, False, True, False]] * 3)
    cond = np.array([[0, 4, 0, 2]] * 3)
    res = sample(OracleDenoiser(s), s.embeddings, SamplerConfig(n_steps=20), RngStream(1),
                 mask=mask, cond_tokens=cond, t_min=0.1, t_max=50.0, record=True)
    assert np.array_equal(res.tokens[:, [1, 3]], cond[:, [1, 3]])
    for state in res.trajectory.states:
        assert np.array_equal(state[:, 1], np.broadcast_to(s.embeddings[4], (3, s.dim)))


def test_argmax_agrees_with_nearest_embedding():
    s = spec(3)
    kw = dict(batch=100, length=4, t_min=0.05, t_max=100.0)
    a = sample(OracleDenoiser(s), s.embeddings, SamplerConfig(n_steps=100, decode="argmax"), RngStream(2), **kw)
    b = sample(OracleDenoiser(s), s.embeddings, SamplerConfig(n_steps=100, decode="nearest_embedding"),
               RngStream(2), **kw)
    assert np.mean(a.tokens == b.tokens) >= 0.99


def test_oracle_samples_follow_prior():
    s = spec(4, v=4, d=8)
    res = sample(OracleDenoiser(s), s.embeddings, SamplerConfig(n_steps=100, spacing="rho"), RngStream(3),
                 batch=1000, length=4, t_min=0.05, t_max=100.0)
    freq = np.bincount(res.tokens.ravel(), minlength=4) / res.tokens.size
    assert 0.5 * np.abs(freq - s.prior).sum() <= 0.03


def test_nonfinite_state_raises():
    s = spec(5)
    bad = lambda x, c, m, p, t: np.full(x.shape[:2] + (s.prior.size,), np.nan)
    with pytest.raises(FloatingPointError):
        sample(bad, s.embeddings, SamplerConfig(n_steps=3), RngStream(0), batch=1, length=2, t_min=0.1, t_max=5.0)


def test_missing_arguments():
    s = spec(6)
    with pytest.raises(ValueError):
        sample(OracleDenoiser(s), s.embeddings, SamplerConfig(), RngStream(0), batch=1, length=2)
    with pytest.raises(ValueError):
        sample(OracleDenoiser(s), s.embeddings, SamplerConfig(), RngStream(0), mask=np.array([[True, False]]),
               t_min=0.1, t_max=5.0)
