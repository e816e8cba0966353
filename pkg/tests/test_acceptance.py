"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary.

Tolerances and runtime budgets are fixed here; a failing criterion is reported
as such rather than relaxed.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import record, unit_rows
from test_denoiser import _grad_check
from cdcd import runner
from cdcd.config import resolve, train_config
from cdcd.cli import main
from cdcd.denoiser import DenoiserConfig, OracleDenoiser
from cdcd.evaluation import (
    convergence_study,
    frontier_cross_entropy,
    marginal_tv,
    source_nll,
    transition_tv,
)
from cdcd.numerics import RngStream, gaussian, integers, uniform
from cdcd.optim import AdamConfig
from cdcd.sampler import SamplerConfig, sample
from cdcd.score import OracleSpec, bayes_posterior, interpolate_score, oracle_score
from cdcd.training import train_step
from cdcd.warp import (
    WarpCdf,
    WarpView,
    eval_cdf,
    fit_step,
    importance_weight,
    invert_cdf,
    normalize_time,
    pdf,
    sample_timestep,
    warp_temperature,
    warp_uniformity,
)

TOY_P = [[0.1, 0.6, 0.2, 0.1], [0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7], [0.6, 0.2, 0.1, 0.1]]
TOY = {
    "seed": 0, "t_min": 0.1, "t_max": 300.0, "d": 16, "n_bins": 100,
    "data": {"source": "markov", "transition": TOY_P},
    "model": {"blocks": 4},
    "train": {"steps": 5000, "seq_len": 16, "checkpoint_every": 5000, "cond_dropout": 0.5, "lr_schedule": "cosine"},
    "sampler": {"decode": "nearest_embedding"},
}
TOY_SAMPLES = 1000


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# 1 -------------------------------------------------------------------------

def test_criterion_1_oracle_score_identity():
    def run():
        r = RngStream(101, 0)
        worst = 0.0
        for _ in range(1000):
            v, d = int(integers(r, 16, (1,))[0]) + 1, int(integers(r, 8, (1,))[0]) + 1
            emb = unit_rows(gaussian(r, (v, d)))
            prior = uniform(r, (v,)) + 0.01
            spec = OracleSpec(prior / prior.sum(), emb)
            t = float(np.exp(np.log(0.1) + uniform(r, (1,))[0] * np.log(3000.0)))
            x = emb[int(integers(r, v, (1,))[0])] + t * gaussian(r, (d,))
            s_orc = oracle_score(spec, x, t)
            s_int = interpolate_score(bayes_posterior(spec, x, t), emb, x, t)
            worst = max(worst, float(np.linalg.norm(s_int - s_orc) / np.linalg.norm(s_orc)))
        return worst

    worst, secs = timed(run)
    ok = worst <= 1e-10 and secs < 10
    record(1, ok, f"max relative error {worst:.2e} over 1000 cases (<= 1e-10), {secs:.1f}s (< 10s)")
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_2_marginal_recovery():
    r = RngStream(202, 0)
    prior = np.arange(1.0, 9.0)
    spec = OracleSpec(prior / prior.sum(), unit_rows(gaussian(r, (8, 4))))

    def run():
        cfg = SamplerConfig(n_steps=200, solver="euler", spacing="rho", rho=7.0, self_condition=False)
        res = sample(OracleDenoiser(spec), spec.embeddings, cfg, RngStream(202, 1),
                     batch=20000, length=1, t_min=0.1, t_max=300.0)
        return marginal_tv(res.tokens, spec.prior)

    tv, secs = timed(run)
    ok = tv <= 0.02 and secs < 300
    record(2, ok, f"TV to prior {tv:.4f} over 20000 samples (<= 0.02), {secs:.1f}s (< 300s)")
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_3_solver_orders():
    r = RngStream(303, 0)
    spec = OracleSpec(np.full(6, 1 / 6), unit_rows(gaussian(r, (6, 3))))

    def run():
        return convergence_study(spec, solver="euler"), convergence_study(spec, solver="heun")

    (euler, heun), secs = timed(run)
    ok = 0.8 <= euler.slope <= 1.2 and 1.7 <= heun.slope <= 2.3 and secs < 120
    record(3, ok, f"Euler slope {euler.slope:.3f} in [0.8, 1.2], Heun slope {heun.slope:.3f} in [1.7, 2.3], "
                  f"{secs:.1f}s (< 120s)")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_4_warp_algebra():
    def run():
        checks = {}
        ident = WarpCdf.identity(100, 1.0, 300.0)
        tp = np.linspace(0, 1, 1001)
        checks["identity init"] = (np.array_equal(eval_cdf(ident, tp), tp)
                                   and np.array_equal(invert_cdf(ident, tp), tp)
                                   and np.array_equal(pdf(ident, tp), np.ones_like(tp)))
        worst_rt, worst_pdf, worst_comp = 0.0, 0.0, 0.0
        identities = True
        for seed in range(50):
            r = RngStream(404, seed)
            w = WarpCdf(gaussian(r, (10,)) * 1.5, gaussian(r, (10,)) * 1.5, 1.0, 300.0)
            v = w.view()
            x = uniform(r, (1000,))
            worst_rt = max(worst_rt, float(np.max(np.abs(invert_cdf(v, eval_cdf(v, x)) - x))),
                           float(np.max(np.abs(eval_cdf(v, invert_cdf(v, x)) - x))))
            mids = np.cumsum(v.input_widths) - v.input_widths / 2
            worst_pdf = max(worst_pdf, abs(math.fsum(pdf(v, mids) * v.input_widths) - 1.0))
            identities &= np.array_equal(warp_temperature(v, 1.0).output_widths, v.output_widths)
            identities &= np.array_equal(warp_uniformity(v, 0.0).output_widths, v.output_widths)
            identities &= np.array_equal(warp_uniformity(v, 1.0).output_widths, v.input_widths)
            t1, t2 = 0.2 + 4.8 * uniform(r, (2,))
            a = pdf(warp_temperature(warp_temperature(v, t1), t2), tp)
            b = pdf(warp_temperature(v, t1 * t2), tp)
            worst_comp = max(worst_comp, float(np.max(np.abs(a - b) / b)))
        checks["round trip <= 1e-12"] = worst_rt <= 1e-12
        checks["pdf sums to 1"] = worst_pdf <= 1e-15
        checks["T=1, mu=0, mu=1 identities"] = bool(identities)
        checks["temperature composition <= 1e-10"] = worst_comp <= 1e-10

        r = RngStream(404, 999)
        v = WarpCdf(gaussian(r, (8,)) * 1.5, gaussian(r, (8,)) * 1.5, 1.0, 300.0).view()
        n = 100000
        tps = normalize_time(sample_timestep(v, uniform(RngStream(404, 1000), (n,))), 1.0, 300.0)
        edges = np.concatenate([[0], np.cumsum(v.input_widths)[:-1], [1.0]])
        counts = np.histogram(tps, bins=edges)[0]
        p = v.output_widths
        z = np.max(np.abs(counts - n * p) / np.sqrt(n * p * (1 - p)))
        checks["histogram within 3 sigma"] = z <= 3
        return checks, worst_rt, worst_pdf, worst_comp, z

    (checks, rt, pdf_err, comp, z), secs = timed(run)
    ok = all(checks.values()) and secs < 30
    failed = [k for k, v in checks.items() if not v]
    record(4, ok, f"round trip {rt:.1e}, pdf sum error {pdf_err:.1e}, composition {comp:.1e}, "
                  f"histogram max |z| {z:.2f}, {secs:.1f}s (< 30s)" + (f"; failed: {failed}" if failed else ""))
    assert ok


# 5 -------------------------------------------------------------------------

def _fit(n, target, steps=3000):
    w = WarpCdf.identity(n, 1.0, 300.0, optimizer=AdamConfig(lr=1e-2))
    r = RngStream(505, n)
    for _ in range(steps):
        tp = uniform(r, (64,))
        fit_step(w, 1.0 + 299.0 * tp, target(tp))
    grid = np.linspace(0, 1, 1001)
    return grid, eval_cdf(w, grid)


def test_criterion_5_warp_fitting():
    wt, wu = np.array([0.2, 0.5, 0.3]), np.array([1.5, 0.3, 0.9])
    knots_t, knots_u = np.concatenate([[0], np.cumsum(wt)]), np.concatenate([[0], np.cumsum(wu)])

    def run():
        grid, f = _fit(10, lambda tp: np.interp(tp, knots_t, knots_u))
        err_pl = float(np.max(np.abs(f - np.interp(grid, knots_t, knots_u) / wu.sum())))
        grid, f = _fit(10, lambda tp: 2.0 * tp)
        err_lin = float(np.max(np.abs(f - grid)))
        return err_pl, err_lin

    (err_pl, err_lin), secs = timed(run)
    ok = err_pl <= 1e-2 and err_lin <= 1e-2 and secs < 60
    record(5, ok, f"piecewise-linear recovery L_inf {err_pl:.2e}, linear loss to identity L_inf {err_lin:.2e} "
                  f"(<= 1e-2), {secs:.1f}s (< 60s)")
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_6_importance_sampling():
    v = WarpView(np.array([0.5, 0.5]), np.array([0.8, 0.2]), 1.0, 300.0)

    def run():
        tp = invert_cdf(v, uniform(RngStream(606, 0), (100000,)))
        vals = importance_weight(v, tp) * tp**2
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))

    (mean, se), secs = timed(run)
    ok = abs(mean - 1 / 3) <= 3 * se and secs < 10
    record(6, ok, f"weighted mean {mean:.5f} vs 1/3, |diff| = {abs(mean - 1 / 3) / se:.2f} SE (<= 3), {secs:.1f}s")
    assert ok


# 7 -------------------------------------------------------------------------

GRAD_CFG = DenoiserConfig(vocab=4, d=2, blocks=2, width=32, heads=2, fourier_features=2, time_mlp_width=4,
                          mlp_ratio=1)
# a 2-block model small enough for the 2000-parameter bound (width 32 alone exceeds it)
GRAD_CFG_SMALL = DenoiserConfig(vocab=4, d=2, blocks=2, width=8, heads=2, fourier_features=2, time_mlp_width=4,
                                mlp_ratio=1)


def test_criterion_7_gradients():
    def run():
        return [_grad_check(cfg, 7, 1.0, 1e-5) for cfg in (GRAD_CFG, GRAD_CFG_SMALL)]

    results, secs = timed(run)
    parts, ok = [], secs < 120
    for (reports, n_params), label in zip(results, ("width 32", "width 8")):
        worst = max(reports, key=lambda r: r.max_rel_err)
        ok &= worst.max_rel_err <= 1e-4
        parts.append(f"{label}: {n_params} params, max rel err {worst.max_rel_err:.2e} ({worst.parameter_name})")
    ok &= results[1][1] <= 2000
    record(7, ok, "; ".join(parts) + f" (<= 1e-4, small model <= 2000 params), {secs:.1f}s (< 120s)")
    assert ok


# 8 and 9 -------------------------------------------------------------------

def _train(raw):
    cfg = resolve(raw)
    run = runner.new_run(cfg)
    tcfg = train_config(cfg)
    while run.state.step < tcfg.steps:
        train_step(run.state, runner.next_batch(run), tcfg)
    return run


def _toy_metrics(run, self_condition):
    src = run.source
    held_out = src.sample(RngStream(808, 1), 256, 16)
    ce = frontier_cross_entropy(run.state.model, run.state.table, held_out, run.cfg["t_max"],
                                RngStream(808, 2), self_condition=self_condition)
    tokens, _ = runner.generate(run, TOY_SAMPLES, 808, self_condition=self_condition)
    return {"ce": ce, "bigram_tv": float(transition_tv(tokens, src.transition).max()),
            "marginal_tv": marginal_tv(tokens, src.marginal(16)), "nll": source_nll(src, tokens)}


@pytest.fixture(scope="module")
def toy_run():
    start = time.perf_counter()
    run = _train(TOY)
    metrics = _toy_metrics(run, self_condition=True)
    return run, metrics, time.perf_counter() - start


def test_criterion_8_toy_learning(toy_run):
    run, m, secs = toy_run
    rate = run.source.entropy_rate()
    ce_ok = m["ce"] - rate <= 0.1
    tv_ok = m["bigram_tv"] <= 0.05
    ok = ce_ok and tv_ok and secs < 1200
    record(8, ok, f"CE {m['ce']:.4f} vs entropy rate {rate:.4f} (gap {m['ce'] - rate:.4f} <= 0.1: "
                  f"{'ok' if ce_ok else 'no'}); bigram TV {m['bigram_tv']:.4f} (<= 0.05: {'ok' if tv_ok else 'no'}); "
                  f"marginal TV {m['marginal_tv']:.4f}; {secs:.0f}s (< 1200s)")
    assert ok


TIE = 0.01


def test_criterion_9_directional(toy_run):
    _, on, _ = toy_run
    no_sc = _toy_metrics(_train({**TOY, "train": {**TOY["train"], "self_cond_fraction": 0.0}}), self_condition=False)
    no_warp_cfg = {**TOY, "train": {**TOY["train"], "time_warping": False}}
    no_warp = _toy_metrics(_train(no_warp_cfg), self_condition=True)
    sc_holds = on["ce"] <= no_sc["ce"] + TIE
    warp_holds = on["ce"] <= no_warp["ce"] + TIE
    fmt = lambda m: f"CE {m['ce']:.4f}, bigram TV {m['bigram_tv']:.3f}, sample NLL {m['nll']:.3f}"
    record(9, sc_holds, f"self-conditioning ON [{fmt(on)}] vs OFF [{fmt(no_sc)}]", gating=False)
    record(9, warp_holds, f"time warping ON [{fmt(on)}] vs OFF [{fmt(no_warp)}]", gating=False)


# 10 ------------------------------------------------------------------------

DET = {
    "t_min": 0.5, "t_max": 20.0, "d": 4, "n_bins": 8, "seed": 11,
    "data": {"source": "markov", "transition": [[0.2, 0.8, 0.0], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]]},
    "model": {"blocks": 2, "width": 16, "heads": 2, "fourier_features": 4, "time_mlp_width": 8, "mlp_ratio": 2},
    "train": {"batch": 8, "seq_len": 6, "steps": 40, "checkpoint_every": 20},
    "sampler": {"n_steps": 20},
    "eval": {"n_samples": 50},
}


def _no_wall(path):
    return [line.split(",", 2)[0] + "," + line.split(",", 2)[2] for line in path.read_text().splitlines()[1:]]


def test_criterion_10_determinism(tmp_path):
    def run():
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(DET))
        half = tmp_path / "half.json"
        half.write_text(json.dumps({**DET, "train": {**DET["train"], "steps": 20}}))
        for name in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        assert main(["train", "--config", str(half), "--out", str(tmp_path / "c")]) == 0
        assert main(["train", "--checkpoint", str(tmp_path / "c" / "step-00000020.ckpt"), "--config", str(cfg),
                     "--out", str(tmp_path / "c")]) == 0
        final = lambda n: (tmp_path / n / "step-00000040.ckpt").read_bytes()
        checks = {
            "rerun checkpoints identical": final("a") == final("b"),
            "rerun metrics identical": _no_wall(tmp_path / "a" / "metrics.csv") == _no_wall(tmp_path / "b" / "metrics.csv"),
            "resume checkpoint identical": final("a") == final("c"),
            "resume metrics identical": _no_wall(tmp_path / "a" / "metrics.csv") == _no_wall(tmp_path / "c" / "metrics.csv"),
        }
        ckpt = str(tmp_path / "a" / "step-00000040.ckpt")
        for name in ("s1", "s2"):
            assert main(["sample", "--checkpoint", ckpt, "--seed", "4", "--out", str(tmp_path / name)]) == 0
        checks["sample rerun identical"] = ((tmp_path / "s1" / "samples.txt").read_bytes()
                                            == (tmp_path / "s2" / "samples.txt").read_bytes())
        again = tmp_path / "again.ckpt"
        runner.save_run(runner.load_run(ckpt), again)
        checks["load/save byte identical"] = again.read_bytes() == final("a")
        return checks

    checks, secs = timed(run)
    ok = all(checks.values()) and secs < 300
    failed = [k for k, v in checks.items() if not v]
    record(10, ok, f"{sum(checks.values())}/{len(checks)} byte-identity checks, {secs:.1f}s (< 300s)"
                   + (f"; failed: {failed}" if failed else ""))
    assert ok
