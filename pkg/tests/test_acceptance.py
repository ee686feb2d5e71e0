"""Acceptance criteria, each at its stated tolerance and runtime bound."""

import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from pfclt.cli import main
from pfclt.exact import exact_diagnostics, exact_sigma, forward_filter, theoretical_estimator
from pfclt.experiments import (
    ExperimentConfig,
    compute_oracle,
    generate_dataset,
    run_replications,
    scaling_check,
    substream,
)
from pfclt.filter import resample_indices, run_filter
from pfclt.models import default_oracle_hmm
from pfclt.stats import chi2_2_sf, jarque_bera

HMM = default_oracle_hmm()


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def hmm_record(T, seed=2024):
    cfg = ExperimentConfig(model="discrete_hmm", T=T, seed=seed)
    return generate_dataset(cfg, model=HMM)[1]


@pytest.mark.acceptance(1, "estimator identity on the 2-state model, max rel. deviation <= 1e-10")
def test_criterion_1_estimator_identity():
    with Timer() as t:
        worst = 0.0
        for seed in range(50):
            z = hmm_record(5, seed)
            diag = exact_diagnostics(HMM, z)
            run = run_filter(HMM, z, 1000, substream(seed, 1), retain=True)
            x_star, _ = theoretical_estimator(run, diag)
            lhs = run.final_estimate * np.exp(run.log_alpha_bar_product)
            rhs = np.exp(diag.log_Z[-1]) * x_star
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.abs(rhs))))
    print(f"criterion 1: max relative deviation {worst:.3e} in {t.seconds:.2f}s")
    assert worst <= 1e-10
    assert t.seconds < 1.0


def _runs(z, m, n=200):
    return [run_filter(HMM, z, m, substream(7, m, r)) for r in range(n)]


@pytest.mark.acceptance(2, "RMSE(m=1e4)/RMSE(m=1e2) against the exact mean in [0.05, 0.2]")
def test_criterion_2_rmse_rate():
    z = hmm_record(5)
    exact = forward_filter(HMM, z).conditional_means[-1, 0]
    with Timer() as t:
        rmse = {m: np.sqrt(np.mean([(r.final_estimate[0] - exact) ** 2 for r in _runs(z, m)])) for m in (100, 10_000)}
    ratio = rmse[10_000] / rmse[100]
    print(f"criterion 2: RMSE ratio {ratio:.4f} in {t.seconds:.1f}s")
    assert 0.05 <= ratio <= 0.2
    assert t.seconds < 30


@pytest.mark.acceptance(3, "median |prod alpha_bar / p(z) - 1| drops by a factor in [5, 20]")
def test_criterion_3_evidence_convergence():
    z = hmm_record(5)
    log_Z = forward_filter(HMM, z).log_marginal[-1]
    with Timer() as t:
        med = {m: np.median([abs(np.exp(r.log_alpha_bar_product - log_Z) - 1) for r in _runs(z, m)]) for m in (100, 10_000)}
    factor = med[100] / med[10_000]
    print(f"criterion 3: drop factor {factor:.3f} in {t.seconds:.1f}s")
    assert 5 <= factor <= 20
    assert t.seconds < 30


@pytest.mark.acceptance(4, "Sigma_hat vs exact covariance within 15% (T=2, m=4000, R=2000)")
def test_criterion_4_covariance():
    cfg = ExperimentConfig(model="discrete_hmm", T=2, m=4000, m_oracle=4000, R=2000, seed=2024)
    z = generate_dataset(cfg, model=HMM)[1]
    with Timer() as t:
        exact = exact_sigma(HMM, z)
        rep = run_replications(cfg, z, compute_oracle(cfg, z, model=HMM), model=HMM)
    big = np.abs(exact) > 0.01
    rel = np.abs(rep.sigma_hat - exact)[big] / np.abs(exact)[big]
    print(f"criterion 4: exact {exact.ravel()} empirical {rep.sigma_hat.ravel()} in {t.seconds:.1f}s")
    assert big.any()
    assert np.all(rel <= 0.15)
    assert t.seconds < 120


def _normality_votes(base, seeds):
    passing = []
    for seed in seeds:
        cfg = replace(base, seed=seed)
        _, z = generate_dataset(cfg)
        rep = run_replications(cfg, z, compute_oracle(cfg, z))
        ok = sum(1 for r in rep.normality if r is not None and not r.reject_at_05)
        print(f"  seed {seed}: p-values {np.round(rep.p_values, 4)}")
        passing.append(ok >= 2)
    return sum(passing)


@pytest.mark.acceptance(5, "linear-uniform normality: >= 2 of 3 non-rejections in >= 8 of 10 seeds")
def test_criterion_5_linear_uniform_normality():
    base = ExperimentConfig(model="linear_uniform", T=25, m=1000, m_oracle=100_000, R=500)
    with Timer() as t:
        votes = _normality_votes(base, range(10))
    print(f"criterion 5: {votes}/10 seeds pass in {t.seconds:.1f}s")
    assert votes >= 8
    assert t.seconds <= 600


@pytest.mark.acceptance(6, "stochastic-volatility normality: >= 2 of 3 non-rejections in >= 8 of 10 seeds")
def test_criterion_6_stoch_vol_normality():
    base = ExperimentConfig(model="stoch_vol", T=25, m=500, R=500, sv_mu=(0.0,), sv_phi=0.5, sv_dim=3)
    with Timer() as t:
        votes = _normality_votes(base, range(10))
    print(f"criterion 6: {votes}/10 seeds pass in {t.seconds:.1f}s")
    assert votes >= 8
    assert t.seconds <= 600


@pytest.mark.acceptance(7, "sqrt(m) rate: diagonal Sigma_hat at m=500 vs m=2000 within 25%")
def test_criterion_7_scaling():
    cfg = ExperimentConfig(model="linear_uniform", R=500, m_list=(500, 2000), seed=11)
    with Timer() as t:
        _, z = generate_dataset(cfg)
        small, large = scaling_check(cfg, z, compute_oracle(cfg, z))
    d_small, d_large = np.diag(small.sigma_hat), np.diag(large.sigma_hat)
    rel = np.abs(d_small - d_large) / d_large
    print(f"criterion 7: diag m=500 {d_small} m=2000 {d_large} in {t.seconds:.1f}s")
    assert np.all(rel <= 0.25)
    assert t.seconds <= 900


@pytest.mark.acceptance(8, "multinomial resampling counts unbiased within 3 sd")
def test_criterion_8_resampling_unbiased():
    w = np.array([0.5, 0.3, 0.2])
    m, trials = 100_000, 1000
    rng = np.random.default_rng(8)
    with Timer() as t:
        counts = np.array([np.bincount(resample_indices(w, rng, m), minlength=3) for _ in range(trials)])
    mean = counts.mean(axis=0)
    print(f"criterion 8: mean counts {mean} in {t.seconds:.2f}s")
    assert np.all(np.abs(mean - m * w) <= 3 * np.sqrt(m * w * (1 - w)))
    assert t.seconds < 10


@pytest.mark.acceptance(9, "Jarque-Bera size in [0.03, 0.07] and JB(S=0, K=3) = 0 with p = 1")
def test_criterion_9_jb_size():
    rng = np.random.default_rng(9)
    with Timer() as t:
        rate = np.mean([jarque_bera(rng.standard_normal(1000)).reject_at_05 for _ in range(1000)])
    print(f"criterion 9: rejection rate {rate:.3f} in {t.seconds:.2f}s")
    assert 0.03 <= rate <= 0.07
    jb = 1000 / 6 * (0.0**2 + (3.0 - 3.0) ** 2 / 4)
    assert jb == 0.0 and chi2_2_sf(jb) == 1.0
    assert t.seconds < 5


SUBCOMMAND_ARGS = [
    ["simulate"],
    ["filter", "--particles", "200"],
    ["experiment", "--particles", "100", "--oracle-particles", "2000", "--reps", "20", "--horizon", "10"],
    ["experiment", "--model", "stoch_vol", "--particles", "100", "--oracle-particles", "1000", "--reps", "20", "--jobs", "2"],
    ["oracle-check", "--particles", "200", "--reps", "5", "--horizon", "5"],
    ["sigma-check", "--particles", "200", "--reps", "30", "--horizon", "3"],
    ["scaling", "--model", "discrete_hmm", "--reps", "20", "--horizon", "4", "--m-list", "50,200"],
]


@pytest.mark.acceptance(10, "every subcommand is byte-for-byte reproducible")
def test_criterion_10_determinism(tmp_path):
    for i, args in enumerate(SUBCOMMAND_ARGS):
        out = tmp_path / str(i)
        outputs = []
        for _ in range(2):
            shutil.rmtree(out, ignore_errors=True)
            assert main(args + ["--seed", "99", "--out", str(out)]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outputs[0] == outputs[1], args[0]
        assert len(outputs[0]) >= 2
    print(f"criterion 10: {len(SUBCOMMAND_ARGS)} invocations reproduced byte for byte")
