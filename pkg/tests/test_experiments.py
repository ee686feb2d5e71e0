import csv
from dataclasses import replace

import numpy as np
import pytest

from pfclt.exact import exact_sigma, forward_filter
from pfclt.experiments import (
    ExperimentConfig,
    ExperimentDegenerate,
    ValidationError,
    build_model,
    compute_oracle,
    fmt,
    generate_dataset,
    run_replications,
    scaling_check,
    substream,
    write_report,
)
from pfclt.filter import run_filter
from pfclt.models import DiscreteHMMModel, LinearUniformModel, StochVolModel
from pfclt.stats import sample_covariance


def hmm_cfg(**kw):
    base = dict(model="discrete_hmm", T=5, m=200, m_oracle=200, R=60, seed=17, bins=5)
    base.update(kw)
    return ExperimentConfig(**base)


def test_build_model_kinds():
    assert isinstance(build_model(ExperimentConfig()), LinearUniformModel)
    sv = build_model(ExperimentConfig(model="stoch_vol", sv_mu=(0.5,)))
    assert isinstance(sv, StochVolModel)
    np.testing.assert_array_equal(sv.mu, [0.5, 0.5, 0.5])
    assert isinstance(build_model(hmm_cfg()), DiscreteHMMModel)
    with pytest.raises(ValidationError):
        build_model(hmm_cfg(hmm_pi0=(0.4, 0.4)))


@pytest.mark.parametrize(
    "kw, key",
    [
        (dict(m=0), "m"),
        (dict(R=1), "R"),
        (dict(T=0), "T"),
        (dict(model="nope"), "model"),
        (dict(m=10, m_oracle=5), "m_oracle"),
        (dict(sv_phi=1.0), "sv_phi"),
        (dict(m_list=()), "m_list"),
        (dict(seed=-1), "seed"),
    ],
)
def test_config_validation(kw, key):
    with pytest.raises(ValidationError) as err:
        ExperimentConfig(**kw)
    assert err.value.key == key


def test_seed_required():
    with pytest.raises(ValidationError):
        generate_dataset(ExperimentConfig())


def test_substreams_independent_and_reproducible():
    a = substream(5, 1).random(4)
    assert a.tobytes() == substream(5, 1).random(4).tobytes()
    assert not np.array_equal(a, substream(5, 2).random(4))
    assert not np.array_equal(a, substream(6, 1).random(4))


def test_dataset_determinism_and_support():
    cfg = ExperimentConfig(T=30, seed=3)
    s1, z1 = generate_dataset(cfg)
    s2, z2 = generate_dataset(cfg)
    assert s1.tobytes() == s2.tobytes() and z1.tobytes() == z2.tobytes()
    model = build_model(cfg)
    assert np.all(np.abs(z1 - s1 @ model.C.T) <= 1)
    assert s1.shape == (30, 3) and z1.shape == (30, 2)


def test_discrete_oracle_is_exact():
    cfg = hmm_cfg()
    _, z = generate_dataset(cfg)
    np.testing.assert_array_equal(compute_oracle(cfg, z), forward_filter(build_model(cfg), z).conditional_means[-1])


def test_continuous_oracle_uses_its_own_stream():
    cfg = ExperimentConfig(T=5, m=50, m_oracle=500, seed=4)
    _, z = generate_dataset(cfg)
    a = compute_oracle(cfg, z)
    assert a.tobytes() == compute_oracle(cfg, z).tobytes()
    assert a.shape == (3,)


def test_identical_keys_give_zero_covariance():
    cfg = hmm_cfg(R=2)
    _, z = generate_dataset(cfg)
    rep = run_replications(cfg, z, compute_oracle(cfg, z), rep_keys=[1, 1])
    np.testing.assert_allclose(rep.sigma_hat, 0.0, atol=1e-20)
    assert rep.normality == [None]


def test_replication_matches_direct_filter():
    cfg = hmm_cfg(R=3)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    rep = run_replications(cfg, z, oracle)
    x = run_filter(build_model(cfg), z, cfg.m, substream(cfg.seed, 2)).final_estimate
    np.testing.assert_allclose(rep.errors[1], np.sqrt(cfg.m) * (x - oracle), rtol=1e-15)


def test_replication_statistics():
    cfg = hmm_cfg(R=300)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    rep = run_replications(cfg, z, oracle)
    sigma = exact_sigma(build_model(cfg), z)[0, 0]
    assert rep.errors.shape == (300, 1)
    assert len(rep.used) + rep.n_collapsed == 300
    np.testing.assert_array_equal(rep.sigma_hat, sample_covariance(rep.used))
    assert abs(rep.mean_error[0]) <= 3 * np.sqrt(sigma / cfg.R)
    assert rep.histograms[0][1].sum() == 300 and len(rep.histograms[0][1]) == cfg.bins
    assert 0 <= rep.p_values[0] <= 1


def test_replications_exchangeable_under_key_order():
    cfg = hmm_cfg(R=5)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    a = run_replications(cfg, z, oracle, rep_keys=[1, 2, 3, 4, 5])
    b = run_replications(cfg, z, oracle, rep_keys=[5, 4, 3, 2, 1])
    np.testing.assert_array_equal(a.errors, b.errors[::-1])
    np.testing.assert_allclose(a.sigma_hat, b.sigma_hat, rtol=1e-12)


def test_parallel_matches_serial():
    cfg = hmm_cfg(R=8)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    a = run_replications(cfg, z, oracle)
    b = run_replications(replace(cfg, jobs=3), z, oracle)
    assert a.errors.tobytes() == b.errors.tobytes()


def test_collapses_counted_and_excluded():
    # uniform noise makes an impossible observation collapse every filter
    cfg = ExperimentConfig(T=2, m=5, m_oracle=5, R=4, seed=1)
    z = np.array([[0.0, 0.0], [40.0, 40.0]])
    with pytest.raises(ExperimentDegenerate):
        run_replications(cfg, z, np.zeros(3))


def test_partial_collapse_bookkeeping():
    cfg = ExperimentConfig(T=3, m=3, m_oracle=3, R=60, seed=2)
    model = LinearUniformModel()
    _, z = generate_dataset(replace(cfg, T=3))
    rep = run_replications(cfg, z, np.zeros(3), model=model)
    assert rep.n_collapsed + len(rep.used) == cfg.R
    assert np.all(np.isnan(rep.errors[rep.collapsed]))
    assert not np.any(np.isnan(rep.used))


def test_regenerate_mode_changes_records():
    cfg = hmm_cfg(R=4, regenerate=True)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    a = run_replications(cfg, z, oracle)
    b = run_replications(replace(cfg, regenerate=False), z, oracle)
    assert not np.array_equal(a.errors, b.errors)
    assert a.errors.tobytes() == run_replications(cfg, z, oracle).errors.tobytes()


def test_single_entry_scaling_matches_replications():
    cfg = hmm_cfg(R=20)
    _, z = generate_dataset(cfg)
    oracle = compute_oracle(cfg, z)
    (row,) = scaling_check(cfg, z, oracle, m_list=[cfg.m])
    np.testing.assert_array_equal(row.sigma_hat, run_replications(cfg, z, oracle).sigma_hat)
    np.testing.assert_allclose(row.unscaled_cov, row.sigma_hat / cfg.m)


def test_fmt_round_trips():
    for v in (0.1, 1 / 3, -2.5e-300, 12345678.901234567):
        assert float(fmt(v)) == v
    assert fmt(float("nan")) == "nan"


def test_write_report_files(tmp_path):
    cfg = hmm_cfg(R=10, bins=4)
    _, z = generate_dataset(cfg)
    rep = run_replications(cfg, z, compute_oracle(cfg, z))
    paths = write_report(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["errors.csv", "hist_component_1.csv", "report.csv"]
    rows = list(csv.DictReader(open(tmp_path / "errors.csv")))
    assert len(rows) == 10 and set(rows[0]) == {"rep", "component_1", "collapsed"}
    np.testing.assert_array_equal([float(r["component_1"]) for r in rows], rep.errors[:, 0])
    report = {(r["metric"], r["component"], r["component_2"]): r["value"] for r in csv.DictReader(open(tmp_path / "report.csv"))}
    assert float(report[("sigma_hat", "1", "1")]) == rep.sigma_hat[0, 0]
    assert report[("replications", "", "")] == "10"
    hist = list(csv.DictReader(open(tmp_path / "hist_component_1.csv")))
    assert len(hist) == 4 and sum(int(h["count"]) for h in hist) == 10
