import numpy as np
import pytest
from scipy import stats

from conftest import make_data
from oracles import sample_icc
from swrve.covariance import CovStructure, IccSpec, VarianceComponents, ar1_matrix, icc_to_components
from swrve.datagen import Dataset, GenSpec, generate, sample_mvn_ar1, substream
from swrve.design import build_design
from swrve.errors import InvalidSpec, SchemaError


def test_zero_components_pure_trend():
    d = build_design(4, 2, 3)
    data = generate(GenSpec(d, "NE_RI", VarianceComponents(sigma_eps_sq=1e-300), seed=1))
    assert np.allclose(data.y, data.period, atol=1e-140)


def test_rows_and_treatment():
    d = build_design(8, 4, 10)
    data = generate(GenSpec(d, "DTD_RI", VarianceComponents(tau_gamma_sq=0.1, decay=0.5), seed=2))
    assert len(data) == 8 * 5 * 10
    assert np.array_equal(data.treated, d.treatment[data.cluster, data.period - 1])
    counts = np.bincount(data.cluster * 5 + data.period - 1)
    assert np.all(counts == 10)


def test_determinism_and_substreams():
    a = make_data(seed=3, rep=4)
    b = make_data(seed=3, rep=4)
    c = make_data(seed=3, rep=5)
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)
    x1 = substream(9, 1).standard_normal(3)
    x2 = substream(9, 1).standard_normal(3)
    assert np.array_equal(x1, x2)


def test_random_intervention_variance():
    # cluster means of treated cells average out everything but v_i (and a small remainder)
    d = build_design(1000, 1, 200)
    vc = VarianceComponents(tau_v_sq=0.3)
    data = generate(GenSpec(d, "NE_RI", vc, seed=7))
    treated = data.treated == 1
    m = np.bincount(data.cluster[treated], weights=data.y[treated]) / 200
    assert np.var(m, ddof=1) == pytest.approx(0.3 + 1 / 200, rel=0.12)


def test_sample_icc_matches_table_values():
    d = build_design(2000, 4, 10)
    vc = icc_to_components(IccSpec(0.05, 0.15, 0.8), "NE_RI")
    data = generate(GenSpec(d, "NE_RI", vc, seed=20240))
    est = sample_icc(data)
    assert abs(est["wpicc_control"] - 0.05) < 0.005
    assert abs(est["bpicc_control"] - 0.04) < 0.005


def test_sample_icc_zero():
    d = build_design(500, 4, 10)
    data = generate(GenSpec(d, "NE_RI", VarianceComponents(), seed=14))
    est = sample_icc(data)
    assert abs(est["wpicc_control"]) < 0.005


def test_intervention_icc_exceeds_control():
    d = build_design(2000, 1, 10)
    vc = icc_to_components(IccSpec(0.05, 0.15, 0.8), "NE_RI")
    data = generate(GenSpec(d, "NE_RI", vc, seed=15))
    flip = Dataset(data.cluster, data.period, data.individual, (1 - data.treated).astype(np.int8), data.y)
    assert sample_icc(flip)["wpicc_control"] > sample_icc(data)["wpicc_control"] + 0.05


def test_dtd_lag_two_correlation():
    # 25000 clusters in the last sequence give an SD near 0.001 for the lag-2 ICC
    d = build_design(100_000, 4, 10)
    vc = icc_to_components(IccSpec(0.05, 0.05, 0.8), "DTD_RI")
    data = generate(GenSpec(d, "DTD_RI", vc, seed=16))
    cm = np.bincount(data.cluster * 5 + data.period - 1, weights=data.y, minlength=d.n_clusters * 5)
    rows = cm.reshape(-1, 5)[d.sequence_of_cluster == 3][:, :4] / 10  # control for periods 1..4
    e = rows - rows.mean(axis=0)
    lag2 = np.mean(np.concatenate([e[:, 0] * e[:, 2], e[:, 1] * e[:, 3]]))
    assert lag2 / (vc.tau_gamma_sq + 1.0) == pytest.approx(0.05 * 0.64, abs=0.003)


def test_control_variance_limit():
    d = build_design(4000, 4, 100)
    vc = icc_to_components(IccSpec(0.05, 0.10, 0.8), "NE_RI")
    data = generate(GenSpec(d, "NE_RI", vc, seed=17))
    ctrl = data.treated == 0
    e = data.y[ctrl] - data.period[ctrl]
    total = vc.tau_alpha_sq + vc.tau_gamma_sq + 1.0
    assert np.var(e) == pytest.approx(total, rel=0.02)


def test_ar1_sampler():
    rng = np.random.default_rng(0)
    g = sample_mvn_ar1(2, 1.0, 0.8, rng, size=1_000_000)
    assert abs(np.corrcoef(g[:, 0], g[:, 1])[0, 1] - 0.8) < 0.01
    g0 = sample_mvn_ar1(4, 2.0, 0.0, np.random.default_rng(1), size=200_000)
    assert np.allclose(np.cov(g0.T), 2.0 * np.eye(4), atol=0.03)


def test_ar1_matches_dense_sampler():
    J, tau2, r = 5, 0.7, 0.6
    rec = sample_mvn_ar1(J, tau2, r, np.random.default_rng(2), size=40_000)
    L = np.linalg.cholesky(tau2 * ar1_matrix(J, r))
    dense = np.random.default_rng(3).standard_normal((40_000, J)) @ L.T
    for j in range(J):
        assert stats.ks_2samp(rec[:, j], dense[:, j]).pvalue > 0.01
    assert np.allclose(np.cov(rec.T), np.cov(dense.T), atol=0.03)
    # a linear combination also matches, so the joint law agrees
    w = np.linspace(-1, 1, J)
    assert stats.ks_2samp(rec @ w, dense @ w).pvalue > 0.01


def test_csv_round_trip(tmp_path):
    data = make_data(4, 2, 2)
    path = tmp_path / "d.csv"
    data.to_csv(path)
    back = Dataset.from_csv(path)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.treated, data.treated)
    assert path.read_text().splitlines()[0] == "cluster,period,individual,treated,y"


@pytest.mark.parametrize("text", [
    "cluster,period,y\n0,1,2\n",
    "cluster,period,individual,treated,y\n0,1,0,2,1.0\n",
    "cluster,period,individual,treated,y\n0,1,0,0,abc\n",
    "cluster,period,individual,treated,y\n",
])
def test_csv_schema_errors(text):
    with pytest.raises(SchemaError):
        Dataset.from_csv(text)


def test_generator_restrictions():
    with pytest.raises(InvalidSpec):
        GenSpec(build_design(4, 2, 1), "EXCH", VarianceComponents())
    assert CovStructure.parse("ne_ri") is CovStructure.NE_RI
