import json
import math

import numpy as np
import pytest

from stochgee import (
    Cluster,
    Dataset,
    DatasetParseError,
    InvalidInputError,
    InvalidVarianceError,
    Parameter,
    conditional_moments,
    dataset_from_arrays,
    get_link,
    link_eval,
    load_dataset,
    write_dataset,
)
from stochgee.model import sidecar_path

LINKS = ["identity", "log", "probit"]


class TestLinks:
    def test_log_all_orders_at_zero(self):
        for order in range(4):
            assert link_eval("log", order, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_identity_orders(self):
        assert link_eval("identity", 0, 2.5) == 2.5
        assert link_eval("identity", 1, 2.5) == 1.0
        assert link_eval("identity", 2, 2.5) == 0.0
        assert link_eval("identity", 3, 2.5) == 0.0

    def test_probit_at_zero(self):
        assert link_eval("probit", 0, 0.0) == pytest.approx(0.5, abs=1e-15)
        assert link_eval("probit", 1, 0.0) == pytest.approx(0.3989422804, abs=1e-10)

    def test_order_out_of_range(self):
        with pytest.raises(InvalidInputError):
            link_eval("log", 4, 0.0)

    @pytest.mark.parametrize("name", LINKS)
    def test_first_derivative_positive(self, name):
        u = np.linspace(-3.0, 3.0, 61)
        assert np.all(link_eval(name, 1, u) > 0)

    @pytest.mark.parametrize("name", LINKS)
    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_derivatives_match_finite_differences(self, name, order):
        link = get_link(name)
        h = 1e-5
        for u in np.linspace(-3.0, 3.0, 25):
            fd = (link.eval(order - 1, u + h) - link.eval(order - 1, u - h)) / (2 * h)
            exact = link.eval(order, u)
            assert exact == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_inverses(self):
        u = np.linspace(-2.0, 2.0, 9)
        for name in LINKS:
            link = get_link(name)
            np.testing.assert_allclose(link.inverse(link.eval(0, u)), u, atol=1e-9)

    def test_unknown_link(self):
        with pytest.raises(InvalidInputError):
            get_link("cauchit")


class TestClusterDataset:
    def test_cluster_validation(self):
        with pytest.raises(InvalidInputError):
            Cluster(1, np.array([1.0, 2.0]), np.ones((3, 2)))
        with pytest.raises(InvalidInputError):
            Cluster(1, np.array([np.inf]), np.ones((1, 1)))

    def test_dataset_requires_consecutive_indices(self):
        c1 = Cluster(1, np.zeros(2), np.ones((2, 1)))
        c3 = Cluster(3, np.zeros(2), np.ones((2, 1)))
        with pytest.raises(InvalidInputError, match="non-consecutive"):
            Dataset((c1, c3), 1, 2)

    def test_dataset_m_max_enforced(self):
        c1 = Cluster(1, np.zeros(3), np.ones((3, 1)))
        with pytest.raises(InvalidInputError, match="m_max"):
            Dataset((c1,), 1, 2)

    def test_prefix(self):
        ds = dataset_from_arrays(
            [(np.zeros(2), np.ones((2, 1))), (np.ones(2), np.ones((2, 1)))]
        )
        assert ds.prefix(1).n == 1
        assert ds.prefix(2) is ds

    def test_parameter_box(self):
        par = Parameter(np.array([0.5]), lower=np.array([0.0]), upper=np.array([1.0]))
        assert par.contains([0.7])
        assert not par.contains([1.5])
        with pytest.raises(InvalidInputError):
            Parameter(np.array([2.0]), lower=np.array([0.0]), upper=np.array([1.0]))


class TestConditionalMoments:
    def test_identity_link(self):
        c = Cluster(1, np.zeros(3), np.arange(6.0).reshape(3, 2))
        mom = conditional_moments(c, np.array([1.0, -1.0]), "identity")
        np.testing.assert_allclose(mom.mean, c.regressors @ [1.0, -1.0])
        np.testing.assert_allclose(mom.variance_diag, np.ones(3))

    def test_log_link_zero_eta(self):
        c = Cluster(1, np.zeros(2), np.zeros((2, 2)))
        mom = conditional_moments(c, np.array([3.0, -1.0]), "log")
        np.testing.assert_allclose(mom.mean, np.ones(2))
        np.testing.assert_allclose(mom.variance_diag, np.ones(2))

    def test_log_link_scalar_example(self):
        c = Cluster(1, np.zeros(2), np.array([[1.0], [2.0]]))
        mom = conditional_moments(c, np.array([0.5]), "log")
        np.testing.assert_allclose(mom.mean, [math.exp(0.5), math.exp(1.0)], rtol=1e-15)
        np.testing.assert_allclose(
            mom.variance_diag, [math.exp(0.5), math.exp(1.0)], rtol=1e-15
        )

    def test_row_permutation_consistency(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 2))
        beta = np.array([0.3, -0.2])
        perm = [2, 0, 3, 1]
        a = conditional_moments(Cluster(1, np.zeros(4), x), beta, "log")
        b = conditional_moments(Cluster(1, np.zeros(4), x[perm]), beta, "log")
        np.testing.assert_allclose(a.mean[perm], b.mean)
        np.testing.assert_allclose(a.variance_diag[perm], b.variance_diag)

    def test_width_mismatch(self):
        c = Cluster(1, np.zeros(2), np.ones((2, 2)))
        with pytest.raises(InvalidInputError):
            conditional_moments(c, np.array([1.0]), "identity")

    def test_variance_overflow_rejected(self):
        c = Cluster(1, np.zeros(1), np.array([[1000.0]]))
        with pytest.raises(InvalidVarianceError):
            conditional_moments(c, np.array([1.0]), "log")


class TestDatasetIO:
    def _toy(self):
        return dataset_from_arrays(
            [
                (np.array([0.25, -1.5]), np.array([[1.0, 0.5], [0.0, 2.0]])),
                (
                    np.array([1.0, 2.0, 3.0]),
                    np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]),
                ),
            ],
            m_max=3,
            link="identity",
            beta0=np.array([0.5, -0.5]),
        )

    def test_round_trip(self, tmp_path):
        ds = self._toy()
        path = str(tmp_path / "data.csv")
        write_dataset(ds, path)
        back = load_dataset(path)
        assert back.n == 2 and back.p == 2 and back.m_max == 3
        assert back.link == "identity"
        for a, b in zip(ds.clusters, back.clusters):
            np.testing.assert_array_equal(a.response, b.response)
            np.testing.assert_array_equal(a.regressors, b.regressors)
        assert back.digest() == ds.digest()

    def test_round_trip_random_values(self, tmp_path):
        rng = np.random.default_rng(9)
        ds = dataset_from_arrays(
            [(rng.standard_normal(3), rng.standard_normal((3, 2)) * 1e-7)],
            link="log",
        )
        path = str(tmp_path / "d.csv")
        write_dataset(ds, path)
        assert load_dataset(path).digest() == ds.digest()

    def test_sizes_fixture(self, tmp_path):
        ds = self._toy()
        path = str(tmp_path / "d.csv")
        write_dataset(ds, path)
        back = load_dataset(path)
        assert [c.size for c in back.clusters] == [2, 3]
        assert back.m_max >= 3

    def test_non_consecutive_cluster_ids(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cluster,obs,y,x1\n1,1,0.0,1.0\n3,1,0.0,1.0\n")
        (tmp_path / "bad.meta.json").write_text(
            json.dumps({"n": 2, "p": 1, "m_max": 2, "link": None, "beta0": None})
        )
        with pytest.raises(DatasetParseError, match="non-consecutive") as err:
            load_dataset(str(path))
        assert err.value.line == 3

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cluster,obs,y,x1\n1,1,0.0,1.0\n1,2,0.0\n")
        (tmp_path / "bad.meta.json").write_text(
            json.dumps({"n": 1, "p": 1, "m_max": 2, "link": None, "beta0": None})
        )
        with pytest.raises(DatasetParseError, match="ragged") as err:
            load_dataset(str(path))
        assert err.value.line == 3

    def test_size_above_m_max(self, tmp_path):
        path = tmp_path / "bad.csv"
        rows = ["cluster,obs,y,x1"] + [f"1,{j},0.0,1.0" for j in (1, 2, 3)]
        path.write_text("\n".join(rows) + "\n")
        (tmp_path / "bad.meta.json").write_text(
            json.dumps({"n": 1, "p": 1, "m_max": 2, "link": None, "beta0": None})
        )
        with pytest.raises(DatasetParseError, match="m_max") as err:
            load_dataset(str(path))
        assert err.value.line == 4

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "alone.csv"
        path.write_text("cluster,obs,y,x1\n1,1,0.0,1.0\n")
        with pytest.raises(DatasetParseError, match="sidecar"):
            load_dataset(str(path))

    def test_sidecar_path(self):
        assert sidecar_path("a/b.csv") == "a/b.meta.json"
        assert sidecar_path("a/b.dat") == "a/b.dat.meta.json"
