import math

import numpy as np
import pytest

from mhla.attention import AttentionConfig, linear_attention, mhla_forward, softmax_attention
from mhla.causal import chunkwise_causal_forward
from mhla.diagnostics import (
    REPORT_HEADER,
    collapse_report,
    default_partition,
    materialize_attention,
    mean_row_entropy,
    numerical_rank,
    rank_bound,
    reports_from_csv,
    reports_to_csv,
)
from mhla.partition import GRID_2D, LINEAR_1D, CoefficientMatrix, make_partition
from mhla.tensor_core import FeatureMap
from mhla.verify import random_instance


class TestMaterialize:
    @pytest.mark.parametrize("normalize", [True, False])
    def test_matches_forwards(self, rng, normalize):
        q, k, v, cfg = random_instance(rng, 48, 5, 6, normalize=normalize)
        for mech, fwd in [("softmax", lambda: softmax_attention(q, k, v)),
                          ("linear", lambda: linear_attention(q, k, v, cfg)),
                          ("mhla", lambda: mhla_forward(q, k, v, cfg))]:
            a = materialize_attention(q, k, cfg, mech)
            assert np.abs(a @ v - fwd()).max() <= 1e-10, mech

    def test_causal_matches_chunkwise(self, rng):
        q, k, v, cfg = random_instance(rng, 32, 4, 4, causal=True)
        a = materialize_attention(q, k, cfg, "mhla")
        assert np.abs(a @ v - chunkwise_causal_forward(q, k, v, cfg)).max() <= 1e-10
        assert not np.triu(a, 1).any()

    def test_softmax_rows(self, rng):
        q, k, v, cfg = random_instance(rng, 40, 4, 4)
        a = materialize_attention(q, k, cfg, "softmax")
        assert np.abs(a.sum(axis=1) - 1).max() <= 1e-12

    def test_normalized_rows(self, rng):
        q, k, v, cfg = random_instance(rng, 40, 4, 4)
        for mech in ("linear", "mhla"):
            assert np.abs(materialize_attention(q, k, cfg, mech).sum(axis=1) - 1).max() <= 1e-10

    def test_identity_coefficients_block_diagonal(self, rng):
        q, k, _, cfg = random_instance(rng, 24, 3, 4)
        cfg = AttentionConfig(cfg.feature_map, True, cfg.partition, CoefficientMatrix(np.eye(4)))
        a = materialize_attention(q, k, cfg, "mhla")
        b = cfg.partition.block_of_token
        off = b[:, None] != b[None, :]
        assert np.all(a[off] == 0.0)
        assert np.all(a[~off] > 0.0)

    def test_cap(self):
        q = np.zeros((8193, 1))
        with pytest.raises(ValueError, match="cap"):
            materialize_attention(q, q, AttentionConfig(), "linear")

    def test_unknown_mechanism(self, rng):
        q = rng.standard_normal((4, 2))
        with pytest.raises(ValueError):
            materialize_attention(q, q, AttentionConfig(), "sparse")


class TestRank:
    def test_identity(self):
        assert numerical_rank(np.eye(16)) == 16

    def test_low_rank_product(self, rng):
        qf, kf = rng.random((256, 16)), rng.random((256, 16))
        assert numerical_rank(qf @ kf.T) <= 16

    def test_explicit_tolerance(self):
        a = np.diag([1.0, 1e-3, 1e-9])
        assert numerical_rank(a) == 3
        assert numerical_rank(a, tol=1e-6) == 2

    def test_zero_and_empty(self):
        assert numerical_rank(np.zeros((4, 4))) == 0
        assert numerical_rank(np.zeros((0, 3))) == 0

    def test_mhla_rank(self):
        r = {x.mechanism: x for x in collapse_report(0, 256, 16, 16)}
        assert r["linear"].numerical_rank <= 16
        assert r["mhla"].numerical_rank >= 100
        assert r["mhla"].numerical_rank <= r["mhla"].rank_bound == 256

    def test_bounds(self):
        p = make_partition(64, LINEAR_1D, 16)
        assert rank_bound("softmax", 64, 8) == 64
        assert rank_bound("linear", 64, 8) == 8
        assert rank_bound("mhla", 64, 2, p) == 32


class TestEntropy:
    def test_uniform(self):
        assert abs(mean_row_entropy(np.full((16, 16), 1 / 16)) - math.log(16)) <= 1e-12

    def test_one_hot(self):
        assert mean_row_entropy(np.eye(5)) == 0.0

    def test_half_half(self):
        assert abs(mean_row_entropy([[0.5, 0.5, 0, 0]]) - math.log(2)) <= 1e-15

    def test_bad_row_named(self):
        with pytest.raises(ValueError, match="row 1"):
            mean_row_entropy([[1.0, 0.0], [0.7, 0.7]])

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            mean_row_entropy([[1.2, -0.2]])

    def test_tiny_negative_clamped(self):
        assert mean_row_entropy([[1.0 + 1e-13, -1e-13]]) == pytest.approx(0.0, abs=1e-11)


class TestReport:
    def test_invariants(self):
        for seed in range(3):
            reports = collapse_report(seed, 64, 8, 4)
            assert [r.mechanism for r in reports] == ["softmax", "linear", "mhla"]
            for r in reports:
                assert 0 <= r.mean_row_entropy <= math.log(64) + 1e-9
                assert r.numerical_rank <= 64
                assert r.normalized_entropy == pytest.approx(r.mean_row_entropy / math.log(64))
            assert reports[1].numerical_rank <= min(64, reports[1].rank_bound)
            assert reports[2].numerical_rank > reports[1].numerical_rank

    def test_deterministic(self):
        assert collapse_report(9, 64, 8, 4) == collapse_report(9, 64, 8, 4)

    def test_identity_entropy_unsupported(self):
        reports = collapse_report(0, 16, 4, 4, FeatureMap.IDENTITY)
        assert not math.isnan(reports[0].mean_row_entropy)
        assert all(math.isnan(r.mean_row_entropy) for r in reports[1:])

    def test_without_rank(self):
        assert all(r.numerical_rank == -1 for r in collapse_report(0, 64, 8, 4, with_rank=False))

    def test_csv_round_trip(self):
        reports = collapse_report(1, 64, 8, 4) + collapse_report(0, 16, 4, 4, "identity")
        text = reports_to_csv(reports)
        assert text.splitlines()[0] == ",".join(REPORT_HEADER)
        back = reports_from_csv(text)
        for a, b in zip(reports, back):
            assert a.csv_row() == b.csv_row()

    def test_bad_header(self):
        with pytest.raises(ValueError):
            reports_from_csv("a,b\n")

    def test_default_partition(self):
        assert default_partition(256, 16).layout == GRID_2D
        assert default_partition(256, 8).layout == LINEAR_1D
        assert default_partition(64, 4).layout == GRID_2D
