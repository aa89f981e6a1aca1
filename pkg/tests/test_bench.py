import math
import struct

import numpy as np
import pytest

from mhla import bench
from mhla.bench import (
    BENCH_HEADER,
    BenchRecord,
    RunConfig,
    append_records,
    fit_scaling_exponent,
    floor_sqrt_blocks,
    records_from_csv,
    records_to_csv,
    run_benchmark,
)
from mhla.errors import (
    FixtureError,
    FixtureMagicError,
    FixtureTruncatedError,
    FixtureVersionError,
)
from mhla.fixtures import (
    coefficients_from_tensors,
    coefficients_to_tensors,
    decode_fixture,
    encode_fixture,
    load_fixture,
    save_fixture,
)
from mhla.partition import CoefficientMatrix, causal_mask


def bitwise_equal(a, b):
    return a.shape == b.shape and np.array_equal(a.view(np.uint64), b.view(np.uint64))


class TestFixtures:
    def test_round_trip_special_values(self, tmp_path):
        t = {"specials": np.array([[np.nan, -0.0, np.inf], [-np.inf, 5e-324, 1.0]]),
             "empty": np.zeros((0, 3)), "ünï": np.arange(6.0).reshape(2, 3)}
        save_fixture(tmp_path / "f.bin", t)
        back = load_fixture(tmp_path / "f.bin")
        assert list(back) == list(t)
        assert all(bitwise_equal(back[k], t[k]) for k in t)

    def test_layout(self):
        buf = encode_fixture({"ab": np.array([[1.5]])})
        assert buf[:4] == b"MHLA"
        assert struct.unpack("<II", buf[4:12]) == (1, 1)
        assert struct.unpack("<H", buf[12:14]) == (2,)
        assert buf[14:16] == b"ab"
        assert struct.unpack("<IId", buf[16:]) == (1, 1, 1.5)

    def test_empty_set(self, tmp_path):
        save_fixture(tmp_path / "e.bin", {})
        assert load_fixture(tmp_path / "e.bin") == {}
        assert (tmp_path / "e.bin").stat().st_size == 12

    def test_bad_magic(self):
        buf = bytearray(encode_fixture({"a": np.ones((1, 1))}))
        buf[0:4] = b"XXXX"
        with pytest.raises(FixtureMagicError) as info:
            decode_fixture(bytes(buf))
        assert info.value.code == "bad-magic"

    def test_bad_version(self):
        buf = bytearray(encode_fixture({}))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FixtureVersionError) as info:
            decode_fixture(bytes(buf))
        assert info.value.code == "bad-version"

    def test_truncated_everywhere(self):
        buf = encode_fixture({"a": np.ones((2, 2)), "b": np.zeros((1, 3))})
        for cut in range(len(buf)):
            with pytest.raises(FixtureError) as info:
                decode_fixture(buf[:cut])
            assert info.value.code in ("truncated", "bad-magic")
        with pytest.raises(FixtureTruncatedError):
            decode_fixture(buf[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(FixtureError):
            decode_fixture(encode_fixture({}) + b"\0")

    def test_three_dims_rejected(self):
        with pytest.raises(ValueError):
            encode_fixture({"a": np.zeros((1, 1, 1))})

    def test_many_random(self, rng):
        t = {f"t{i}": rng.standard_normal((int(rng.integers(0, 6)), int(rng.integers(0, 6))))
             for i in range(200)}
        back = decode_fixture(encode_fixture(t))
        assert all(bitwise_equal(back[k], t[k]) for k in t)

    def test_coefficients(self, rng):
        c = causal_mask(CoefficientMatrix(rng.random((5, 5))))
        back = coefficients_from_tensors(decode_fixture(encode_fixture(coefficients_to_tensors(c))))
        assert back.causal and np.array_equal(back.values, c.values)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_fixture(tmp_path / "nope.bin")


def synthetic(mech, ns, fn):
    return [BenchRecord(mech, n, 64, 1, 5, fn(n), n / fn(n)) for n in ns]


class TestScaling:
    def test_quadratic(self):
        recs = synthetic("softmax", [1024, 2048, 4096, 8192], lambda n: 3e-9 * n * n)
        assert abs(fit_scaling_exponent(recs, "softmax") - 2.0) <= 1e-9

    def test_linear(self):
        recs = synthetic("mhla", [1000, 4000, 16000], lambda n: 7e-6 * n)
        assert abs(fit_scaling_exponent(recs, "mhla") - 1.0) <= 1e-9

    def test_skipped_ignored(self):
        recs = synthetic("softmax", [1024, 2048, 8192], lambda n: 1e-9 * n * n)
        recs.append(BenchRecord("softmax", 65536, 64, 1, 0, math.nan, math.nan))
        assert abs(fit_scaling_exponent(recs, "softmax") - 2.0) <= 1e-9

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            fit_scaling_exponent(synthetic("linear", [1024, 8192], float), "linear")

    def test_narrow_span(self):
        with pytest.raises(ValueError, match="8x"):
            fit_scaling_exponent(synthetic("linear", [1024, 2048, 4096], float), "linear")


class TestFloorSqrt:
    @pytest.mark.parametrize("n,m", [(1, 1), (16, 4), (1024, 32), (2048, 32), (4096, 64),
                                     (8192, 64), (65536, 256), (13, 1), (12, 3)])
    def test_examples(self, n, m):
        assert floor_sqrt_blocks(n) == m

    def test_invariant(self):
        for n in range(1, 3000):
            m = floor_sqrt_blocks(n)
            assert n % m == 0 and m * m <= n


class TestRunBenchmark:
    def test_complete_small(self):
        cfg = RunConfig(n_values=[64, 128, 512], d=8, reps=3)
        recs = run_benchmark(cfg)
        assert [(r.mechanism, r.n) for r in recs] == [(m, n) for n in cfg.n_values for m in cfg.mechanisms]
        for r in recs:
            assert r.repetitions == 3 and r.median_seconds > 0
            assert r.tokens_per_second == pytest.approx(r.n / r.median_seconds)
        assert [r.m for r in recs if r.mechanism == "mhla"] == [8, 8, 16]

    def test_median_of_reps(self):
        ticks = iter(range(1000))
        recs = run_benchmark(RunConfig(mechanisms=["linear"], n_values=[16], d=2, reps=3),
                             timer=lambda: float(next(ticks)))
        assert recs[0].median_seconds == 1.0

    def test_softmax_skipped_by_budget(self):
        recs = run_benchmark(RunConfig(mechanisms=["softmax", "mhla"], n_values=[64], d=4, reps=3,
                                       mem_budget=64 * 64 * 8 - 1))
        assert recs[0].skipped and math.isnan(recs[0].median_seconds)
        assert not recs[1].skipped

    def test_budget_env(self, monkeypatch):
        monkeypatch.setenv(bench.MEM_BUDGET_ENV, "100")
        assert RunConfig().memory_budget() == 100
        assert run_benchmark(RunConfig(mechanisms=["softmax"], n_values=[16], d=2, reps=3))[0].skipped
        assert RunConfig(mem_budget=7).memory_budget() == 7

    def test_inputs_shared_across_mechanisms(self, caplog):
        with caplog.at_level("INFO", logger="mhla.bench"):
            run_benchmark(RunConfig(n_values=[32], d=4, reps=3))
        digests = {rec.message.split("sha256=")[1] for rec in caplog.records if "sha256=" in rec.message}
        assert len(digests) == 1

    def test_single_precision(self):
        recs = run_benchmark(RunConfig(n_values=[64], d=4, reps=3, precision="single"))
        assert all(not r.skipped for r in recs)

    def test_doubling_ratios(self):
        cfg = RunConfig(mechanisms=["mhla", "softmax"], n_values=[4096, 8192], d=64, reps=5)
        recs = {(r.mechanism, r.n): r.median_seconds for r in run_benchmark(cfg)}
        assert 1.5 <= recs["mhla", 8192] / recs["mhla", 4096] <= 3.0
        assert 3.0 <= recs["softmax", 8192] / recs["softmax", 4096] <= 6.0


class TestCSV:
    def test_round_trip(self):
        recs = synthetic("linear", [8, 16], lambda n: 0.1 * n)
        recs.append(BenchRecord("softmax", 32, 64, 1, 0, math.nan, math.nan))
        text = records_to_csv(recs)
        assert ",".join(BENCH_HEADER) in text.splitlines()
        back = records_from_csv(text)
        assert [r.csv_row() for r in back] == [r.csv_row() for r in recs]

    def test_append_header_once(self, tmp_path):
        path = tmp_path / "b.csv"
        append_records(path, synthetic("linear", [8], float))
        append_records(path, synthetic("linear", [16], float))
        text = path.read_text()
        assert text.count(",".join(BENCH_HEADER)) == 1
        assert len(records_from_csv(text)) == 2

    def test_bad_header(self):
        with pytest.raises(ValueError):
            records_from_csv("x,y\n1,2\n")


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.reps >= 5 and cfg.m_rule == "floor-sqrt-n"
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [{"reps": 2}, {"m_rule": "sqrt"}, {"precision": "half"},
                                     {"mechanisms": ["flash"]}, {"colour": 1}])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            RunConfig.from_dict(bad)

    def test_blocks_for(self):
        assert RunConfig(m_rule="fixed", m=8).blocks_for(1024) == 8
        assert RunConfig().blocks_for(1024) == 32

    def test_load(self, tmp_path):
        (tmp_path / "c.json").write_text('{"d": 32, "n_values": [128]}')
        cfg = RunConfig.load(tmp_path / "c.json")
        assert cfg.d == 32 and cfg.n_values == [128]
