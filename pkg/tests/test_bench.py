import numpy as np
import pytest

from h1bkv import bench
from h1bkv.sketch import hamming_scores


def test_key_bytes():
    assert bench.key_bytes_per_token("float", 64, 256) == 128
    assert bench.key_bytes_per_token("bitwise", 64, 256) == 32
    assert bench.key_bytes_per_token("bitwise", 64, 300) == 38
    with pytest.raises(ValueError):
        bench.key_bytes_per_token("int8", 64, 256)


def test_kernels_compute_scores():
    k = bench.scoring_kernels(50, 16, 128, seed=2)
    f, b = k["float"](), k["bitwise"]()
    assert f.shape == b.shape == (50,)
    assert np.all(np.abs(b) <= 1.0)
    # both paths rank keys similarly; the correlation is far from zero
    assert np.corrcoef(f, b)[0, 1] > 0.5


def test_bitwise_kernel_is_hamming():
    k = bench.scoring_kernels(10, 8, 64, seed=0)
    out = k["bitwise"]()
    assert out.dtype == np.float64
    assert set(np.round(out * 64).astype(int).tolist()) <= set(range(-64, 65, 2))
    assert hamming_scores is not None


def test_rows_shape():
    rows = bench.bench_scoring([16, 32], d=8, b=64, repeats=2, warmup=0)
    assert [(r.context, r.mode) for r in rows] == [(16, "float"), (16, "bitwise"), (32, "float"), (32, "bitwise")]
    assert all(r.median_ns > 0 and r.repeats == 2 for r in rows)
    assert rows[1].to_json()["bytes"] == 8


@pytest.mark.parametrize(
    "kwargs",
    [{"modes": ["gpu"]}, {"repeats": 0}, {"warmup": -1}, {"d": 0}, {"contexts": [0]}],
)
def test_rejects_bad_arguments(kwargs):
    args = {"contexts": [8], "repeats": 1, "warmup": 0, **kwargs}
    with pytest.raises(ValueError):
        bench.bench_scoring(**args)


def test_time_call_counts():
    calls = []
    median, std = bench.time_call(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7 and median >= 0 and std >= 0
