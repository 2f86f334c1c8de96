import numpy as np
import pytest

from psypipe import _fallback, kernels
from psypipe.textutil import jaccard

import oracles

try:
    from psypipe import _kernels
except ImportError:  # pragma: no cover
    _kernels = None

BACKENDS = [_fallback] + ([_kernels] if _kernels is not None else [])


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    if _kernels is not None:
        assert kernels.BACKEND == "cython"


def bootstrap_oracle(truth, recovered, idx):
    out = []
    for row in idx:
        rs = []
        for j in range(truth.shape[1]):
            x = truth[row, j].tolist()
            y = recovered[row, j].tolist()
            if len(set(x)) == 1 or len(set(y)) == 1:
                rs = None
                break
            rs.append(oracles.pearson_loop(x, y))
        out.append(float("nan") if rs is None else sum(rs) / len(rs))
    return np.array(out)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def test_bootstrap_kernel_matches_oracle(backend):
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(25, 6))
    rec = truth + rng.normal(size=truth.shape)
    idx = rng.integers(0, 25, size=(60, 25), dtype=np.int64)
    idx[0] = 3  # constant resample
    got = backend.bootstrap_mean_r(truth, rec, idx)
    want = bootstrap_oracle(truth, rec, idx)
    assert np.isnan(got[0])
    np.testing.assert_allclose(got[1:], want[1:], atol=1e-12)


def random_csr(rng, n_rows, vocab, max_len):
    ptr = [0]
    tok = []
    for _ in range(n_rows):
        ids = sorted(set(rng.integers(0, vocab, size=int(rng.integers(0, max_len))).tolist()))
        tok.extend(ids)
        ptr.append(len(tok))
    return np.asarray(ptr, dtype=np.int32), np.asarray(tok, dtype=np.int32)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def test_jaccard_kernel_matches_oracle(backend):
    rng = np.random.default_rng(1)
    sp, st = random_csr(rng, 80, 40, 12)
    tp, tt = random_csr(rng, 15, 40, 10)
    best_stem, best_val = backend.jaccard_best(sp, st, tp, tt)
    for s in range(80):
        sent = frozenset(st[sp[s] : sp[s + 1]].tolist())
        scores = [jaccard(sent, frozenset(tt[tp[t] : tp[t + 1]].tolist())) for t in range(15)]
        assert best_val[s] == pytest.approx(max(scores), abs=1e-15)
        assert best_stem[s] == scores.index(max(scores))


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
def test_backends_agree_exactly():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(50, 6))
    rec = truth + rng.normal(size=truth.shape)
    idx = rng.integers(0, 50, size=(400, 50), dtype=np.int64)
    np.testing.assert_allclose(_kernels.bootstrap_mean_r(truth, rec, idx), _fallback.bootstrap_mean_r(truth, rec, idx), atol=1e-13)
    sp, st = random_csr(rng, 200, 60, 15)
    tp, tt = random_csr(rng, 60, 60, 10)
    a = _kernels.jaccard_best(sp, st, tp, tt)
    b = _fallback.jaccard_best(sp, st, tp, tt)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_jaccard_example():
    assert jaccard(frozenset("abc"), frozenset("bcd")) == 0.5
    assert jaccard(frozenset(), frozenset()) == 0.0
