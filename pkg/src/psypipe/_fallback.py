"""Pure numpy implementations of the hot kernels (same contracts as ``_kernels``)."""
from __future__ import annotations

import numpy as np

_CHUNK = 512


def bootstrap_mean_r(truth: np.ndarray, recovered: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n_boot, n = idx.shape
    out = np.empty(n_boot, dtype=np.float64)
    for start in range(0, n_boot, _CHUNK):
        block = idx[start : start + _CHUNK]
        x = truth[block]  # (chunk, n, d)
        y = recovered[block]
        degenerate = (
            (x.min(axis=1) == x.max(axis=1)) | (y.min(axis=1) == y.max(axis=1))
        ).any(axis=1)
        sx = x.sum(axis=1)
        sy = y.sum(axis=1)
        vx = n * (x * x).sum(axis=1) - sx * sx
        vy = n * (y * y).sum(axis=1) - sy * sy
        cov = n * (x * y).sum(axis=1) - sx * sy
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.clip(cov / np.sqrt(vx * vy), -1.0, 1.0)
        mean_r = r.mean(axis=1)
        mean_r[degenerate] = np.nan
        out[start : start + len(block)] = mean_r
    return out


def jaccard_best(
    sent_ptr: np.ndarray, sent_tok: np.ndarray, stem_ptr: np.ndarray, stem_tok: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    stems = [frozenset(stem_tok[stem_ptr[t] : stem_ptr[t + 1]].tolist()) for t in range(len(stem_ptr) - 1)]
    n_sent = len(sent_ptr) - 1
    best_stem = np.full(n_sent, -1, dtype=np.int64)
    best_val = np.zeros(n_sent, dtype=np.float64)
    for s in range(n_sent):
        tokens = set(sent_tok[sent_ptr[s] : sent_ptr[s + 1]].tolist())
        best = -1.0
        for t, stem in enumerate(stems):
            union = len(tokens) + len(stem)
            inter = len(tokens & stem)
            union -= inter
            jac = inter / union if union else 0.0
            if jac > best:
                best = jac
                best_stem[s] = t
        best_val[s] = max(best, 0.0)
    return best_stem, best_val
