"""The three distortion measures used in every attack objective, each
differentiable through diffcore.

All three accept plain tensors/arrays or graph nodes and return a scalar
node, so the same code path serves evaluation and gradient-based attacks.
Batched forms operate on (B, d) inputs row by row and sum over the batch.
"""

import numpy as np

from . import diffcore as dc

DISTANCE_KINDS = ("l2", "cosine", "wasserstein")


class DistanceError(Exception):
    pass


def _as_rows(x):
    node = x if isinstance(x, dc.Node) else dc.constant(x)
    if len(node.shape) == 1:
        return dc.reshape(node, (1, node.shape[0]))
    if len(node.shape) == 2:
        return node
    return dc.reshape(node, (1, node.value.size))


def _ones_column(d):
    return dc.constant(np.ones((d, 1)))


def _row_l2(a, b):
    # (B, 1) Euclidean norms of row differences
    if a.shape != b.shape:
        raise DistanceError(f"l2: shape {a.shape} does not match shape {b.shape}")
    diff = dc.subtract(a, b)
    rowsq = dc.matmul(dc.mul(diff, diff), _ones_column(a.shape[1]))
    return dc.sqrt(rowsq)


def _row_cosine(a, b):
    # 1 - cos via the half-angle identity ||u - v||^2 / 2 on unit rows, which
    # is exactly zero on identical inputs and never drops below zero
    if a.shape != b.shape:
        raise DistanceError(f"cosine: shape {a.shape} does not match shape {b.shape}")
    ones = _ones_column(a.shape[1])
    na = dc.matmul(dc.mul(a, a), ones)
    nb = dc.matmul(dc.mul(b, b), ones)
    if np.any(na.value == 0.0) or np.any(nb.value == 0.0):
        raise DistanceError("cosine distance is undefined for zero-norm inputs")
    ua = dc.mul(a, dc.exp(dc.scalar_mul(dc.log(na), -0.5)))
    ub = dc.mul(b, dc.exp(dc.scalar_mul(dc.log(nb), -0.5)))
    diff = dc.subtract(ua, ub)
    return dc.scalar_mul(dc.matmul(dc.mul(diff, diff), ones), 0.5)


def _row_wasserstein(a, b):
    # 1-D W1 between the rows' empirical value distributions: sorted matching
    # is the optimal transport plan on the line
    if a.shape != b.shape:
        raise DistanceError(f"wasserstein: shape {a.shape} does not match shape {b.shape}")
    diff = dc.subtract(dc.sort_ascending(a), dc.sort_ascending(b))
    absdiff = dc.add(dc.relu(diff), dc.relu(dc.scalar_mul(diff, -1.0)))
    return dc.scalar_mul(dc.matmul(absdiff, _ones_column(a.shape[1])), 1.0 / a.shape[1])


_ROW_BUILDERS = {"l2": _row_l2, "cosine": _row_cosine, "wasserstein": _row_wasserstein}


def dist_l2(a, b):
    """Euclidean norm of the flattened difference."""
    a, b = _as_rows(a), _as_rows(b)
    if a.shape != b.shape:
        raise DistanceError(f"l2: shape {a.shape} does not match shape {b.shape}")
    return dc.total(_row_l2(a, b))


def dist_cosine(a, b):
    """1 - cosine similarity, in [0, 2]; zero-norm inputs are a hard error."""
    a, b = _as_rows(a), _as_rows(b)
    if a.shape != b.shape:
        raise DistanceError(f"cosine: shape {a.shape} does not match shape {b.shape}")
    return dc.total(_row_cosine(a, b))


def dist_wasserstein(a, b):
    """Mean |sort(a)_i - sort(b)_i| over the flattened values; zero whenever
    one input is a permutation of the other."""
    a, b = _as_rows(a), _as_rows(b)
    if a.value.size != b.value.size:
        raise DistanceError(
            f"wasserstein: element counts {a.value.size} and {b.value.size} differ")
    a = dc.reshape(a, (1, a.value.size))
    b = dc.reshape(b, (1, b.value.size))
    return dc.total(_row_wasserstein(a, b))


def distance(kind, a, b):
    if kind not in _ROW_BUILDERS:
        raise DistanceError(f"unknown distance kind '{kind}'")
    return {"l2": dist_l2, "cosine": dist_cosine, "wasserstein": dist_wasserstein}[kind](a, b)


def batch_rowwise(kind, a, b):
    """(B, 1) node of per-sample distances between two (B, d) batches."""
    if kind not in _ROW_BUILDERS:
        raise DistanceError(f"unknown distance kind '{kind}'")
    a, b = _as_rows(a), _as_rows(b)
    if a.shape[0] != b.shape[0]:
        raise DistanceError(f"batch sizes {a.shape[0]} and {b.shape[0]} differ")
    return _ROW_BUILDERS[kind](a, b)


def batch_distortion(kind, a, b):
    """Sum over the batch of the per-sample distance."""
    return dc.total(batch_rowwise(kind, a, b))
