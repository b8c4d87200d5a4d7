"""Per-layer singular-value extremes, condition numbers, and
gradient-distribution diagnostics.

The SVD is a one-sided Jacobi iteration: at desk scale (matrices up to a
few hundred rows) its simplicity and high relative accuracy beat a faster
bidiagonalization. Conditioning is measured on layer weights directly,
not on input-dependent Jacobians.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor


def jacobi_svd(w, tol=1e-14, max_sweeps=60):
    """Full SVD W = U @ diag(s) @ Vt via one-sided Jacobi rotations.

    Returns (U, s, Vt) with s in descending order. Works on the transpose
    when the matrix is wide so the rotation count follows the smaller side.
    Columns whose singular value underflows to zero get a deterministic
    orthonormal completion so U is always a valid basis.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"jacobi_svd: expected a 2-D matrix, got shape {w.shape}")
    m, n = w.shape
    if m < n:
        u, s, vt = jacobi_svd(w.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T

    # rows of `at` are the working columns of W, kept contiguous for the dots
    at = np.array(w.T, dtype=np.float64, order="C")
    vt = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        norms2 = np.sum(at * at, axis=1)  # refreshed per sweep to cap update drift
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = norms2[p]
                aqq = norms2[q]
                apq = at[p] @ at[q]
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                # Jacobi rotation zeroing the (p, q) Gram entry
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = c * t
                cp = at[p].copy()
                cq = at[q]
                at[p] = c * cp - s_ * cq
                at[q] = s_ * cp + c * cq
                vp = vt[p].copy()
                vq = vt[q]
                vt[p] = c * vp - s_ * vq
                vt[q] = s_ * vp + c * vq
                norms2[p] = c * c * app - 2.0 * c * s_ * apq + s_ * s_ * aqq
                norms2[q] = s_ * s_ * app + 2.0 * c * s_ * apq + c * c * aqq
        if not rotated:
            break

    sing = np.sqrt(np.sum(at * at, axis=1))
    order = np.argsort(sing, kind="stable")[::-1]
    sing = sing[order]
    at = at[order]
    vt = vt[order]

    u = np.zeros((m, n))
    tiny = np.finfo(np.float64).tiny
    for j in range(n):
        if sing[j] > tiny:
            u[:, j] = at[j] / sing[j]
    # complete zero columns against the existing basis (canonical vectors,
    # Gram-Schmidt) so recomposition with raised singular values stays valid
    for j in range(n):
        if sing[j] > tiny:
            continue
        for k in range(m):
            cand = np.zeros(m)
            cand[k] = 1.0
            cand -= u @ (u.T @ cand)
            norm = np.sqrt(cand @ cand)
            if norm > 1e-8:
                u[:, j] = cand / norm
                break
    return u, sing, vt


def power_iteration_norm(w, iters=5000, seed=0, rtol=1e-13):
    """Spectral norm by power iteration on W^T W; independent of the SVD path."""
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(w.shape[1])
    x /= np.sqrt(x @ x)
    estimate = 0.0
    for _ in range(iters):
        y = w.T @ (w @ x)
        norm = np.sqrt(y @ y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        new_estimate = float(np.sqrt(norm))  # ||W^T W x|| -> sigma_max^2 at the fixed point
        if abs(new_estimate - estimate) <= rtol * new_estimate:
            return float(new_estimate)
        estimate = new_estimate
    return float(estimate)


@dataclass(frozen=True)
class SpectralExtremes:
    sigma_max: float
    sigma_min: float  # smallest nonzero singular value
    kappa: float
    kappa_infinite: bool


def svd_extremes(w):
    """(sigma_max, smallest nonzero sigma, kappa) of a 2-D tensor.

    Singular values below max_dim * sigma_max * 1e-12 count as zero for the
    rank decision; kappa is flagged infinite when rank < column count.
    """
    arr = w.values if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"svd_extremes: expected a 2-D tensor, got shape {arr.shape}")
    _, s, _ = jacobi_svd(arr)
    sigma_max = float(s[0]) if s.size else 0.0
    rank_tol = max(arr.shape) * sigma_max * 1e-12
    nonzero = s[s > rank_tol]
    rank = int(nonzero.size)
    sigma_min = float(nonzero[-1]) if rank else 0.0
    if rank < arr.shape[1]:
        return SpectralExtremes(sigma_max, sigma_min, float("inf"), True)
    return SpectralExtremes(sigma_max, sigma_min, sigma_max / sigma_min, False)


@dataclass(frozen=True)
class LayerSpectrum:
    layer_index: int
    rows: int
    cols: int
    sigma_max: float
    sigma_min: float
    kappa: float
    kappa_infinite: bool


def model_conditioning_report(model):
    """One LayerSpectrum per parameterized layer, in layer order."""
    report = []
    for i, layer in enumerate(model.layers):
        ext = svd_extremes(layer.weight)
        rows, cols = layer.weight.shape
        report.append(LayerSpectrum(i, rows, cols, ext.sigma_max, ext.sigma_min,
                                    ext.kappa, ext.kappa_infinite))
    return report


def report_to_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer_index", "rows", "cols", "sigma_max", "sigma_min",
                         "kappa", "kappa_infinite_flag"])
        for row in report:
            writer.writerow([row.layer_index, row.rows, row.cols,
                             repr(row.sigma_max), repr(row.sigma_min),
                             "inf" if row.kappa_infinite else repr(row.kappa),
                             int(row.kappa_infinite)])


@dataclass(frozen=True)
class GradientHistogram:
    edges: np.ndarray          # bins + 1, strictly increasing
    counts: np.ndarray         # in-range counts per bin
    underflow: int
    overflow: int
    sample_count: int
    excess_kurtosis: float     # nan when degenerate
    degenerate: bool


def gradient_histogram(trace, bins=101, value_range=(-1e-3, 1e-3)):
    """Histogram plus excess kurtosis of pooled sampled partial derivatives.

    The range only frames the visualization: out-of-range samples land in
    the overflow tallies and the kurtosis is computed on everything. A
    zero-variance pool is reported as a flagged degenerate case.
    """
    samples = trace.grad_samples if hasattr(trace, "grad_samples") else trace
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ValueError("gradient_histogram: empty trace")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise ValueError("gradient_histogram: empty range")
    edges = np.linspace(lo, hi, bins + 1)
    underflow = int(np.count_nonzero(samples < lo))
    overflow = int(np.count_nonzero(samples > hi))
    inside = samples[(samples >= lo) & (samples <= hi)]
    counts, _ = np.histogram(inside, bins=edges)

    mean = samples.mean()
    centered = samples - mean
    m2 = np.mean(centered ** 2)
    if m2 == 0.0:
        return GradientHistogram(edges, counts, underflow, overflow,
                                 int(samples.size), float("nan"), True)
    m4 = np.mean(centered ** 4)
    kurt = float(m4 / (m2 * m2) - 3.0)
    return GradientHistogram(edges, counts, underflow, overflow,
                             int(samples.size), kurt, False)
