"""2-D projections of token vectors and clustering in the original space.

PCA is the default projection. k-means runs on full-dimensional vectors and
its agreement with a clustering of the projected points is reported as an
adjusted Rand index.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import HiddenStateTrace
from .tensor import make_rng


class ZeroVarianceError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


# -- eigendecomposition -----------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix.

    Cyclic Jacobi rotations until the off-diagonal mass is below ``tol``
    relative to the Frobenius norm.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


# -- PCA --------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray  # (n, out_dims)
    explained_variance_ratio: np.ndarray
    components: np.ndarray  # (out_dims, d), orthonormal rows
    eigenvalues: np.ndarray  # all d eigenvalues, descending
    mean: np.ndarray


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for i, row in enumerate(out):
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            out[i] = -row
    return out


def pca(vectors, out_dims: int = 2) -> PCAResult:
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 vectors")
    if not 1 <= out_dims <= min(n, d):
        raise ValueError(f"out_dims={out_dims} must be in [1, min(n, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    w, v = jacobi_eigh(cov)
    w = np.maximum(w, 0.0)
    total = w.sum()
    if total <= 1e-300:
        raise ZeroVarianceError("all vectors are identical")
    comps = _fix_signs(v[:, :out_dims].T)
    return PCAResult(xc @ comps.T, w[:out_dims] / total, comps, w, mean)


def pca_project(vectors, out_dims: int = 2) -> PCAResult:
    return pca(vectors, out_dims)


# -- FastICA ----------------------------------------------------------------

@dataclass
class ICAResult:
    coords: np.ndarray  # estimated sources (n, out_dims)
    unmixing: np.ndarray  # rows orthonormal, acting on whitened data
    whitening: np.ndarray  # (out_dims, d)
    n_iter: int
    converged: bool


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(w @ w.T)
    s = np.maximum(s, 1e-300)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def ica_project(vectors, out_dims: int = 2, tol: float = 1e-4, max_iter: int = 200, seed: int = 0) -> ICAResult:
    """FastICA with PCA whitening, logcosh contrast and symmetric decorrelation."""
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    p = pca(x, out_dims)
    ev = p.eigenvalues[:out_dims]
    if np.any(ev <= 1e-12 * p.eigenvalues[0]):
        raise ZeroVarianceError("fewer non-degenerate directions than out_dims")
    whitening = p.components / np.sqrt(ev)[:, None]
    z = (x - p.mean) @ whitening.T  # (n, k), identity covariance
    rng = make_rng(seed)
    w = _sym_decorrelate(rng.normal(size=(out_dims, out_dims)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        wx = z @ w.T  # (n, k)
        g = np.tanh(wx)
        gp = 1.0 - g * g
        w_new = (g.T @ z) / n - gp.mean(axis=0)[:, None] * w
        w_new = _sym_decorrelate(w_new)
        lim = float(np.max(np.abs(np.abs(np.sum(w_new * w, axis=1)) - 1.0)))
        w = w_new
        if lim < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"FastICA did not converge after {it} iterations", ConvergenceWarning, stacklevel=2)
    return ICAResult(z @ w.T, w, whitening, it, converged)


# -- t-SNE ------------------------------------------------------------------

@dataclass
class TSNEResult:
    coords: np.ndarray
    conditional_p: np.ndarray  # row-stochastic P(j|i)
    kl_history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray) -> np.ndarray:
    s = np.sum(x * x, axis=1)
    d = s[:, None] + s[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(x, perplexity: float, tol: float = 1e-5, max_tries: int = 200) -> np.ndarray:
    """Per-point Gaussian conditionals with entropy log(perplexity), by bisection on precision."""
    d = _sq_dists(np.asarray(x, dtype=np.float64))
    n = d.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, math.inf
        for _ in range(max_tries):
            e = np.exp(-di * beta)
            s = e.sum()
            pi = e / s
            h = math.log(s) + beta * float(np.sum(di * pi))
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:  # entropy too high -> sharpen
                lo = beta
                beta = beta * 2.0 if hi == math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = pi
    return P


def _kl_and_grad(P: np.ndarray, y: np.ndarray):
    num = 1.0 / (1.0 + _sq_dists(y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    kl = float(np.sum(P * np.log(np.maximum(P, 1e-12) / Q)))
    pq = (P - Q) * num
    grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
    return kl, grad


def tsne_project(vectors, perplexity: float = 30.0, iters: int = 1000, out_dims: int = 2,
                 learning_rate: float | None = None, seed: int = 0) -> TSNEResult:
    """Exact O(n^2) t-SNE.

    ``learning_rate`` defaults to max(n / 48, 50); a fixed 200 overshoots and
    oscillates on the few dozen points of one input sequence.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ValueError("t-SNE needs at least 4 points")
    if not 0 < perplexity < n:
        raise ValueError(f"perplexity {perplexity} must be below the number of points {n}")
    if learning_rate is None:
        learning_rate = max(n / 48.0, 50.0)
    cond = conditional_probabilities(x, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    rng = make_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, out_dims))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    exag_iters = 250
    history = []
    for it in range(iters):
        exag = 12.0 if it < exag_iters else 1.0
        momentum = 0.5 if it < exag_iters else 0.8
        kl, grad = _kl_and_grad(P * exag, y)
        if it >= exag_iters:
            history.append(kl)
        inc = (grad > 0) != (update > 0)
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    history.append(_kl_and_grad(P, y)[0])
    return TSNEResult(y, cond, history)


# -- k-means ----------------------------------------------------------------

@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _assign(x, c):
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    d = np.maximum(d, 0.0)
    labels = np.argmin(d, axis=1)  # first minimum = lowest centroid index
    return labels, d[np.arange(len(x)), labels]


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 300) -> ClusterAssignment:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    rng = make_rng(seed)
    c = kmeans_pp_init(x, k, rng)
    labels, dist = _assign(x, c)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new_c = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(axis=0)
        # reseed empty clusters at the point farthest from its centroid
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(dist))
                new_c[j] = x[far]
                dist[far] = 0.0
        new_labels, dist = _assign(x, new_c)
        c = new_c
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return ClusterAssignment(labels, c, float(dist.sum()), it, history)


def default_k(roles: Sequence[str]) -> int:
    """Number of role groups present (question / supporting fact / answer / other)."""
    groups = set()
    for r in roles:
        if r in ("question", "supporting-fact", "answer"):
            groups.add(r)
        elif r != "pad":
            groups.add("other")
    return max(1, len(groups))


# -- agreement --------------------------------------------------------------

def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"partitions differ in size: {a.shape} vs {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n) if n > 1 else 0.0
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def cluster_agreement(a: ClusterAssignment, b: ClusterAssignment) -> float:
    return adjusted_rand_index(a.labels, b.labels)


# -- per-layer projections of a trace -----------------------------------------

@dataclass
class Projection2D:
    layer: int
    x: np.ndarray
    y: np.ndarray
    tokens: list[str]
    roles: list[str]
    sentences: list[int]
    clusters: np.ndarray | None = None
    method: str = "pca"

    def __len__(self) -> int:
        return len(self.tokens)


def project(vectors, method: str = "pca", seed: int = 0) -> np.ndarray:
    if method == "pca":
        return pca(vectors, 2).coords
    if method == "ica":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return ica_project(vectors, 2, seed=seed).coords
    if method == "tsne":
        n = len(vectors)
        return tsne_project(vectors, perplexity=min(30.0, (n - 1) / 3.0), seed=seed).coords
    raise ValueError(f"unknown projection method {method!r}")


@dataclass
class LayerAnalysis:
    projection: Projection2D
    full_clusters: ClusterAssignment
    plane_clusters: ClusterAssignment
    agreement: float


def analyze_trace(trace: HiddenStateTrace, method: str = "pca", k: int | None = None,
                  seed: int = 0) -> list[LayerAnalysis]:
    """Project every layer of a (pad-free) trace and cluster it in both spaces."""
    tr = trace.non_pad()
    inp = tr.input
    k = default_k(inp.roles) if k is None else k
    out = []
    for n, h in enumerate(tr.layers):
        xy = project(h, method, seed)
        full = kmeans(h, k, seed)
        plane = kmeans(xy, k, seed)
        proj = Projection2D(n, xy[:, 0].copy(), xy[:, 1].copy(), list(inp.tokens), list(inp.roles),
                            list(inp.sentence_ids), full.labels.copy(), method)
        out.append(LayerAnalysis(proj, full, plane, adjusted_rand_index(full.labels, plane.labels)))
    return out
