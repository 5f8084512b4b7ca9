"""Subspace-cluster data model and the separation/fusion analysis toolkit.

Clusters are low-rank orthonormal subspaces of R^m. Batches place unit
samples near a per-cluster center ray inside each subspace (so that
same-cluster inner products stay sign-coherent, which the block-structure
bounds need), then rotate each sample toward a random direction so its
cosine with the clean sample is exactly 1 - e' for a per-sample noise
level e' drawn uniformly from [0, eps].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (ConfigurationError, DegenerateInputError, ShapeError,
                     UnsupportedError)
from .matio import as_matrix
from .rng import Rng

ORTHO_TOL = 1e-10


@dataclass
class SubspaceEnsemble:
    """K orthonormal bases U_k (m x r_k), pairwise independent clusters."""

    ambient_dim: int
    bases: list

    def __post_init__(self):
        m = self.ambient_dim
        if not self.bases:
            raise ConfigurationError("ensemble needs at least one subspace")
        for k, u in enumerate(self.bases):
            u = np.asarray(u, dtype=np.float64)
            if u.shape[0] != m:
                raise ShapeError(f"basis {k} has ambient dim {u.shape[0]}, expected {m}")
            gram = u.T @ u
            if np.abs(gram - np.eye(u.shape[1])).max() > ORTHO_TOL:
                raise ConfigurationError(f"basis {k} is not orthonormal within {ORTHO_TOL}")
            self.bases[k] = u
        if (self.n_clusters - 1) * max(self.ranks) >= m:
            raise ConfigurationError(
                f"(K-1)*max_rank = {(self.n_clusters - 1) * max(self.ranks)} "
                f"must be < ambient dim {m}")

    @property
    def n_clusters(self):
        return len(self.bases)

    @property
    def ranks(self):
        return [u.shape[1] for u in self.bases]


@dataclass
class ClusteredBatch:
    """Unit-row samples with ground-truth cluster labels."""

    x: np.ndarray                 # n x m, unit rows
    labels: np.ndarray            # n ints in [0, K)
    cluster_sizes: np.ndarray     # per-sample same-cluster count
    noise_level: float

    def __post_init__(self):
        self.x = as_matrix(self.x, "batch")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cluster_sizes = np.asarray(self.cluster_sizes, dtype=np.int64)
        if len(self.labels) != self.x.shape[0] or len(self.cluster_sizes) != self.x.shape[0]:
            raise ShapeError("labels/cluster_sizes length must match sample count")
        norms = np.linalg.norm(self.x, axis=1)
        if np.abs(norms - 1.0).max() > 1e-8:
            raise ConfigurationError("batch rows must be unit norm")

    @property
    def n(self):
        return self.x.shape[0]


@dataclass
class IntegrityResult:
    """Greedy cluster-integrity estimate with per-cluster witnesses."""

    rho: float
    per_cluster: list
    witnesses: list
    iterations: list


@dataclass
class AffinityRecord:
    """One attention/affinity matrix with cluster metadata."""

    layer: int
    matrix: np.ndarray
    labels: np.ndarray = None
    sharpness: float = None


@dataclass
class FusionBound:
    """Per-pair quantities from the layer-wise amplification analysis."""

    eps: float
    rho: float
    n: int
    nu_i: int
    nu_j: int
    delta: float = field(init=False)
    Delta: float = field(init=False)
    ln_alpha: float = field(init=False)
    ln_beta: float = field(init=False)
    ratio_bound: float = field(init=False)

    def __post_init__(self):
        self.delta, self.Delta = noise_bounds(self.eps, self.rho)
        self.ln_alpha = self.nu_i * self.Delta**2
        self.ln_beta = ((self.nu_i + self.nu_j) * self.delta
                        + (self.n - self.nu_i - self.nu_j) * self.delta**2)
        self.ratio_bound = np.exp(self.n * (self.delta**2 - self.Delta**2)
                                  + self.delta) / self.n

    @property
    def separable(self):
        return self.delta < self.Delta


# ---------------------------------------------------------------------------
# generation


def generate_ensemble(m, k, ranks, rng, mode="random"):
    """Draw K orthonormal subspace bases in R^m.

    "random" orthonormalizes Gaussian matrices; "axis-aligned" assigns
    disjoint coordinate blocks (integrity is exactly 1 for rank-1 clusters).
    """
    if isinstance(ranks, int):
        ranks = [ranks] * k
    if len(ranks) != k:
        raise ConfigurationError(f"need {k} ranks, got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise ConfigurationError("ranks must be positive")
    if (k - 1) * max(ranks) >= m:
        raise ConfigurationError(
            f"independence requires (K-1)*max_rank < m strictly; "
            f"got {(k - 1) * max(ranks)} vs m={m}")
    pair = max((ranks[i] + ranks[j] for i in range(k) for j in range(i + 1, k)),
               default=0)
    if k > 1 and pair >= m:
        raise ConfigurationError(
            f"independence requires r_i + r_j < m strictly for every pair; "
            f"got {pair} vs m={m}")
    bases = []
    if mode == "axis-aligned":
        if sum(ranks) > m:
            raise ConfigurationError("axis-aligned mode needs sum(ranks) <= m")
        at = 0
        for r in ranks:
            u = np.zeros((m, r))
            for j in range(r):
                u[at + j, j] = 1.0
            bases.append(u)
            at += r
    elif mode == "random":
        for r in ranks:
            g = rng.normal((m, r))
            q, _ = np.linalg.qr(g)
            bases.append(q[:, :r].copy())
    else:
        raise ConfigurationError(f"unknown ensemble mode {mode!r}")
    return SubspaceEnsemble(m, bases)


def sample_batch(ens, per_cluster, eps, rng, spread=0.35):
    """Sample unit vectors near per-cluster center rays, plus bounded noise.

    Each clean direction is U_k g with g = normalize(center + spread * N(0, I)),
    sign-flipped into the center's half-space. Noise rotates the sample
    toward a random unit direction so cos(noisy, clean) == 1 - e' exactly,
    e' ~ U[0, eps]; rows are re-normalized.
    """
    if not 0.0 <= eps < 1.0:
        raise ConfigurationError(f"eps must be in [0, 1), got {eps}")
    if isinstance(per_cluster, int):
        per_cluster = [per_cluster] * ens.n_clusters
    if len(per_cluster) != ens.n_clusters:
        raise ConfigurationError("per_cluster length must equal cluster count")
    if any(c < 1 for c in per_cluster):
        raise ConfigurationError("every cluster needs at least one sample")

    m = ens.ambient_dim
    rows, labels = [], []
    for k, (u, count) in enumerate(zip(ens.bases, per_cluster)):
        r = u.shape[1]
        center = rng.normal((r,))
        center /= np.linalg.norm(center)
        for _ in range(count):
            g = center + spread * rng.normal((r,))
            g /= np.linalg.norm(g)
            if g @ center < 0.0:
                g = -g
            x = u @ g
            if eps > 0.0:
                e = eps * rng.uniform()
                v = rng.normal((m,))
                v -= (v @ x) * x
                v /= np.linalg.norm(v)
                x = (1.0 - e) * x + np.sqrt(max(1.0 - (1.0 - e) ** 2, 0.0)) * v
                x /= np.linalg.norm(x)
            rows.append(x)
            labels.append(k)
    labels = np.array(labels, dtype=np.int64)
    sizes = np.array([per_cluster[c] for c in labels], dtype=np.int64)
    return ClusteredBatch(np.vstack(rows), labels, sizes, float(eps))


# ---------------------------------------------------------------------------
# cluster integrity


def _complement_basis(u, m):
    """Orthonormal basis of the orthogonal complement of span(u) in R^m."""
    full, s, _ = np.linalg.svd(u, full_matrices=True)
    rank = int((s > 1e-12).sum())
    return full[:, rank:]


def _greedy_maxmin(samples, rng, calibrate, t_max, alpha, tol):
    """One run of the perpendicular-vector search loop.

    calibrate(u) must return the unit search direction for the current
    iterate (for integrity: projection onto the complement of the cluster
    basis; identity-normalize when the feasible set is the whole space).
    Returns (best value, witness direction, iterations used).
    """
    dim = samples.shape[1]
    u = rng.normal((dim,))
    rho = -np.inf
    witness = None
    used = 0
    for t in range(t_max):
        used = t + 1
        u_perp = calibrate(u)
        if u_perp is None:            # iterate collapsed onto the basis
            u = rng.normal((dim,))
            continue
        proj = samples @ u_perp
        j = int(np.abs(proj).argmin())
        val = abs(float(proj[j]))
        u = u_perp + alpha * samples[j]
        u /= np.linalg.norm(u)
        if abs(rho - val) < tol:
            if val > rho:
                rho, witness = val, u_perp
            break
        if val > rho:
            rho, witness = val, u_perp
    return rho, witness, used


def rho_greedy(ens, batch, k, t_max=500, alpha=0.1, tol=1e-6, rng=None, restarts=8):
    """Greedy estimate of the cluster-integrity term for cluster k.

    Searches for the unit direction perpendicular to U_k that maximizes the
    minimum |x . u| over samples outside cluster k ("outside" = labeled
    differently; labels are ground truth in generated data). Several random
    restarts are kept because a single run is sensitive to its start.
    """
    rho, witness, _ = _rho_greedy_full(ens, batch, k, t_max, alpha, tol, rng, restarts)
    return rho, witness


def _rho_greedy_full(ens, batch, k, t_max, alpha, tol, rng, restarts):
    if rng is None:
        rng = Rng(0)
    u_k = ens.bases[k]
    if u_k.shape[1] >= ens.ambient_dim:
        raise DegenerateInputError(f"cluster {k} spans the ambient space")
    outside = batch.x[batch.labels != k]
    if outside.shape[0] == 0:
        raise DegenerateInputError(f"no samples outside cluster {k}")

    def calibrate(u):
        res = u - u_k @ (u_k.T @ u)
        norm = np.linalg.norm(res)
        if norm < 1e-12:
            return None
        return res / norm

    best, best_w, iters = -np.inf, None, 0
    for _ in range(max(1, restarts)):
        rho, witness, used = _greedy_maxmin(outside, rng, calibrate, t_max, alpha, tol)
        iters += used
        if rho > best:
            best, best_w = rho, witness
    return float(best), best_w, iters


def cluster_integrity(ens, batch, t_max=500, alpha=0.1, tol=1e-6, rng=None, restarts=8):
    """Greedy integrity for every cluster; overall value is the minimum."""
    per, wits, iters = [], [], []
    if rng is None:
        rng = Rng(0)
    for k in range(ens.n_clusters):
        rho, witness, used = _rho_greedy_full(ens, batch, k, t_max, alpha, tol,
                                              rng.derive(k), restarts)
        per.append(rho)
        wits.append(witness)
        iters.append(used)
    return IntegrityResult(float(min(per)), per, wits, iters)


def _sphere_grid(q, steps):
    """Directions covering half the unit sphere in R^q (q <= 3)."""
    if q == 1:
        return np.array([[1.0]])
    if q == 2:
        th = np.linspace(0.0, np.pi, steps, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    th = np.linspace(0.0, np.pi, steps + 1)           # polar, poles included
    ph = np.linspace(0.0, np.pi, steps, endpoint=False)
    t, p = np.meshgrid(th, ph, indexing="ij")
    grid = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    return grid.reshape(-1, 3)


def rho_brute(ens, batch, k, steps=360):
    """Grid-search oracle for cluster integrity.

    Only supports orthogonal complements of dimension <= 3; the grid is
    exhaustive at the given angular resolution (steps per half-turn).
    """
    u_k = ens.bases[k]
    m = ens.ambient_dim
    q = m - u_k.shape[1]
    if q < 1:
        raise DegenerateInputError(f"cluster {k} spans the ambient space")
    if q > 3:
        raise UnsupportedError(f"complement dimension {q} > 3 is not supported by the oracle")
    outside = batch.x[batch.labels != k]
    if outside.shape[0] == 0:
        raise DegenerateInputError(f"no samples outside cluster {k}")
    basis = _complement_basis(u_k, m)
    s = np.ascontiguousarray(outside @ basis)
    cands = np.ascontiguousarray(_sphere_grid(q, steps))
    return float(_kernels.maxmin_scan(s, cands))


def noise_bounds(eps, rho):
    """(delta, Delta): in-cluster perpendicular-projection ceiling and
    out-of-cluster floor at noise eps and integrity rho."""
    if not 0.0 <= eps <= 1.0:
        raise ConfigurationError(f"eps must be in [0, 1], got {eps}")
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"rho must be in [0, 1], got {rho}")
    spread = 1.0 - (1.0 - eps) ** 2
    delta = np.sqrt(spread)
    big_delta = (1.0 - eps) * rho - np.sqrt(spread * (1.0 - rho**2))
    return float(delta), float(big_delta)


# ---------------------------------------------------------------------------
# sharpness and the theorem constructions


def sharpness(a, labels, zero_tol=1e-12):
    """min same-cluster entry over max cross-cluster entry of `a`.

    Diagonal entries never count as a pair. Returns +inf when the
    cross-cluster side vanishes (<= zero_tol relative to the same-cluster
    minimum, so rounding residue of an exactly block-diagonal construction
    still counts as zero) while the same-cluster side is positive, and 0.0
    whenever the same-cluster minimum is non-positive.
    """
    a = as_matrix(a, "affinity")
    labels = np.asarray(labels, dtype=np.int64)
    if a.shape[0] != a.shape[1] or a.shape[0] != len(labels):
        raise ShapeError(f"affinity {a.shape} does not match {len(labels)} labels")
    mn, mx, has_same, has_cross = _kernels.pairwise_extrema(a, labels)
    if not has_same or not has_cross:
        raise DegenerateInputError(
            "sharpness needs at least one same-cluster pair and one cross-cluster pair")
    if mn <= 0.0:
        return 0.0
    if mx <= zero_tol * max(mn, 1.0):
        return np.inf
    return float(mn / mx)


def construct_thm1_weights(ens, batch, rng=None, t_max=2000, alpha=0.1, tol=1e-10,
                           restarts=8):
    """Query/key weights whose affinity is block-diagonal on clean data.

    The column for every sample of cluster k is one shared unit direction
    chosen inside the orthogonal complement of all *other* subspaces (so
    cross-cluster projections of clean samples vanish identically), picked
    by the same greedy max-min search used for the integrity estimate and
    sign-aligned with the cluster. The search runs tighter than the
    integrity default (tol 1e-10) so the achieved projections sit above the
    separately estimated integrity value instead of tying with it.
    """
    if rng is None:
        rng = Rng(0)
    m, n = ens.ambient_dim, batch.n
    w = np.zeros((m, n))
    for k in range(ens.n_clusters):
        others = [ens.bases[j] for j in range(ens.n_clusters) if j != k]
        if others:
            null = _complement_basis(np.hstack(others), m)
        else:
            null = np.eye(m)
        if null.shape[1] == 0:
            raise ConfigurationError(
                f"other subspaces span the ambient space; no direction is left for cluster {k}")
        mine = batch.x[batch.labels == k] @ null
        if mine.shape[0] == 0:
            raise DegenerateInputError(f"cluster {k} has no samples")

        def calibrate(u):
            norm = np.linalg.norm(u)
            return None if norm < 1e-12 else u / norm

        best, coeff = -np.inf, None
        sub_rng = rng.derive(k)
        for _ in range(max(1, restarts)):
            val, witness, _ = _greedy_maxmin(mine, sub_rng, calibrate, t_max, alpha, tol)
            if val > best and witness is not None:
                best, coeff = val, witness
        if coeff is None:
            raise DegenerateInputError(f"search failed to find a direction for cluster {k}")
        if float(np.mean(mine @ coeff)) < 0.0:
            coeff = -coeff
        w[:, batch.labels == k] = (null @ coeff)[:, None]
    return w, w


def fusion_iterate(batch, weights, layers, residual=False, w_v=None):
    """Run `layers` constructed attention blocks, recording affinity + sharpness.

    Per layer: rows of X are L2-normalized, A = (X Wq)(X Wk)^T, and the
    update is X <- relu(A) @ (X Wv) [+ X with the residual enabled]. The
    value weights default to the identity, matching the pass-through value
    path of the layer-wise analysis; the residual-free variant is what the
    amplification argument covers.
    """
    if layers < 1:
        raise ConfigurationError("layers must be >= 1")
    if isinstance(weights, tuple):
        w_q, w_k = weights
    else:
        w_q = w_k = weights
    x = batch.x.copy()
    records = []
    for layer in range(1, layers + 1):
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        a = (x @ w_q) @ (x @ w_k).T
        records.append(AffinityRecord(layer, a, batch.labels.copy(),
                                      sharpness(a, batch.labels)))
        values = x if w_v is None else x @ w_v
        update = np.maximum(a, 0.0) @ values
        x = update + x if residual else update
    return records
