"""Target affinities and the three contrastive losses.

Every loss works in two modes: called with plain ndarrays it returns a
LossValue (float plus diagnostics); called with tape Vars it returns the
scalar Var so gradients can be taken. The diagonal is excluded everywhere,
and divergences share the global 1e-10 log floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DegenerateInputError, ShapeError

NEG_MASK = -1e30          # finite stand-in for -inf before a softmax


@dataclass
class TargetAffinity:
    """Binary positive-pair matrix, optionally row-normalized."""

    y: np.ndarray
    row_normalized: bool
    source: str             # "class-labels" or "augmentation-pairs"

    @property
    def n(self):
        return self.y.shape[0]


@dataclass
class LossValue:
    value: float
    per_pair: np.ndarray = None
    tau: float = None

    def __float__(self):
        return float(self.value)


def adjacent_pairs(n_rows):
    """Pair labels for interleaved augmented views: rows 2i and 2i+1 match."""
    if n_rows % 2:
        raise ConfigurationError("augmented batches must have an even row count")
    return np.repeat(np.arange(n_rows // 2), 2)


def build_target(labels, normalize=False):
    """Y[i, j] = 1 iff i != j and labels match; optionally row-normalized."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise DegenerateInputError("target affinity needs at least two samples")
    y = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(y, 0.0)
    if normalize:
        sums = y.sum(axis=1, keepdims=True)
        if np.all(sums == 0.0):
            raise DegenerateInputError(
                "all-singleton labeling has no positive pairs to normalize")
        y = np.divide(y, sums, out=np.zeros_like(y), where=sums > 0)
    return TargetAffinity(y, bool(normalize), "class-labels")


def _off_diagonal_mask(n):
    return 1.0 - np.eye(n)


def _check_square(a_val, y):
    if a_val.shape[0] != a_val.shape[1]:
        raise ShapeError(f"affinity must be square, got {a_val.shape}")
    if a_val.shape[0] != y.n:
        raise ShapeError(f"affinity {a_val.shape} does not match target n={y.n}")


def _normalized_target(y):
    if y.row_normalized:
        return y.y
    sums = y.y.sum(axis=1, keepdims=True)
    if np.all(sums == 0.0):
        raise DegenerateInputError("target affinity has no positive pairs")
    return np.divide(y.y, sums, out=np.zeros_like(y.y), where=sums > 0)


def nt_xent(z, pairs=None, tau=0.2):
    """Normalized temperature-scaled cross entropy over cosine similarities.

    `pairs` assigns each row its positive partner's group id; by default
    rows 2i and 2i+1 are the two views of image i. The mean is over ordered
    pairs, the per-row denominator runs over all k != i, and the log-sum-exp
    is max-subtracted.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    z_val = ad._val(z)
    n = z_val.shape[0]
    if pairs is None:
        pairs = adjacent_pairs(n)
    pairs = np.asarray(pairs)
    if len(pairs) != n:
        raise ShapeError("pair labels must cover every row")
    pos = (pairs[:, None] == pairs[None, :]).astype(np.float64)
    np.fill_diagonal(pos, 0.0)
    if np.any(pos.sum(axis=1) != 1.0):
        raise ConfigurationError("nt_xent needs exactly one positive partner per row")
    norms = np.linalg.norm(z_val, axis=1)
    if norms.min() < 1e-300:
        raise DegenerateInputError(f"zero-norm embedding row {int(norms.argmin())}")

    zn = ad.row_l2_normalize(z)
    sims = ad.div(ad.matmul(zn, ad.transpose(zn)), tau)
    masked = ad.add(sims, NEG_MASK * np.eye(n))
    lse = ad.logsumexp_rows(masked)
    pos_sim = ad.row_sum(ad.mul(sims, pos))
    per_pair = ad.sub(lse, pos_sim)
    loss = ad.mean(per_pair)
    if isinstance(loss, ad.Var):
        return loss
    return LossValue(float(loss), per_pair.reshape(-1), float(tau))


def g_normalize(a):
    """Squared affinities, zero diagonal, 1e-10 floor, row-normalized.

    Squaring treats negative and positive affinities alike; the floor keeps
    every row a strictly positive distribution.
    """
    a_val = ad._val(a)
    if a_val.shape[0] != a_val.shape[1]:
        raise ShapeError(f"affinity must be square, got {a_val.shape}")
    if a_val.shape[0] < 2:
        raise DegenerateInputError("need at least two samples")
    off = _off_diagonal_mask(a_val.shape[0])
    sq = ad.mul(ad.square(a), off)
    return ad.row_normalize(ad.add(sq, ad.LOG_FLOOR))


def _kl_rows(p_val_or_var, q, floor_logs=True):
    """Row-summed KL(q || p) with q a constant matrix; returns per-row column."""
    logq = np.log(np.maximum(q, ad.LOG_FLOOR))
    logp = ad.log(p_val_or_var)
    diff = ad.sub(logq * q, ad.mul(logp, q))     # q*log q - q*log p
    return ad.row_sum(diff)


def jsd_loss(a, target, mixture="halved"):
    """Jensen-Shannon divergence between g(A) and the target distribution.

    P = g_normalize(A), Q = row-normalized target; the mixture is
    M = (P + Q)/2 and the value averages KL(Q||M) + KL(P||M) over rows.
    mixture="sum" reproduces the unhalved M = P + Q variant that the
    reference training loop used, for fidelity experiments.
    """
    if mixture not in ("halved", "sum"):
        raise ConfigurationError(f"unknown mixture {mixture!r}")
    a_val = ad._val(a)
    _check_square(a_val, target)
    q = _normalized_target(target)
    p = g_normalize(a)
    scale = 0.5 if mixture == "halved" else 1.0
    m = ad.mul(ad.add(p, q), scale)

    logm = ad.log(m)
    kl_q = ad.row_sum(ad.sub(np.where(q > 0, q * np.log(np.maximum(q, ad.LOG_FLOOR)), 0.0),
                             ad.mul(logm, q)))
    kl_p = ad.row_sum(ad.sub(ad.mul(ad.log(p), p), ad.mul(logm, p)))
    loss = ad.mean(ad.add(kl_q, kl_p))
    if isinstance(loss, ad.Var):
        return loss
    return LossValue(float(loss))


def kl_softmax_loss(a, target, tau=0.2):
    """KL(Q || softmax(A / tau)) with the diagonal masked out, row-averaged.

    With one positive per row this reduces exactly to the temperature-scaled
    cross entropy, which is the one-layer equivalence this package checks
    numerically.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    a_val = ad._val(a)
    _check_square(a_val, target)
    q = _normalized_target(target)
    n = a_val.shape[0]
    masked = ad.add(ad.div(a, tau), NEG_MASK * np.eye(n))
    logp = ad.sub(masked, ad.logsumexp_rows(masked))
    qlogq = np.where(q > 0, q * np.log(np.maximum(q, ad.LOG_FLOOR)), 0.0)
    kl = ad.row_sum(ad.sub(qlogq, ad.mul(logp, q)))
    loss = ad.mean(kl)
    if isinstance(loss, ad.Var):
        return loss
    return LossValue(float(loss), tau=float(tau))


def append_loss_log(path, step, epoch, loss_name, value):
    """One CSV line per recorded loss value."""
    new = not _file_has_content(path)
    with open(path, "a") as fh:
        if new:
            fh.write("step,epoch,loss_name,value\n")
        fh.write("%d,%d,%s,%.17g\n" % (step, epoch, loss_name, value))


def _file_has_content(path):
    try:
        import os
        return os.path.getsize(path) > 0
    except OSError:
        return False
