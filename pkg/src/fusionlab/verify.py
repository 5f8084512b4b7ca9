"""Verification routines behind the gradcheck / verify-thm1 / verify-thm2
commands and the acceptance suite. Everything returns plain records so
callers can print or assert without re-running."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry, heads, losses, pipeline
from .rng import Rng


@dataclass
class GradCheck:
    name: str
    seed: int
    max_rel_err: float

    @property
    def ok(self):
        return self.max_rel_err < 1e-4


def _check_params(build_loss, params, h=1e-5):
    """Compare reverse-mode and central-difference gradients.

    build_loss(param_arrays) must rebuild the loss from plain arrays so the
    finite-difference probe re-evaluates the true forward path.
    """
    tape = ad.Tape()
    param_vars = [tape.var(p) for p in params]
    loss = build_loss(param_vars)
    grads = ad.grad(loss, param_vars)
    worst = 0.0
    for i, p in enumerate(params):
        def f(x, i=i):
            probe = [q.copy() for q in params]
            probe[i] = x
            return float(ad._val(build_loss(probe)))
        fd = ad.finite_diff(f, p.copy(), h)
        worst = max(worst, ad.relative_error(grads[i], fd))
    return worst


def _loss_checks(seed):
    rng = Rng(seed)
    z = rng.normal((8, 5))
    pairs = losses.adjacent_pairs(8)
    target = losses.build_target(pairs, normalize=True)
    a = rng.normal((6, 6))
    labels = np.array([0, 0, 1, 1, 2, 2])
    target6 = losses.build_target(labels, normalize=True)
    yield "loss/nt_xent", lambda ps: losses.nt_xent(ps[0], pairs, 0.2), [z]
    yield "loss/jsd", lambda ps: losses.jsd_loss(ps[0], target6), [a]
    yield "loss/kl_softmax", lambda ps: losses.kl_softmax_loss(ps[0], target6, 0.2), [a]


def _head_checks(seed):
    rng = Rng(seed + 1000)
    x = rng.normal((5, 6))

    def head_loss(head_proto):
        def build(ps):
            out, _ = heads.head_forward(heads.with_params(head_proto, ps), x)
            return ad.mean(ad.square(out))
        return build

    ffn = heads.init_head("ffn", (6, 7, 6), 2, 1, rng.derive("ffn"))
    yield "head/ffn", head_loss(ffn), [p.copy() for p in heads.head_params(ffn)]

    eq = heads.init_head("transfusion", 6, 2, 1, rng.derive("eq"), mode="equation")
    yield "head/transfusion-equation", head_loss(eq), [p.copy() for p in heads.head_params(eq)]

    li = heads.init_head("transfusion", 6, 2, 1, rng.derive("li"), mode="code-listing")
    yield "head/transfusion-listing", head_loss(li), [p.copy() for p in heads.head_params(li)]

    tf = heads.init_head("transformer", 6, 1, 2, rng.derive("tf"))
    yield "head/transformer", head_loss(tf), [p.copy() for p in heads.head_params(tf)]

    enc = pipeline.init_encoder(6, 7, 4, rng.derive("enc"))

    def enc_build(ps):
        out = pipeline.encode(pipeline.Encoder(*ps), x)
        return ad.mean(ad.square(out))

    yield "pipeline/encoder", enc_build, [p.copy() for p in pipeline.encoder_params(enc)]


def gradcheck_suite(seeds=range(10), h=1e-5):
    """Finite-difference audit of every loss and head variant."""
    out = []
    for seed in seeds:
        for name, build, params in list(_loss_checks(seed)) + list(_head_checks(seed)):
            out.append(GradCheck(name, seed, _check_params(build, params, h)))
    return out


# ---------------------------------------------------------------------------
# block-diagonal construction


@dataclass
class Thm1Row:
    seed: int
    rho_hat: float
    off_max: float
    in_min: float
    in_margin: float       # min over same pairs of A_ij - nu_i * rho^2
    ok: bool


def thm1_verify(m=16, k=3, rank=2, seeds=range(10), per_cluster=10, spread=0.35,
                off_tol=1e-9, in_tol=1e-6):
    """Noiseless block-structure check with constructed query/key weights."""
    rows = []
    for seed in seeds:
        rng = Rng(seed)
        ens = geometry.generate_ensemble(m, k, rank, rng.derive("ens"))
        batch = geometry.sample_batch(ens, per_cluster, 0.0, rng.derive("batch"),
                                      spread=spread)
        integrity = geometry.cluster_integrity(ens, batch, rng=rng.derive("rho"))
        w_q, _ = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("construct"))
        proj = batch.x @ w_q
        a = proj @ proj.T
        same = batch.labels[:, None] == batch.labels[None, :]
        off_mask = ~same
        np.fill_diagonal(same, False)
        off_max = float(np.abs(a[off_mask]).max())
        bound = batch.cluster_sizes[:, None] * integrity.rho**2
        margins = (a - bound)[same]
        in_min = float(a[same].min())
        in_margin = float(margins.min())
        ok = off_max < off_tol and in_margin >= -in_tol
        rows.append(Thm1Row(seed, integrity.rho, off_max, in_min, in_margin, ok))
    return rows


def thm1_noisy_bounds(m=16, k=3, rank=2, seeds=range(10), per_cluster=10, eps=0.05,
                      spread=0.35, slack=1e-9):
    """Per-pair noisy bounds: same-cluster >= nu_i*Delta^2, cross <= ln beta."""
    rows = []
    for seed in seeds:
        rng = Rng(seed)
        ens = geometry.generate_ensemble(m, k, rank, rng.derive("ens"))
        batch = geometry.sample_batch(ens, per_cluster, eps, rng.derive("batch"),
                                      spread=spread)
        integrity = geometry.cluster_integrity(ens, batch, rng=rng.derive("rho"))
        delta, big = geometry.noise_bounds(eps, integrity.rho)
        w_q, _ = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("construct"))
        proj = batch.x @ w_q
        a = proj @ proj.T
        n = batch.n
        nu = batch.cluster_sizes
        ok = True
        worst_in, worst_off = np.inf, np.inf
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                if batch.labels[i] == batch.labels[j]:
                    margin = a[i, j] - nu[i] * big**2
                    worst_in = min(worst_in, margin)
                    ok = ok and margin >= -slack
                else:
                    beta = (nu[i] + nu[j]) * delta + (n - nu[i] - nu[j]) * delta**2
                    margin = beta - a[i, j]
                    worst_off = min(worst_off, margin)
                    ok = ok and margin >= -slack
        rows.append({"seed": seed, "rho_hat": integrity.rho, "delta": delta,
                     "Delta": big, "worst_in_margin": float(worst_in),
                     "worst_off_margin": float(worst_off), "ok": ok})
    return rows


# ---------------------------------------------------------------------------
# layer-wise amplification


@dataclass
class Thm2Row:
    seed: int
    rho_hat: float
    delta: float
    Delta: float
    separable: bool
    gamma: float
    sharpness: list
    monotone: bool


def thm2_verify(m=16, k=3, rank=2, eps=0.02, layers=4, seeds=range(10),
                per_cluster=10, spread=0.35, residual=False):
    """Sharpness trajectory of constructed-weight fusion blocks.

    monotone means S(layer l+1) >= S(layer l) for l = 1..layers-1.
    """
    rows = []
    for seed in seeds:
        rng = Rng(seed)
        ens = geometry.generate_ensemble(m, k, rank, rng.derive("ens"))
        batch = geometry.sample_batch(ens, per_cluster, eps, rng.derive("batch"),
                                      spread=spread)
        integrity = geometry.cluster_integrity(ens, batch, rng=rng.derive("rho"))
        delta, big = geometry.noise_bounds(eps, integrity.rho)
        nu = int(batch.cluster_sizes[0])
        bound = geometry.FusionBound(eps, integrity.rho, batch.n, nu, nu)
        weights = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("construct"))
        records = geometry.fusion_iterate(batch, weights, layers, residual=residual)
        traj = [r.sharpness for r in records]
        monotone = all(traj[i + 1] >= traj[i] for i in range(len(traj) - 1))
        rows.append(Thm2Row(seed, integrity.rho, delta, big, delta < big,
                            bound.ratio_bound, traj, monotone))
    return rows


# ---------------------------------------------------------------------------
# one-layer loss equivalence


def infonce_equivalence(batches=20, n_images=6, dim=8, tau=0.2, seed=0):
    """Compare KL+masked-softmax on the cosine affinity with the contrastive
    cross entropy: per-batch value difference, and gradient direction."""
    diffs, cosines = [], []
    for b in range(batches):
        rng = Rng(seed + b)
        z = rng.normal((2 * n_images, dim))
        pairs = losses.adjacent_pairs(2 * n_images)
        target = losses.build_target(pairs, normalize=True)

        tape = ad.Tape()
        zv = tape.var(z)
        zn = ad.row_l2_normalize(zv)
        affinity = ad.matmul(zn, ad.transpose(zn))
        kl = losses.kl_softmax_loss(affinity, target, tau)
        (g_kl,) = ad.grad(kl, [zv])

        tape2 = ad.Tape()
        zv2 = tape2.var(z)
        ntx = losses.nt_xent(zv2, pairs, tau)
        (g_nt,) = ad.grad(ntx, [zv2])

        diffs.append(float(kl.value) - float(ntx.value))
        denom = np.linalg.norm(g_kl) * np.linalg.norm(g_nt)
        cosines.append(float((g_kl * g_nt).sum() / denom))
    diffs = np.array(diffs)
    return {"diffs": diffs, "std": float(diffs.std()),
            "mean": float(diffs.mean()), "min_cosine": float(min(cosines))}
