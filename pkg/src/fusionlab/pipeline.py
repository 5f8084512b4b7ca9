"""Desk-scale contrastive training and evaluation.

Augmentation is the same bounded rotation used for subspace noise (two
independent perturbations of a sample with a controlled cosine floor), so
the separability quantities stay measurable. The encoder standing in for a
CNN backbone is a two-layer GeLU network with unit-normalized output.
"""

from __future__ import annotations

import json
import os
import struct
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import geometry, heads, losses
from .errors import (ConfigurationError, DegenerateInputError, FormatError,
                     ShapeError, TrainingDiverged)
from .matio import save_matrices, load_matrices
from .rng import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class RunConfig:
    """Everything a training run depends on; JSON keys match field names."""

    seed: int = 0
    # data
    data: str = "synthetic"            # "synthetic" | "mnist"
    m: int = 32
    k: int = 3
    rank: int = 2
    per_cluster: int = 300
    spread: float = 0.35
    eps: float = 0.0                   # subspace noise at generation time
    test_per_cluster: int = 75
    mnist_images: str = ""
    mnist_labels: str = ""
    limit: int = 0
    test_fraction: float = 0.25
    # augmentation
    eps_aug: float = 0.1
    # model
    encoder_hidden: int = 64
    embed_dim: int = 32
    head: str = "transfusion"
    depth: int = 4
    heads: int = 1
    ffn_hidden: int = 0                # 0 -> 2 * embed_dim
    mode: str = "code-listing"
    residual: bool = True
    # loss
    loss: str = "nt_xent"              # "nt_xent" | "jsd" | "kl_softmax"
    tau: float = 0.2
    mixture: str = "halved"
    # optimizer
    lr: float = 0.3
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 40
    batch_size: int = 128              # rows per step; augmented views count
    schedule: str = "cosine"           # "cosine" | "constant"
    # evaluation
    probe_per_class: int = 8
    probe_fraction: float = 0.1
    probe_epochs: int = 150
    probe_lr: float = 0.5
    record_all_heads: bool = False

    def __post_init__(self):
        if self.loss not in ("nt_xent", "jsd", "kl_softmax"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.head not in heads.KINDS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.batch_size % 2:
            raise ConfigurationError("batch size must be even: augmented views pair up")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.samples.shape[0]:
            raise ShapeError("labels length must equal sample count")

    @property
    def n(self):
        return self.samples.shape[0]


@dataclass
class MetricsReport:
    unsup_acc: float
    probe_acc: float
    sharpness: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class Encoder:
    w1: object
    b1: object
    w2: object
    b2: object


@dataclass
class TrainResult:
    encoder: Encoder
    head: heads.ProjectionHead
    report: MetricsReport
    metrics_rows: list
    loss_rows: list
    epoch_records: list      # per epoch: list of AffinityRecord on the probe batch
    probe_labels: np.ndarray


# ---------------------------------------------------------------------------
# data


def augment(x, eps_aug, rng):
    """Two independent views of one sample row, cosine >= 1 - eps_aug each.

    The row is L2-normalized first; each view rotates it toward a random
    unit direction so the cosine with the original is exactly 1 - e',
    e' ~ U[0, eps_aug].
    """
    if not 0.0 <= eps_aug < 1.0:
        raise ConfigurationError(f"eps_aug must be in [0, 1), got {eps_aug}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(x)
    if norm < 1e-300:
        raise DegenerateInputError("cannot augment a zero sample")
    x = x / norm
    views = []
    for _ in range(2):
        if eps_aug == 0.0:
            views.append(x.copy())
            continue
        e = eps_aug * rng.uniform()
        v = rng.normal((x.size,))
        v -= (v @ x) * x
        v /= np.linalg.norm(v)
        y = (1.0 - e) * x + np.sqrt(max(1.0 - (1.0 - e) ** 2, 0.0)) * v
        views.append(y / np.linalg.norm(y))
    return views[0], views[1]


def augment_batch(x, eps_aug, rng):
    """Stack both views per row, interleaved: rows 2i, 2i+1 pair up."""
    out = np.empty((2 * x.shape[0], x.shape[1]))
    for i in range(x.shape[0]):
        out[2 * i], out[2 * i + 1] = augment(x[i], eps_aug, rng)
    return out


def _read_exact(fh, count, path, offset):
    data = fh.read(count)
    if len(data) < count:
        raise FormatError(f"{path}: truncated at byte {offset + len(data)}")
    return data


def load_mnist(images_path, labels_path, limit=None):
    """Parse big-endian IDX image/label files into a flat [0,1] Dataset."""
    with open(images_path, "rb") as fh:
        head = _read_exact(fh, 16, images_path, 0)
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08X} at byte 0 (want 0x{IMAGE_MAGIC:08X})")
        payload = _read_exact(fh, count * rows * cols, images_path, 16)
    images = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        head = _read_exact(fh, 8, labels_path, 0)
        magic, lcount = struct.unpack(">II", head)
        if magic != LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08X} at byte 0 (want 0x{LABEL_MAGIC:08X})")
        labels = np.frombuffer(_read_exact(fh, lcount, labels_path, 8), dtype=np.uint8)
    if lcount != count:
        raise FormatError(
            f"{labels_path}: {lcount} labels vs {count} images (counts at byte 4 disagree)")
    if limit:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels.astype(np.int64), "train")


def make_synthetic(cfg, rng):
    """Train and test batches from one random subspace ensemble."""
    ens = geometry.generate_ensemble(cfg.m, cfg.k, cfg.rank, rng.derive("ensemble"))
    train = geometry.sample_batch(ens, cfg.per_cluster, cfg.eps, rng.derive("train-data"),
                                  spread=cfg.spread)
    test = geometry.sample_batch(ens, cfg.test_per_cluster, cfg.eps, rng.derive("test-data"),
                                 spread=cfg.spread)
    return (Dataset(train.x, train.labels, "train"),
            Dataset(test.x, test.labels, "test"), ens)


def split_dataset(ds, test_fraction, rng):
    n_test = max(1, int(round(ds.n * test_fraction)))
    order = rng.permutation(ds.n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (Dataset(ds.samples[train_idx], ds.labels[train_idx], "train"),
            Dataset(ds.samples[test_idx], ds.labels[test_idx], "test"))


# ---------------------------------------------------------------------------
# encoder


def init_encoder(d_in, hidden, d_out, rng):
    def u(fan_in, rows, cols):
        return (rng.uniform((rows, cols)) * 2.0 - 1.0) * np.sqrt(1.0 / fan_in)
    return Encoder(u(d_in, d_in, hidden), u(d_in, 1, hidden),
                   u(hidden, hidden, d_out), u(hidden, 1, d_out))


def encode(encoder, x):
    """Two-layer GeLU encoder with unit-normalized output rows."""
    h = ad.gelu(ad.add(ad.matmul(x, encoder.w1), encoder.b1))
    z = ad.add(ad.matmul(h, encoder.w2), encoder.b2)
    return ad.row_l2_normalize(z)


def encoder_params(encoder):
    return [encoder.w1, encoder.b1, encoder.w2, encoder.b2]


def lift_encoder(encoder, tape):
    return Encoder(*[tape.var(p) for p in encoder_params(encoder)])


def save_encoder(directory, encoder):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("kind=encoder\n")
        fh.write(f"dims={encoder.w1.shape[0]}x{encoder.w1.shape[1]}x{encoder.w2.shape[1]}\n")
    save_matrices(os.path.join(directory, "weights.bin"), encoder_params(encoder))


def load_encoder(directory):
    mats = load_matrices(os.path.join(directory, "weights.bin"))
    if len(mats) != 4:
        raise FormatError(f"{directory}: encoder checkpoint must hold 4 matrices")
    return Encoder(*mats)


# ---------------------------------------------------------------------------
# metrics


def block_alignment(a, labels):
    """Mean fraction of off-diagonal attention mass on same-cluster columns.

    Requires a row-stochastic matrix. Rows whose off-diagonal mass is zero
    contribute zero (their attention tells us nothing about neighbors).
    """
    a = np.asarray(a, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if a.shape[0] != a.shape[1] or a.shape[0] != len(labels):
        raise ShapeError(f"attention {a.shape} does not match {len(labels)} labels")
    sums = a.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ConfigurationError("block_alignment needs a row-stochastic matrix")
    same, total = _kernels.alignment_masses(a, labels)
    ratio = np.divide(same, total, out=np.zeros_like(same), where=total > 0)
    return float(ratio.mean())


def record_alignment(record, labels):
    """Alignment of an affinity record; non-stochastic records are squared
    and row-normalized first (sign-insensitive), mirroring the loss path."""
    a = record.matrix
    sums = a.sum(axis=1)
    if np.abs(sums - 1.0).max() <= 1e-6 and a.min() >= 0.0:
        return block_alignment(a, labels)
    return block_alignment(np.asarray(losses.g_normalize(a)), labels)


def nn1_accuracy(embeddings, labels):
    """Label agreement with the nearest other row (Euclidean, lowest index wins)."""
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.shape[0] < 2:
        raise DegenerateInputError("nearest-neighbor accuracy needs >= 2 samples")
    nn = _kernels.nn1_indices(embeddings, True)
    return float((labels[nn] == labels).mean())


def train_linear_probe(train_emb, train_labels, n_classes, rng, epochs=150, lr=0.5,
                       momentum=0.9):
    """Single linear layer + softmax cross-entropy on frozen embeddings."""
    d = train_emb.shape[1]
    w = (rng.uniform((d, n_classes)) * 2.0 - 1.0) * np.sqrt(1.0 / d)
    b = np.zeros((1, n_classes))
    onehot = np.eye(n_classes)[train_labels]
    vel = [np.zeros_like(w), np.zeros_like(b)]
    for _ in range(epochs):
        tape = ad.Tape()
        wv, bv = tape.var(w), tape.var(b)
        logits = ad.add(ad.matmul(train_emb, wv), bv)
        logp = ad.sub(logits, ad.logsumexp_rows(logits))
        loss = ad.mul(ad.mean(ad.row_sum(ad.mul(logp, -onehot))), float(n_classes))
        gw, gb = ad.grad(loss, [wv, bv])
        for p, g, v in ((w, gw, vel[0]), (b, gb, vel[1])):
            v *= momentum
            v += g
            p -= lr * v
    return w, b


def probe_accuracy(w, b, emb, labels):
    pred = (emb @ w + b).argmax(axis=1)
    return float((pred == labels).mean())


def evaluate(encoder, head, train_ds, test_ds, rng, probe_fraction=0.1,
             probe_epochs=150, probe_lr=0.5, probe_batch=None):
    """Backbone-embedding metrics: 1-NN agreement and a 10% linear probe.

    Embeddings are taken from the encoder output (no projection head).
    When a labeled probe batch is given, per-layer sharpness and alignment
    of the head's attention records are included.
    """
    t0 = time.perf_counter()
    if test_ds.n < 2:
        raise DegenerateInputError("test split needs at least 2 samples")
    test_emb = np.asarray(encode(encoder, test_ds.samples))
    unsup = nn1_accuracy(test_emb, test_ds.labels)

    train_emb = np.asarray(encode(encoder, train_ds.samples))
    n_probe = max(1, int(round(train_ds.n * probe_fraction)))
    pick = rng.choice(train_ds.n, n_probe)
    n_classes = int(max(train_ds.labels.max(), test_ds.labels.max())) + 1
    w, b = train_linear_probe(train_emb[pick], train_ds.labels[pick], n_classes,
                              rng, probe_epochs, probe_lr)
    probe = probe_accuracy(w, b, test_emb, test_ds.labels)

    sharp, align = [], []
    if probe_batch is not None:
        px, plabels = probe_batch
        z = np.asarray(encode(encoder, px))
        _, records = heads.head_forward(head, z)
        for rec in records:
            sharp.append(geometry.sharpness(rec.matrix, plabels))
            align.append(record_alignment(rec, plabels))
    return MetricsReport(unsup, probe, sharp, align, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(t, total, lr0, lr_min=0.0):
    """lr_min + (lr0 - lr_min) * (1 + cos(pi t / total)) / 2; exact endpoints."""
    if total <= 0:
        return lr0
    return lr_min + (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / total)) / 2.0


class SgdMomentum:
    """SGD with momentum and decoupled weight decay.

    The decay term stays out of the momentum buffer so a zero-gradient step
    contracts weights by exactly (1 - lr * decay).
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= lr * (v + self.weight_decay * p)


# ---------------------------------------------------------------------------
# training


def _loss_on_tape(cfg, z, pair_labels):
    if cfg.loss == "nt_xent":
        return losses.nt_xent(z, pair_labels, cfg.tau)
    zn = ad.row_l2_normalize(z)
    affinity = ad.matmul(zn, ad.transpose(zn))
    target = losses.build_target(pair_labels, normalize=True)
    if cfg.loss == "jsd":
        return losses.jsd_loss(affinity, target, cfg.mixture)
    return losses.kl_softmax_loss(affinity, target, cfg.tau)


def _stratified_probe(labels, per_class, rng):
    picks = []
    for c in np.unique(labels):
        idx = np.where(labels == c)[0]
        take = min(per_class, len(idx))
        picks.append(idx[rng.choice(len(idx), take)])
    return np.sort(np.concatenate(picks))


def train(cfg, out_dir=None):
    """Full contrastive run; deterministic given cfg.seed.

    Writes metrics.csv, loss_log.csv, checkpoints, the run manifest, and
    per-epoch probe-batch attention matrices when out_dir is given. On a
    non-finite loss the last finite-epoch weights are saved (when out_dir
    is set) and TrainingDiverged is raised.
    """
    t0 = time.perf_counter()
    root = Rng(cfg.seed)
    if cfg.data == "synthetic":
        train_ds, test_ds, _ = make_synthetic(cfg, root.derive("data"))
    elif cfg.data == "mnist":
        full = load_mnist(cfg.mnist_images, cfg.mnist_labels, cfg.limit or None)
        train_ds, test_ds = split_dataset(full, cfg.test_fraction, root.derive("data"))
    else:
        raise ConfigurationError(f"unknown data source {cfg.data!r}")

    d_in = train_ds.samples.shape[1]
    init_rng = root.derive("init")
    encoder = init_encoder(d_in, cfg.encoder_hidden, cfg.embed_dim, init_rng)
    if cfg.head == "ffn":
        hidden = cfg.ffn_hidden or 2 * cfg.embed_dim
        head = heads.init_head("ffn", (cfg.embed_dim, hidden, cfg.embed_dim),
                               cfg.depth, cfg.heads, init_rng)
    else:
        head = heads.init_head(cfg.head, cfg.embed_dim, cfg.depth, cfg.heads, init_rng,
                               mode=cfg.mode, residual=cfg.residual)

    probe_idx = _stratified_probe(train_ds.labels, cfg.probe_per_class, root.derive("probe"))
    probe_x = train_ds.samples[probe_idx]
    probe_labels = train_ds.labels[probe_idx]

    params = encoder_params(encoder) + heads.head_params(head)
    opt = SgdMomentum(params, cfg.momentum, cfg.weight_decay)
    train_rng = root.derive("train")
    eval_rng_seed = root.derive("eval").seed

    per_step = cfg.batch_size // 2
    metrics_rows, loss_rows, epoch_records = [], [], []
    last_good = [p.copy() for p in params]
    step = 0
    total = max(cfg.epochs - 1, 1)
    for epoch in range(cfg.epochs):
        lr = cfg.lr if cfg.schedule == "constant" else cosine_lr(epoch, total, cfg.lr, cfg.lr_min)
        order = train_rng.permutation(train_ds.n)
        epoch_losses = []
        for at in range(0, train_ds.n, per_step):
            idx = order[at:at + per_step]
            if len(idx) < 2:
                continue
            views = augment_batch(train_ds.samples[idx], cfg.eps_aug, train_rng)
            pair_labels = losses.adjacent_pairs(views.shape[0])
            tape = ad.Tape()
            enc_v = lift_encoder(encoder, tape)
            head_v = heads.lift_head(head, tape)
            z0 = encode(enc_v, views)
            z, _ = heads.head_forward(head_v, z0)
            loss_var = _loss_on_tape(cfg, z, pair_labels)
            value = float(loss_var.value)
            if not np.isfinite(value):
                if out_dir:
                    _restore(params, last_good)
                    _save_run(out_dir, cfg, encoder, head, metrics_rows, loss_rows,
                              epoch_records, diverged_at=epoch)
                raise TrainingDiverged(epoch)
            param_vars = (encoder_params(enc_v) + heads.head_params(head_v))
            grads = ad.grad(loss_var, param_vars)
            opt.step(grads, lr)
            loss_rows.append((step, epoch, cfg.loss, value))
            epoch_losses.append(value)
            step += 1
        last_good = [p.copy() for p in params]

        report = evaluate(encoder, head, train_ds, test_ds, Rng(eval_rng_seed),
                          cfg.probe_fraction, cfg.probe_epochs, cfg.probe_lr,
                          probe_batch=(probe_x, probe_labels))
        z_probe = np.asarray(encode(encoder, probe_x))
        _, records = heads.head_forward(head, z_probe,
                                        "all" if cfg.record_all_heads else "first")
        epoch_records.append(records)
        metrics_rows.append([epoch, float(np.mean(epoch_losses)) if epoch_losses else 0.0,
                             report.unsup_acc, report.probe_acc,
                             list(report.sharpness), list(report.alignment)])

    final = evaluate(encoder, head, train_ds, test_ds, Rng(eval_rng_seed),
                     cfg.probe_fraction, cfg.probe_epochs, cfg.probe_lr,
                     probe_batch=(probe_x, probe_labels))
    final.wall_time = time.perf_counter() - t0
    result = TrainResult(encoder, head, final, metrics_rows, loss_rows,
                         epoch_records, probe_labels)
    if out_dir:
        _save_run(out_dir, cfg, encoder, head, metrics_rows, loss_rows, epoch_records)
    return result


def _restore(params, saved):
    for p, s in zip(params, saved):
        p[...] = s


def metrics_header(depth):
    cols = ["epoch", "loss", "unsup_acc", "probe_acc"]
    cols += [f"sharpness_l{i}" for i in range(1, depth + 1)]
    cols += [f"align_l{i}" for i in range(1, depth + 1)]
    return cols


def write_metrics_csv(path, rows, depth):
    with open(path, "w") as fh:
        fh.write(",".join(metrics_header(depth)) + "\n")
        for epoch, loss, unsup, probe, sharp, align in rows:
            cells = ["%d" % epoch, "%.17g" % loss, "%.17g" % unsup, "%.17g" % probe]
            cells += ["%.17g" % s for s in sharp]
            cells += ["%.17g" % a for a in align]
            fh.write(",".join(cells) + "\n")


def _save_run(out_dir, cfg, encoder, head, metrics_rows, loss_rows, epoch_records,
              diverged_at=None):
    os.makedirs(out_dir, exist_ok=True)
    n_rec = len(epoch_records[0]) if epoch_records else 0
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics_rows, n_rec)
    with open(os.path.join(out_dir, "loss_log.csv"), "w") as fh:
        fh.write("step,epoch,loss_name,value\n")
        for row in loss_rows:
            fh.write("%d,%d,%s,%.17g\n" % row)
    save_encoder(os.path.join(out_dir, "encoder"), encoder)
    heads.save_head(os.path.join(out_dir, "head"), head, seed=cfg.seed)
    att_dir = os.path.join(out_dir, "attention")
    os.makedirs(att_dir, exist_ok=True)
    for epoch, records in enumerate(epoch_records):
        for rec in records:
            save_matrices(os.path.join(att_dir, f"epoch_{epoch}_layer_{rec.layer}.bin"),
                          [rec.matrix])
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "fusionlab": "0.1.0",
        },
    }
    if diverged_at is not None:
        manifest["diverged_at_epoch"] = diverged_at
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ffn_width_matching(m, depth, target_params):
    """Hidden width whose ffn-head parameter count best matches the target."""
    best_h, best_gap = 1, float("inf")
    for h in range(1, 40 * m):
        widths = [m] + [h] * max(depth - 1, 0) + [m]
        count = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        gap = abs(count - target_params)
        if gap < best_gap:
            best_h, best_gap = h, gap
    return best_h
