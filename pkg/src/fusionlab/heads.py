"""Projection heads: feed-forward stack, attention-fusion block with
elementwise ReLU, and a standard pre-norm multi-head softmax block.

The fusion block exists in two variants that differ in normalization
details ("equation": plain affinity, raw ReLU mixture, returns the
pre-activation affinity; "code-listing": L2-normalized queries/keys,
zeroed diagonal, floored row normalization, returns the row-stochastic
weights). Both are kept because trained checkpoints used the latter while
the layer-wise analysis is stated for the former.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DegenerateInputError, FormatError
from .geometry import AffinityRecord
from .matio import load_matrices, save_matrices

KINDS = ("ffn", "transfusion", "transformer")


@dataclass
class FfnLayer:
    w: object
    b: object


@dataclass
class TransFusionBlock:
    w_q: object
    w_k: object
    w_v: object
    mode: str = "code-listing"
    residual: bool = True


@dataclass
class MultiHeadBlock:
    w_q: list
    w_k: list
    w_v: list
    w_o: object
    ffn_w1: object
    ffn_b1: object
    ffn_w2: object
    ffn_b2: object
    ln1_gain: object
    ln1_bias: object
    ln2_gain: object
    ln2_bias: object

    @property
    def heads(self):
        return len(self.w_q)


@dataclass
class ProjectionHead:
    kind: str
    blocks: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.blocks)


def _uniform_init(rng, rows, cols):
    bound = np.sqrt(1.0 / rows)
    return (rng.uniform((rows, cols)) * 2.0 - 1.0) * bound


def init_head(kind, dims, depth, heads, rng, mode="code-listing", residual=True):
    """Fresh head with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights.

    dims: (d_in, hidden, d_out) for "ffn", embedding width m otherwise.
    `heads` is ignored except for the transformer kind.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown head kind {kind!r}")
    if depth < 0:
        raise ConfigurationError("depth must be >= 0")
    blocks = []
    if kind == "ffn":
        d_in, hidden, d_out = dims
        widths = [d_in] + [hidden] * max(depth - 1, 0) + [d_out] if depth else []
        for a, b in zip(widths[:-1], widths[1:]):
            bias = (rng.uniform((1, b)) * 2.0 - 1.0) * np.sqrt(1.0 / a)
            blocks.append(FfnLayer(_uniform_init(rng, a, b), bias))
    elif kind == "transfusion":
        m = int(dims)
        for _ in range(depth):
            blocks.append(TransFusionBlock(_uniform_init(rng, m, m),
                                           _uniform_init(rng, m, m),
                                           _uniform_init(rng, m, m),
                                           mode=mode, residual=residual))
    else:
        m = int(dims)
        if depth and m % heads:
            raise ConfigurationError(f"embed dim {m} not divisible by {heads} heads")
        d_k = m // heads if depth else 0
        f = 2 * m
        for _ in range(depth):
            blocks.append(MultiHeadBlock(
                w_q=[_uniform_init(rng, m, d_k) for _ in range(heads)],
                w_k=[_uniform_init(rng, m, d_k) for _ in range(heads)],
                w_v=[_uniform_init(rng, m, d_k) for _ in range(heads)],
                w_o=_uniform_init(rng, heads * d_k, m),
                ffn_w1=_uniform_init(rng, m, f),
                ffn_b1=(rng.uniform((1, f)) * 2 - 1) * np.sqrt(1.0 / m),
                ffn_w2=_uniform_init(rng, f, m),
                ffn_b2=(rng.uniform((1, m)) * 2 - 1) * np.sqrt(1.0 / f),
                ln1_gain=np.ones((1, m)), ln1_bias=np.zeros((1, m)),
                ln2_gain=np.ones((1, m)), ln2_bias=np.zeros((1, m))))
    return ProjectionHead(kind, blocks)


def transfusion_forward(block, x):
    """One fusion block. Returns (next embeddings, recorded affinity).

    equation mode records the raw pre-activation affinity; code-listing
    mode records the row-stochastic attention weights actually applied.
    """
    n = ad._val(x).shape[0]
    x = ad.row_l2_normalize(x)
    if block.mode == "equation":
        a = ad.matmul(ad.matmul(x, block.w_q), ad.transpose(ad.matmul(x, block.w_k)))
        mixed = ad.matmul(ad.relu(a), ad.matmul(x, block.w_v))
        x_next = ad.add(mixed, x) if block.residual else mixed
        return x_next, a
    if block.mode == "code-listing":
        if n < 2:
            raise DegenerateInputError(
                "code-listing mode needs n >= 2 (diagonal removal empties the row)")
        q = ad.row_l2_normalize(ad.matmul(x, block.w_q))
        k = ad.row_l2_normalize(ad.matmul(x, block.w_k))
        v = ad.matmul(x, block.w_v)
        act = ad.relu(ad.matmul(q, ad.transpose(k)))
        act = ad.mul(act, 1.0 - np.eye(n))
        weights = ad.row_normalize(ad.add(act, 1e-10))
        mixed = ad.matmul(weights, v)
        x_next = ad.add(mixed, x) if block.residual else mixed
        return x_next, weights
    raise ConfigurationError(f"unknown fusion mode {block.mode!r}")


def multihead_forward(block, x):
    """Pre-norm transformer block; returns (next embeddings, per-head attention)."""
    h = ad.layer_norm(x, block.ln1_gain, block.ln1_bias)
    outs, attns = [], []
    d_k = ad._val(block.w_q[0]).shape[1]
    for wq, wk, wv in zip(block.w_q, block.w_k, block.w_v):
        q = ad.matmul(h, wq)
        k = ad.matmul(h, wk)
        v = ad.matmul(h, wv)
        scores = ad.div(ad.matmul(q, ad.transpose(k)), np.sqrt(d_k))
        attn = ad.row_softmax(scores)
        attns.append(attn)
        outs.append(ad.matmul(attn, v))
    concat = outs[0] if len(outs) == 1 else ad.hstack(outs)
    x2 = ad.add(x, ad.matmul(concat, block.w_o))
    h2 = ad.layer_norm(x2, block.ln2_gain, block.ln2_bias)
    ffn = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, block.ffn_w1), block.ffn_b1)),
                           block.ffn_w2), block.ffn_b2)
    return ad.add(x2, ffn), attns


def ffn_layer_forward(layer, x, last):
    out = ad.add(ad.matmul(x, layer.w), layer.b)
    return out if last else ad.gelu(out)


def head_forward(head, x, record_heads="first"):
    """Fold the head's blocks over x; collect attention records.

    record_heads: "first" stores the first attention head per block (the
    visualization convention), "all" stores every head.
    """
    n = ad._val(x).shape[0]
    if head.kind in ("transfusion", "transformer") and n < 2:
        raise DegenerateInputError("attention heads need at least two rows")
    if head.depth == 0:
        return ad.row_l2_normalize(x), []
    records = []
    for i, block in enumerate(head.blocks, start=1):
        if head.kind == "ffn":
            x = ffn_layer_forward(block, x, last=(i == head.depth))
        elif head.kind == "transfusion":
            x, rec = transfusion_forward(block, x)
            records.append(AffinityRecord(i, np.asarray(ad._val(rec))))
        else:
            x, attns = multihead_forward(block, x)
            if record_heads == "all":
                for a in attns:
                    records.append(AffinityRecord(i, np.asarray(ad._val(a))))
            else:
                records.append(AffinityRecord(i, np.asarray(ad._val(attns[0]))))
    return x, records


# ---------------------------------------------------------------------------
# parameter plumbing


def head_params(head):
    """Flat list of weight arrays in declaration order."""
    out = []
    for block in head.blocks:
        if isinstance(block, FfnLayer):
            out += [block.w, block.b]
        elif isinstance(block, TransFusionBlock):
            out += [block.w_q, block.w_k, block.w_v]
        else:
            out += list(block.w_q) + list(block.w_k) + list(block.w_v)
            out += [block.w_o, block.ffn_w1, block.ffn_b1, block.ffn_w2, block.ffn_b2,
                    block.ln1_gain, block.ln1_bias, block.ln2_gain, block.ln2_bias]
    return out


def with_params(head, params):
    """Head of the same shape with weights replaced from the flat list."""
    it = iter(params)
    blocks = []
    for block in head.blocks:
        if isinstance(block, FfnLayer):
            blocks.append(FfnLayer(next(it), next(it)))
        elif isinstance(block, TransFusionBlock):
            blocks.append(replace(block, w_q=next(it), w_k=next(it), w_v=next(it)))
        else:
            h = block.heads
            blocks.append(MultiHeadBlock(
                w_q=[next(it) for _ in range(h)],
                w_k=[next(it) for _ in range(h)],
                w_v=[next(it) for _ in range(h)],
                w_o=next(it), ffn_w1=next(it), ffn_b1=next(it),
                ffn_w2=next(it), ffn_b2=next(it),
                ln1_gain=next(it), ln1_bias=next(it),
                ln2_gain=next(it), ln2_bias=next(it)))
    return ProjectionHead(head.kind, blocks)


def lift_head(head, tape):
    """Same head with every weight registered on the tape."""
    return with_params(head, [tape.var(p) for p in head_params(head)])


def param_count(head):
    return int(sum(np.asarray(p).size for p in head_params(head)))


# ---------------------------------------------------------------------------
# checkpoints: manifest (key=value text) + concatenated binary matrices


def save_head(directory, head, seed=0, extra=None):
    os.makedirs(directory, exist_ok=True)
    first = head.blocks[0] if head.blocks else None
    if head.kind == "ffn":
        dims = "x".join(str(ad._val(b.w).shape[0]) for b in head.blocks)
        if head.blocks:
            dims += "x" + str(ad._val(head.blocks[-1].w).shape[1])
        heads_n = 0
    elif head.kind == "transfusion":
        dims = str(ad._val(first.w_q).shape[0]) if first else "0"
        heads_n = 1
    else:
        dims = str(ad._val(first.w_o).shape[1]) if first else "0"
        heads_n = first.heads if first else 0
    lines = {"kind": head.kind, "dims": dims, "depth": head.depth,
             "heads": heads_n, "seed": seed}
    if head.kind == "transfusion" and first is not None:
        lines["mode"] = first.mode
        lines["residual"] = "on" if first.residual else "off"
    if extra:
        lines.update(extra)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        for key, value in lines.items():
            fh.write(f"{key}={value}\n")
    save_matrices(os.path.join(directory, "weights.bin"),
                  [np.asarray(ad._val(p)) for p in head_params(head)])


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}: malformed manifest line {line!r}")
            key, value = line.split("=", 1)
            out[key] = value
    return out


def load_head(directory):
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    mats = load_matrices(os.path.join(directory, "weights.bin"))
    kind = manifest["kind"]
    depth = int(manifest["depth"])
    heads_n = int(manifest.get("heads", 1) or 1)
    blocks = []
    it = iter(mats)
    if kind == "ffn":
        for _ in range(depth):
            blocks.append(FfnLayer(next(it), next(it)))
    elif kind == "transfusion":
        mode = manifest.get("mode", "code-listing")
        residual = manifest.get("residual", "on") == "on"
        for _ in range(depth):
            blocks.append(TransFusionBlock(next(it), next(it), next(it),
                                           mode=mode, residual=residual))
    elif kind == "transformer":
        for _ in range(depth):
            blocks.append(MultiHeadBlock(
                w_q=[next(it) for _ in range(heads_n)],
                w_k=[next(it) for _ in range(heads_n)],
                w_v=[next(it) for _ in range(heads_n)],
                w_o=next(it), ffn_w1=next(it), ffn_b1=next(it),
                ffn_w2=next(it), ffn_b2=next(it),
                ln1_gain=next(it), ln1_bias=next(it),
                ln2_gain=next(it), ln2_bias=next(it)))
    else:
        raise FormatError(f"manifest kind {kind!r} is not a known head")
    leftovers = sum(1 for _ in it)
    if leftovers:
        raise FormatError(f"checkpoint has {leftovers} unexpected trailing matrices")
    return ProjectionHead(kind, blocks), manifest
