"""Command-line surface: data generation, theory checks, training,
evaluation, and attention-map export.

Exit codes: 0 success, 1 verification or I/O failure, 2 usage/config error.
All randomness flows from --seed; train/eval read a JSON config whose keys
mirror RunConfig, with explicit flags overriding the file.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys

import numpy as np

from . import geometry, heads, losses, pipeline, verify
from .errors import FusionLabError, TrainingDiverged
from .matio import save_csv, save_matrix, save_entries_csv
from .rng import Rng

OK, FAIL, USAGE = 0, 1, 2


def write_pgm(path, a):
    """ASCII PGM (P2, maxval 255), min-max scaled; constant matrices go black."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi > lo:
        pixels = np.rint((a - lo) / (hi - lo) * 255.0).astype(int)
    else:
        pixels = np.zeros(a.shape, dtype=int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row) + "\n")


def export_attention(records, out_dir):
    """One PGM heatmap and one raw-value CSV per recorded layer."""
    if not records:
        raise FusionLabError("no attention records to export")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for rec in records:
        base = os.path.join(out_dir, f"layer_{rec.layer}")
        write_pgm(base + ".pgm", rec.matrix)
        save_csv(base + ".csv", rec.matrix)
        written += [base + ".pgm", base + ".csv"]
    return written


# ---------------------------------------------------------------------------
# subcommands


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0)


def _add_geometry_args(sub, per_cluster_default=8):
    sub.add_argument("--m", type=int, default=16)
    sub.add_argument("--k", type=int, default=3)
    sub.add_argument("--rank", type=int, default=2)
    sub.add_argument("--per-cluster", type=int, default=per_cluster_default)
    sub.add_argument("--eps", type=float, default=0.0)
    sub.add_argument("--spread", type=float, default=0.35)


def cmd_gen_data(args):
    rng = Rng(args.seed)
    ens = geometry.generate_ensemble(args.m, args.k, args.rank, rng.derive("ens"),
                                     mode=args.mode)
    batch = geometry.sample_batch(ens, args.per_cluster, args.eps, rng.derive("batch"),
                                  spread=args.spread)
    os.makedirs(args.out, exist_ok=True)
    save_matrix(os.path.join(args.out, "samples.bin"), batch.x)
    save_csv(os.path.join(args.out, "labels.csv"), batch.labels.reshape(-1, 1))
    for i, basis in enumerate(ens.bases):
        save_matrix(os.path.join(args.out, f"basis_{i}.bin"), basis)
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        for key in ("seed", "m", "k", "rank", "per_cluster", "eps", "spread", "mode"):
            fh.write(f"{key}={getattr(args, key)}\n")
    print(f"wrote {batch.n} samples in {args.out}")
    return OK


def cmd_rho(args):
    rng = Rng(args.seed)
    ens = geometry.generate_ensemble(args.m, args.k, args.rank, rng.derive("ens"),
                                     mode=args.mode)
    batch = geometry.sample_batch(ens, args.per_cluster, args.eps, rng.derive("batch"),
                                  spread=args.spread)
    result = geometry.cluster_integrity(ens, batch, tol=args.tol, rng=rng.derive("rho"))
    for k, rho_k in enumerate(result.per_cluster):
        line = f"rho_{k + 1}={rho_k:.6f}"
        if args.brute:
            line += f" brute={geometry.rho_brute(ens, batch, k, args.brute_steps):.6f}"
        print(line)
    print(f"rho={result.rho:.6f}")
    return OK


def cmd_verify_thm1(args):
    rows = verify.thm1_verify(args.m, args.k, args.rank, range(args.seeds),
                              args.per_cluster, args.spread)
    all_ok = True
    for row in rows:
        print(f"seed {row.seed}: rho={row.rho_hat:.4f} off_max={row.off_max:.3e} "
              f"in_min={row.in_min:.4f} margin={row.in_margin:+.3e} "
              f"{'ok' if row.ok else 'VIOLATION'}")
        all_ok = all_ok and row.ok
    print("verify-thm1:", "pass" if all_ok else "FAIL")
    return OK if all_ok else FAIL


def cmd_verify_thm2(args):
    rows = verify.thm2_verify(args.m, args.k, args.rank, args.eps, args.layers,
                              range(args.seeds), args.per_cluster, args.spread,
                              residual=(args.residual == "on"))
    monotone = 0
    for row in rows:
        traj = " ".join(f"{s:.4g}" for s in row.sharpness)
        print(f"seed {row.seed}: rho={row.rho_hat:.4f} delta={row.delta:.4f} "
              f"Delta={row.Delta:.4f} sep={row.separable} gamma={row.gamma:.3e} "
              f"S=[{traj}] {'monotone' if row.monotone else 'non-monotone'}")
        monotone += row.monotone
    need = int(np.ceil(0.9 * len(rows)))
    ok = monotone >= need and all(r.separable for r in rows)
    print(f"verify-thm2: {monotone}/{len(rows)} monotone (need >= {need}):",
          "pass" if ok else "FAIL")
    return OK if ok else FAIL


def cmd_gradcheck(args):
    rows = verify.gradcheck_suite(range(args.seeds))
    worst = {}
    for row in rows:
        worst[row.name] = max(worst.get(row.name, 0.0), row.max_rel_err)
    all_ok = all(r.ok for r in rows)
    for name in sorted(worst):
        print(f"{name}: max_rel_err={worst[name]:.3e} "
              f"{'ok' if worst[name] < 1e-4 else 'FAIL'}")
    print("gradcheck:", "pass" if all_ok else "FAIL")
    return OK if all_ok else FAIL


def _config_from_args(args):
    data = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    overrides = {
        "seed": args.seed, "loss": args.loss, "tau": args.tau, "mode": args.mode,
        "depth": args.layers, "head": args.head, "epochs": args.epochs,
    }
    if args.residual is not None:
        overrides["residual"] = args.residual == "on"
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return pipeline.RunConfig.from_dict(data)


def cmd_train(args):
    cfg = _config_from_args(args)
    try:
        result = pipeline.train(cfg, out_dir=args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return FAIL
    report = result.report
    print(f"unsup_acc={report.unsup_acc:.4f} probe_acc={report.probe_acc:.4f} "
          f"wall_time={report.wall_time:.1f}s")
    if args.out:
        print(f"run artifacts in {args.out}")
    return OK


def cmd_eval(args):
    manifest_path = os.path.join(args.run, "manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = pipeline.RunConfig.from_dict(manifest["config"])
    encoder = pipeline.load_encoder(os.path.join(args.run, "encoder"))
    head, _ = heads.load_head(os.path.join(args.run, "head"))
    root = Rng(cfg.seed)
    if cfg.data == "synthetic":
        train_ds, test_ds, _ = pipeline.make_synthetic(cfg, root.derive("data"))
    else:
        full = pipeline.load_mnist(cfg.mnist_images, cfg.mnist_labels, cfg.limit or None)
        train_ds, test_ds = pipeline.split_dataset(full, cfg.test_fraction,
                                                   root.derive("data"))
    probe_idx = pipeline._stratified_probe(train_ds.labels, cfg.probe_per_class,
                                           root.derive("probe"))
    report = pipeline.evaluate(encoder, head, train_ds, test_ds,
                               root.derive("eval"), cfg.probe_fraction,
                               cfg.probe_epochs, cfg.probe_lr,
                               probe_batch=(train_ds.samples[probe_idx],
                                            train_ds.labels[probe_idx]))
    print(f"unsup_acc={report.unsup_acc:.4f} probe_acc={report.probe_acc:.4f}")
    if report.sharpness:
        print("sharpness:", " ".join(f"{s:.4g}" for s in report.sharpness))
        print("alignment:", " ".join(f"{a:.4f}" for a in report.alignment))
    return OK


def _collect_run_records(run_dir, epoch):
    paths = glob.glob(os.path.join(run_dir, "attention", "epoch_*_layer_*.bin"))
    if not paths:
        raise FusionLabError(f"no attention records under {run_dir}")
    pattern = re.compile(r"epoch_(\d+)_layer_(\d+)\.bin$")
    found = {}
    for path in paths:
        match = pattern.search(path)
        if match:
            found.setdefault(int(match.group(1)), {})[int(match.group(2))] = path
    epoch_id = max(found) if epoch == "last" else int(epoch)
    if epoch_id not in found:
        raise FusionLabError(f"epoch {epoch_id} has no stored attention records")
    from .matio import load_matrix
    return [geometry.AffinityRecord(layer, load_matrix(found[epoch_id][layer]))
            for layer in sorted(found[epoch_id])], epoch_id


def cmd_attention_maps(args):
    records, epoch_id = _collect_run_records(args.run, args.epoch)
    out = args.out or os.path.join(args.run, f"maps_epoch_{epoch_id}")
    written = export_attention(records, out)
    print(f"wrote {len(written)} files to {out}")
    return OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fusionlab",
        description="attention-fusion contrastive learning workbench")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-data", help="write a synthetic subspace batch")
    _add_common(sub)
    _add_geometry_args(sub)
    sub.add_argument("--mode", choices=("random", "axis-aligned"), default="random")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_gen_data)

    sub = subs.add_parser("rho", help="greedy cluster-integrity estimate")
    _add_common(sub)
    _add_geometry_args(sub)
    sub.add_argument("--mode", choices=("random", "axis-aligned"), default="random")
    sub.add_argument("--brute", action="store_true",
                     help="also run the grid oracle (complement dim <= 3)")
    sub.add_argument("--brute-steps", type=int, default=720)
    sub.add_argument("--tol", type=float, default=1e-9,
                     help="convergence threshold; tighter than the library "
                          "default so printed values carry six stable decimals")
    sub.set_defaults(func=cmd_rho, spread=0.0)

    sub = subs.add_parser("verify-thm1", help="block-diagonal construction check")
    _add_common(sub)
    _add_geometry_args(sub, per_cluster_default=10)
    sub.add_argument("--seeds", type=int, default=10)
    sub.set_defaults(func=cmd_verify_thm1)

    sub = subs.add_parser("verify-thm2", help="layer-wise sharpness trajectory check")
    _add_common(sub)
    _add_geometry_args(sub, per_cluster_default=10)
    sub.add_argument("--seeds", type=int, default=10)
    sub.add_argument("--layers", type=int, default=4)
    sub.add_argument("--residual", choices=("on", "off"), default="off")
    sub.set_defaults(func=cmd_verify_thm2, eps=0.02)

    sub = subs.add_parser("train", help="contrastive training run")
    sub.add_argument("--config", default=None)
    sub.add_argument("--out", default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--loss", choices=("nt_xent", "jsd", "kl_softmax"), default=None)
    sub.add_argument("--tau", type=float, default=None)
    sub.add_argument("--mode", choices=("equation", "code-listing"), default=None)
    sub.add_argument("--residual", choices=("on", "off"), default=None)
    sub.add_argument("--layers", type=int, default=None)
    sub.add_argument("--head", choices=heads.KINDS, default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.set_defaults(func=cmd_train)

    sub = subs.add_parser("eval", help="evaluate a finished run directory")
    sub.add_argument("--run", required=True)
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    sub.add_argument("--seeds", type=int, default=10)
    sub.set_defaults(func=cmd_gradcheck)

    sub = subs.add_parser("attention-maps", help="export stored attention heatmaps")
    sub.add_argument("--run", required=True)
    sub.add_argument("--epoch", default="last")
    sub.add_argument("--out", default=None)
    sub.set_defaults(func=cmd_attention_maps)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FusionLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        from .errors import ConfigurationError, FormatError
        if isinstance(exc, (ConfigurationError, FormatError)):
            return USAGE
        return FAIL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return FAIL


if __name__ == "__main__":
    sys.exit(main())
