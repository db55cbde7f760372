"""Command-line entry point: ``plausible-shapes <command> ...``.

Every command that produces artifacts also writes the resolved config next
to them (``config.yaml`` inside output directories, ``<file>.config.yaml``
beside output files). Exit codes: 0 success, 1 invalid input or config,
2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .boxflow import BoxFlow
from .config import RunConfig, apply_overrides, load_config, parse_set
from .errors import NonFiniteLoss, PlausibleShapesError
from .evalmetrics import evaluate
from .observe import render_depth, write_pgm
from .plausibles import build_plausible_sets, sweep_candidates, load_plausible_sets, save_plausible_sets
from .pssnet import PSSNet, load_sample_sets, save_sample_sets
from .shapedata import build_dataset, load_dataset, occlusion_partition, save_dataset
from .voxelcore import load_binvox, to_point_cloud, write_ply

log = logging.getLogger("plausible_shapes")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _resolve(args, base: RunConfig = None) -> RunConfig:
    """Defaults < config file (``--config`` or the dataset's) < flags."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif base is not None:
        cfg = base
    else:
        cfg = RunConfig()
    pairs = [parse_set(s) for s in getattr(args, "set", None) or []]
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("epochs", None), ("mode", "pssnet.mode"), ("n", "sampling.n")):
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "epochs":
            key = "flow.epochs" if args.command == "flow" else "pssnet.epochs"
        pairs.append((key, value))
    return apply_overrides(cfg, pairs)


def _dataset_config(directory) -> RunConfig:
    path = os.path.join(directory, "config.yaml")
    return load_config(path) if os.path.exists(path) else RunConfig()


def _load_split(directory, split):
    data = load_dataset(directory)
    if split not in data or len(data[split]) == 0:
        raise ValueError(f"{directory}: dataset has no {split!r} entries")
    return data[split]


def _write_bytes(path, blob: bytes):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(blob)


# -- commands ----------------------------------------------------------------

def cmd_dataset_gen(args):
    cfg = _resolve(args)
    data = build_dataset(cfg.specs(), cfg.sweep(), cfg.data.test_fraction, cfg.seed)
    save_dataset(data, args.out, extra={"seed": cfg.seed})
    cfg.write(os.path.join(args.out, "config.yaml"))
    occ, vis = occlusion_partition(data["test"])
    print(f"dataset: {len(data['train'])} train / {len(data['test'])} test entries "
          f"({len(occ)} test views with an occluded handle) -> {args.out}")


def cmd_flow_train(args):
    cfg = _resolve(args, _dataset_config(args.dataset))
    train = _load_split(args.dataset, "train")
    f = cfg.flow
    flow = BoxFlow(
        n_layers=f.n_layers,
        hidden=f.hidden,
        n_hidden_layers=f.n_hidden_layers,
        batchnorm=f.batchnorm,
        standardize=f.standardize,
        learning_rate=f.learning_rate,
        batch_size=f.batch_size,
        epochs=f.epochs,
        seed=cfg.seed,
    ).fit(train.boxes())
    print(f"epoch    0  nll {flow.initial_nll_:.4f}")
    lines = ["epoch,nll", f"0,{flow.initial_nll_:.8g}"]
    for i, v in enumerate(flow.history_, 1):
        lines.append(f"{i},{v:.8g}")
        if i % max(1, len(flow.history_) // 20) == 0 or i == len(flow.history_):
            print(f"epoch {i:4d}  nll {v:.4f}")
    print(f"final train nll {flow.nll(train.boxes()):.4f}")
    _write_bytes(args.out, flow.to_bytes())
    with open(args.out + ".log.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    cfg.write(args.out + ".config.yaml")


def cmd_pssnet_train(args):
    cfg = _resolve(args, _dataset_config(args.dataset))
    p = cfg.pssnet
    flow = None
    if p.mode == "pssnet":
        if not args.flow:
            raise ValueError("--flow is required with --mode pssnet")
        flow = BoxFlow.load(args.flow)
    train = _load_split(args.dataset, "train")
    model = PSSNet(
        mode=p.mode,
        flow=flow,
        n_features=p.n_features,
        hidden=tuple(p.hidden),
        lambda_vae=p.lambda_vae,
        lambda_flow=p.lambda_flow,
        kl_mode=p.kl_mode,
        learning_rate=p.learning_rate,
        batch_size=p.batch_size,
        epochs=p.epochs,
        logvar_clip=p.logvar_clip,
        seed=cfg.seed,
        verbose=True,
    )
    model.fit(train.observations(), train.shapes(), train.boxes() if p.mode == "pssnet" else None)
    _write_bytes(args.out, model.to_bytes())
    with open(args.out + ".log.csv", "w") as fh:
        fh.write(model.history_csv())
    cfg.write(args.out + ".config.yaml")


def cmd_plausibles_build(args):
    cfg = _resolve(args, _dataset_config(args.dataset))
    test = _load_split(args.dataset, "test")
    start = time.perf_counter()
    psets = build_plausible_sets(
        test, cfg.plausibles.sweep, cfg.icp_config(), cfg.obs_config(), jobs=cfg.jobs, dedup=cfg.plausibles.dedup
    )
    elapsed = time.perf_counter() - start
    n_cand = len(sweep_candidates(test, cfg.plausibles.sweep))
    sizes = [len(v) for v in psets.values()]
    print(f"pairs: {len(test)} x {n_cand} = {len(test) * n_cand}; elapsed {elapsed:.1f}s; "
          f"mean set size {sum(sizes) / len(sizes):.2f}")
    save_plausible_sets(psets, args.out)
    cfg.write(os.path.join(args.out, "config.yaml"))


def cmd_complete(args):
    model = PSSNet.load(args.model)
    cfg = _resolve(args, _dataset_config(args.dataset))
    test = _load_split(args.dataset, "test")
    n = cfg.sampling.n
    samples = model.sample(test.observations(), n=n, seed=cfg.seed)
    sets = {e.id: s for e, s in zip(test, samples)}
    save_sample_sets(sets, args.out, extra={"n": n, "seed": cfg.seed, "mode": model.mode})
    cfg.write(os.path.join(args.out, "config.yaml"))
    print(f"wrote {n} completions for each of {len(sets)} test views -> {args.out}")


def cmd_eval(args):
    cfg = _resolve(args, _dataset_config(args.dataset))
    test = _load_split(args.dataset, "test")
    samples = load_sample_sets(args.samples)
    psets = load_plausible_sets(args.plausibles)
    gts = {e.id: e.shape for e in test}
    missing = [i for i in samples if i not in psets or i not in gts]
    if missing:
        raise ValueError(f"{args.samples}: ids without a plausible set or ground truth: {missing[:5]}")
    report = evaluate(samples, psets, gts, cfg.eval.empty_penalty, jobs=cfg.jobs)
    occ, vis = occlusion_partition(test)
    strata = {"handle_occluded": [i for i in occ if i in samples], "handle_visible": [i for i in vis if i in samples]}
    text = report.to_csv({k: v for k, v in strata.items() if v})
    _write_bytes(args.out, text.encode("utf-8"))
    cfg.write(args.out + ".config.yaml")
    for line in text.splitlines():
        if line.startswith("MEAN"):
            print(line)


def cmd_render(args):
    g = load_binvox(args.shape)
    _write_bytes(args.out, write_pgm(render_depth(g)))


def cmd_export_ply(args):
    g = load_binvox(args.shape)
    _write_bytes(args.out, write_ply(to_point_cloud(g)).encode("ascii"))


# -- parser ------------------------------------------------------------------

def _common(p, config=True, jobs=False):
    if config:
        p.add_argument("--config", help="YAML run config (path or bundled name, e.g. toy-mugs)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key, e.g. pssnet.epochs=5")
        p.add_argument("--seed", type=int)
    if jobs:
        p.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plausible-shapes", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="toy datasets").add_subparsers(dest="action", required=True)
    p = ds.add_parser("gen", help="generate a toy dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_gen)

    fl = sub.add_parser("flow", help="bounding-box flow").add_subparsers(dest="action", required=True)
    p = fl.add_parser("train", help="fit the flow on training boxes")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow_train)

    ps = sub.add_parser("pssnet", help="completion network").add_subparsers(dest="action", required=True)
    p = ps.add_parser("train", help="train the completion network")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--flow")
    p.add_argument("--mode", choices=("pssnet", "plain_vae"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pssnet_train)

    pl = sub.add_parser("plausibles", help="plausible sets").add_subparsers(dest="action", required=True)
    p = pl.add_parser("build", help="build plausible sets for the test split")
    _common(p, jobs=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plausibles_build)

    p = sub.add_parser("complete", help="sample completions for the test split")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="diversity metrics report (CSV)")
    _common(p, jobs=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--plausibles", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="depth image of a binvox shape as 16-bit PGM")
    p.add_argument("--shape", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-ply", help="occupied voxel centers as an ASCII PLY point cloud")
    p.add_argument("--shape", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlausibleShapesError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
