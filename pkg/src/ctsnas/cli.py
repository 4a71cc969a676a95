"""Command-line entry point: generate | search | derive | train | eval | oplab | report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_tensors, save_tensors
from .config import ConfigError, DataConfig, SearchConfig, TrainConfig
from .data import (
    CtsDataset,
    DataError,
    Scaler,
    SplitSpec,
    build_supports,
    default_adjacency,
    generate_synthetic,
    load_dataset,
    pseudo_split,
    split_and_window,
    write_dataset,
)
from .genotype import EMBED, BlockGenotype, Genotype, GenotypeError, derive_genotype, load_genotype
from .metrics import MetricError, evaluate
from .model import build_discrete_model
from .search import (
    SearchDiverged,
    joint_search,
    load_search_checkpoint,
    search_no_macro,
    train_from_scratch,
)

log = logging.getLogger("ctsnas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _prepare_out(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False) + "\n", encoding="utf-8")


def _versions() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__}


def _write_manifest(out: Path, command: str, configs: dict, seed, dataset_hash, genotype_hash, outputs, start):
    _write_json(out / "manifest.json", {
        "command": command,
        "config": configs,
        "seed": seed,
        "dataset_hash": dataset_hash,
        "genotype_hash": genotype_hash,
        "outputs": sorted(str(o) for o in outputs),
        "wall_clock_s": round(time.time() - start, 3),
        "versions": _versions(),
    })


def _load_configs(args):
    file_values = cfgmod.read_config_file(args.config) if getattr(args, "config", None) else {}
    cfgmod.check_keys(file_values)
    seed = getattr(args, "seed", None)
    data = cfgmod.build(DataConfig, file_values)
    search = cfgmod.build(SearchConfig, file_values, {
        "seed": seed, "M": getattr(args, "M", None), "B": getattr(args, "B", None),
        "epochs": getattr(args, "epochs", None),
        "no_temperature": True if getattr(args, "no_temperature", False) else None,
        "no_macro_search": True if getattr(args, "no_macro", False) else None,
    })
    train = cfgmod.build(TrainConfig, file_values, {
        "seed": seed, "train_epochs": getattr(args, "train_epochs", None),
        "patience": getattr(args, "patience", None),
    })
    return data, search, train


def _splits(ds: CtsDataset, data: DataConfig):
    spec = SplitSpec((data.train_ratio, data.val_ratio, data.test_ratio), data.pseudo_split)
    return split_and_window(ds, spec, data.P, data.Q, data.mode)


def _graph(ds: CtsDataset):
    adj = ds.adjacency if ds.adjacency is not None else default_adjacency(ds.n_nodes)
    return build_supports(adj), adj


def _cfg_dict(*configs) -> dict:
    return {type(c).__name__: dataclasses.asdict(c) for c in configs}


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    start = time.time()
    out = _prepare_out(args.out, args.force)
    ds = generate_synthetic(args.nodes, args.steps, args.seed, process=args.process)
    write_dataset(ds, out)
    outputs = [p.name for p in out.iterdir()]
    _write_manifest(out, "generate", {"nodes": args.nodes, "steps": args.steps, "process": args.process},
                    args.seed, ds.content_hash(), None, outputs, start)
    print(f"wrote {ds.name} ({ds.n_nodes} nodes x {ds.n_steps} steps) to {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    start = time.time()
    data, search, _ = _load_configs(args)
    ds = load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    train, _, _, scaler = _splits(ds, data)
    d_train, d_val = pseudo_split(train, data.pseudo_split)
    supports, adj = _graph(ds)
    fn = search_no_macro if search.no_macro_search else joint_search
    try:
        res = fn(d_train, d_val, scaler, supports, adj, search, ds.n_features, ds.name,
                 checkpoint_dir=out / "checkpoint")
    except SearchDiverged as exc:
        _write_json(out / "search_summary.json", {"status": "diverged", "message": str(exc),
                                                   "last_finite_epoch": exc.last_epoch})
        raise
    (out / "genotype.json").write_text(res.genotype.to_json() + "\n", encoding="utf-8")
    with open(out / "search_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in res.log:
            fh.write(json.dumps(rec) + "\n")
    _write_json(out / "search_summary.json", {
        "status": "ok", "epochs": len(res.log), "final_tau": res.state.tau,
        "best_epoch": res.state.best_epoch, "best_loss_val": res.state.best_loss,
        "final_sharpness": res.log[-1]["sharpness"], "n_features": ds.n_features,
        "final_genotype": res.final_genotype.to_dict(),
    })
    _write_manifest(out, "search", _cfg_dict(data, search), search.seed, ds.content_hash(),
                    res.genotype.hash(), ["genotype.json", "search_log.jsonl", "search_summary.json",
                                          "checkpoint"], start)
    print(f"genotype {res.genotype.hash()} written to {out / 'genotype.json'}")
    return EXIT_OK


def cmd_derive(args) -> int:
    start = time.time()
    ds = load_dataset(args.data)
    supports, adj = _graph(ds)
    state, meta = load_search_checkpoint(args.checkpoint, supports, adj)
    out = _prepare_out(args.out, args.force)
    g = derive_genotype(state.net, meta.get("dataset", ds.name), state.config.forbid_zero_on_mandatory_edge)
    (out / "genotype.json").write_text(g.to_json() + "\n", encoding="utf-8")
    _write_manifest(out, "derive", {"checkpoint": str(args.checkpoint), "epoch": state.epoch},
                    state.config.seed, ds.content_hash(), g.hash(), ["genotype.json"], start)
    print(f"genotype {g.hash()} derived at epoch {state.epoch}")
    return EXIT_OK


def _check_features(genotype_path: Path, n_features: int):
    summary = genotype_path.parent / "search_summary.json"
    if summary.exists():
        expected = json.loads(summary.read_text()).get("n_features")
        if expected is not None and expected != n_features:
            raise DataError(f"feature dimension mismatch: genotype searched with F={expected}, dataset has F={n_features}")


def cmd_train(args) -> int:
    start = time.time()
    data, _, tcfg = _load_configs(args)
    ds = load_dataset(args.data)
    genotype = load_genotype(args.genotype)
    _check_features(Path(args.genotype), ds.n_features)
    out = _prepare_out(args.out, args.force)
    train, val, test, scaler = _splits(ds, data)
    supports, adj = _graph(ds)
    res = train_from_scratch(genotype, train, val, test, scaler, supports, adj, tcfg, data.horizons, ds.name)
    meta = {"n_features": ds.n_features, "horizon": data.Q, "mode": data.mode, "residual": tcfg.residual,
            "seed": tcfg.seed, "best_epoch": res.best_epoch, "data_config": dataclasses.asdict(data)}
    save_tensors(out / "model", dict(res.model.state_dict()), meta)
    (out / "genotype.json").write_text(genotype.to_json() + "\n", encoding="utf-8")
    _write_json(out / "scaler.json", scaler.to_dict())
    (out / "report.json").write_text(res.report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(res.report.table() + "\n", encoding="utf-8")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in res.history:
            fh.write(json.dumps(rec) + "\n")
    _write_manifest(out, "train", _cfg_dict(data, tcfg), tcfg.seed, ds.content_hash(), genotype.hash(),
                    ["model", "genotype.json", "scaler.json", "report.json", "report.txt", "train_log.jsonl"], start)
    print(res.report.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    start = time.time()
    model_dir = Path(args.model)
    for name in ("model", "genotype.json", "scaler.json"):
        if not (model_dir / name).exists():
            raise DataError(f"missing file: {model_dir / name}")
    tensors, meta = load_tensors(model_dir / "model")
    ds = load_dataset(args.data)
    if ds.n_features != meta["n_features"]:
        raise DataError(f"feature dimension mismatch: model expects F={meta['n_features']}, dataset has F={ds.n_features}")
    data = DataConfig(**{**meta["data_config"], "horizons": tuple(meta["data_config"]["horizons"])})
    genotype = load_genotype(model_dir / "genotype.json")
    scaler = Scaler.from_dict(json.loads((model_dir / "scaler.json").read_text()))
    _, _, test, _ = _splits(ds, data)
    supports, adj = _graph(ds)
    model = build_discrete_model(genotype, ds.n_features, meta["horizon"], meta["mode"], supports, adj,
                                 residual=meta["residual"], seed=meta["seed"])
    state = {k: v for k, v in tensors.items()}
    # graph operators carry dataset-specific supports; keep those of the evaluation dataset
    fresh = model.state_dict()
    for k in fresh:
        if k.endswith(("support_fwd", "support_bwd", "l_tilde")):
            state[k] = fresh[k]
    model.load_state_dict(state)
    report = evaluate(model, test, scaler, data.horizons, ds.name, genotype.hash())
    out = _prepare_out(args.out, args.force)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    _write_manifest(out, "eval", {"model": str(model_dir), **_cfg_dict(data)}, None, ds.content_hash(),
                    genotype.hash(), ["report.json", "report.txt"], start)
    print(report.table())
    return EXIT_OK


def scaffold_genotype(variant: str, scaffold: str, D: int = 32) -> Genotype:
    """Single block: scaffold operator on node 1, the variant under test on node 2, plus a skip."""
    nodes = [[(0, scaffold)], [(1, variant), (0, "IDENTITY")]]
    return Genotype([BlockGenotype(nodes)], [(EMBED, 1)], M=3, D=D)


OPLAB_PAIRS = (
    ("GCN", "GDCC", ("DGCN", "CHEBY_GCN")),
    ("Attention", "DGCN", ("INF_T", "TRANSFORMER_T")),
)


def cmd_oplab(args) -> int:
    start = time.time()
    data, _, tcfg = _load_configs(args)
    ds = load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    train, val, test, scaler = _splits(ds, data)
    supports, adj = _graph(ds)
    rows = []
    for family, scaffold, variants in OPLAB_PAIRS:
        row = {"family": family, "scaffold": scaffold}
        for v in variants:
            g = scaffold_genotype(v, scaffold)
            res = train_from_scratch(g, train, val, test, scaler, supports, adj, tcfg, data.horizons, ds.name,
                                     allow_reference=True)
            row[v] = res.report.average["MAE"]
        rows.append(row)
    _write_json(out / "oplab.json", rows)
    lines = [f"{'family':<10} {'scaffold':<9} {'variant A':<14} {'MAE':>8}   {'variant B':<14} {'MAE':>8}"]
    for (family, scaffold, (a, b)), row in zip(OPLAB_PAIRS, rows):
        lines.append(f"{family:<10} {scaffold:<9} {a:<14} {row[a]:>8.4f}   {b:<14} {row[b]:>8.4f}")
    table = "\n".join(lines)
    (out / "oplab.txt").write_text(table + "\n", encoding="utf-8")
    _write_manifest(out, "oplab", _cfg_dict(data, tcfg), tcfg.seed, ds.content_hash(), None,
                    ["oplab.json", "oplab.txt"], start)
    print(table)
    return EXIT_OK


def _read_log(path: Path) -> list[dict]:
    if path.is_dir():
        path = path / "search_log.jsonl"
    if not path.exists():
        raise DataError(f"missing file: {path}")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise DataError(f"search log {path} is empty")
    return records


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    start = time.time()
    records = _read_log(Path(args.log))
    out = _prepare_out(args.out, args.force)
    epochs = [r["epoch"] for r in records]
    curves = {
        "loss.png": ("loss (MAE)", [("train", "loss_train"), ("pseudo-val", "loss_val")], False),
        "tau.png": ("temperature", [("tau", "tau")], True),
        "sharpness.png": ("mean max operator weight", [("sharpness", "sharpness")], False),
    }
    for name, (ylabel, series, logy) in curves.items():
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, key in series:
            ax.plot(epochs, [r[key] for r in records], label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if logy:
            ax.set_yscale("log")
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(out / name, dpi=100)
        plt.close(fig)
    best = min(records, key=lambda r: r["loss_val"])
    summary = "\n".join([
        f"epochs: {len(records)}",
        f"tau: {records[0]['tau']:.6g} -> {records[-1]['tau']:.6g}",
        f"final loss train/val: {records[-1]['loss_train']:.6g} / {records[-1]['loss_val']:.6g}",
        f"best pseudo-val loss: {best['loss_val']:.6g} at epoch {best['epoch']}",
        f"final sharpness: {records[-1]['sharpness']:.4f}",
    ])
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    _write_manifest(out, "report", {"log": str(args.log)}, None, None, None,
                    [*curves, "summary.txt"], start)
    print(summary)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctsnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if config:
            p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output run directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, data=False, config=False)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--steps", type=int, default=2048)
    p.add_argument("--process", choices=("diffusion", "seasonal"), default="diffusion")
    p.set_defaults(func=cmd_generate, seed=0)

    p = sub.add_parser("search", help="joint micro/macro architecture search")
    common(p)
    p.add_argument("--M", type=int, help="nodes per ST-block")
    p.add_argument("--B", type=int, help="number of ST-blocks")
    p.add_argument("--epochs", type=int, help="search epochs")
    p.add_argument("--no-temperature", action="store_true", help="ablation: untempered softmax")
    p.add_argument("--no-macro", action="store_true", help="ablation: one shared block, chain backbone")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="derive a genotype from a search checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="search checkpoint directory")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="train a genotype from scratch and report test metrics")
    common(p)
    p.add_argument("--genotype", required=True, help="genotype JSON file")
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a dataset's test split")
    common(p, config=False)
    p.add_argument("--model", required=True, help="train run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oplab", help="compare GCN and attention operator variants")
    common(p)
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_oplab)

    p = sub.add_parser("report", help="plot a search log")
    p.add_argument("--log", required=True, help="search_log.jsonl or a search run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenotypeError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SearchDiverged as exc:
        print(f"error: search diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
