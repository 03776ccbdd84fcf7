"""Command-line entry points: gen-data, train, register, benchmark, selftest.

Each command reads a JSON config (``--config``) whose keys are the fields of
the matching ``*Config`` dataclass below; ``--set key=value`` overrides single
keys (the value is parsed as JSON when possible, else taken as a string).
Unknown keys are rejected. Every output file starts with a header recording
the full resolved config, including the seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


from . import data
from .errors import ArchitectureMismatchError, CheckpointError, ConfigError, TrainingError
from .features import extract, make_extractor
from .geometry import RigidTransform, compute_metrics
from .icp import IcpConfig, icp_register
from .pipeline import IdamConfig, IdamModel, register
from .training import TrainConfig, prepare_pairs, train

log = logging.getLogger("idam")

TRAIN_COLUMNS = ["epoch", "match_loss", "neg_entropy_loss", "hybrid_loss", "wall_seconds"]
BENCH_COLUMNS = ["method", "RMSE_R_deg", "MAE_R_deg", "RMSE_t", "MAE_t", "sec_per_frame"]
METHODS = ("idam", "icp", "oracle")


@dataclass
class GenDataConfig:
    out_dir: str = "data"
    shapes: str | None = None  # shape manifest; None = synthetic composite shapes
    count: int = 250  # synthetic shape count when ``shapes`` is None
    test_fraction: float = 0.2
    protocol: str = "unseen-shapes"
    seed: int = 0
    n_points: int = 1024
    crop: bool = True
    crop_size: int = 768
    crop_mode: str = "corresponding"


@dataclass
class TrainRunConfig:
    data: str = "data/manifest.tsv"
    checkpoint: str = "model.bin"
    log_csv: str = "train_log.csv"
    resume: str | None = None
    extractor: str = "fpfh"
    epochs: int = 40
    lr: float = 1e-4
    lr_decay_epoch: int = 30
    lr_decay: float = 0.1
    weight_decay: float = 1e-3
    seed: int = 0
    n_iter: int = 3
    match_radius: float = 0.1
    keep_ratio: float = 1 / 6
    hybrid: bool = True
    feature_scale: float = 1.0
    limit: int | None = None


@dataclass
class RegisterConfig:
    checkpoint: str = "model.bin"
    extractor: str = "fpfh"
    dump: str | None = None
    n_iter: int | None = None
    hybrid: bool | None = None
    seed: int = 0


@dataclass
class BenchmarkConfig:
    data: str = "data/manifest.tsv"
    split: str = "test"
    methods: list[str] = field(default_factory=lambda: ["idam", "icp"])
    oracle: bool = False
    checkpoint: str = "model.bin"
    extractor: str = "fpfh"
    output: str = "benchmark.csv"
    transforms_out: str | None = None
    n_iter: int | None = None
    hybrid: bool | None = None
    icp_max_iterations: int = 50
    icp_tol: float = 1e-6
    icp_trim: float = 0.0
    limit: int | None = None
    seed: int = 0


CONFIGS = {"gen-data": GenDataConfig, "train": TrainRunConfig, "register": RegisterConfig, "benchmark": BenchmarkConfig}


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (item,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, hint)


def build_config(cls, path: str | None = None, overrides: list[str] | None = None):
    """Defaults, then the JSON file, then ``key=value`` overrides; unknown keys raise ConfigError."""
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {sorted(known)}")
    for key, value in values.items():
        if not _type_ok(value, hints[key]):
            raise ConfigError(f"config key {key!r}: {value!r} is not a valid {hints[key]}")
    return cls(**values)


def config_header(cfg) -> str:
    return json.dumps({"config": asdict(cfg)}, sort_keys=True)


def _write_csv(path, header_cfg, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {config_header(header_cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this tool (the leading ``#`` config line is skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _load_pair_manifest(path, split: str | None, limit: int | None = None):
    entries = data.read_manifest(path)
    if split:
        entries = [e for e in entries if e.split == split]
    if limit is not None:
        entries = entries[:limit]
    base = Path(path).parent
    return [data.read_pair(base / e.shape) for e in entries]


def cmd_gen_data(cfg: GenDataConfig) -> int:
    if cfg.count < 0:
        raise ConfigError("count must be >= 0")
    entries = data.read_manifest(cfg.shapes) if cfg.shapes else data.synthetic_manifest(cfg.count, cfg.seed, cfg.test_fraction)
    train_e, test_e = data.protocol_split(entries, cfg.protocol)
    pair_cfg = data.pair_config_for(cfg.protocol, crop=cfg.crop, crop_size=cfg.crop_size, crop_mode=cfg.crop_mode)
    out = Path(cfg.out_dir)
    listing = []
    for split, split_entries, seed_offset in (("train", train_e, 0), ("test", test_e, 1)):
        (out / split).mkdir(parents=True, exist_ok=True)
        pairs = data.generate_pairs(split_entries, cfg.seed * 2 + seed_offset, pair_cfg, cfg.n_points)
        for i, (entry, pair) in enumerate(zip(split_entries, pairs)):
            pair.provenance["protocol"] = cfg.protocol
            rel = f"{split}/pair_{i:05d}.txt"
            data.write_pair(out / rel, pair)
            listing.append(data.ManifestEntry(rel, split, entry.category))
    out.mkdir(parents=True, exist_ok=True)
    data.write_manifest(out / "manifest.tsv", listing, header=config_header(cfg))
    print(f"wrote {len(train_e)} train and {len(test_e)} test pairs ({cfg.protocol}) to {out}")
    return 0


def cmd_train(cfg: TrainRunConfig) -> int:
    pairs = _load_pair_manifest(cfg.data, "train", cfg.limit)
    if not pairs:
        raise TrainingError(f"no training pairs in {cfg.data}")
    extractor = make_extractor(cfg.extractor)
    model_cfg = IdamConfig(
        feature_dim=extractor.dim, n_iter=cfg.n_iter, match_radius=cfg.match_radius,
        keep_ratio=cfg.keep_ratio, hybrid=cfg.hybrid, feature_scale=cfg.feature_scale,
    )
    if cfg.resume:
        model = IdamModel.load(cfg.resume)
        if model.config.feature_dim != extractor.dim:
            raise ArchitectureMismatchError(f"checkpoint expects {model.config.feature_dim}-d features, extractor gives {extractor.dim}")
    else:
        model = IdamModel.init(model_cfg, seed=cfg.seed)
    tcfg = TrainConfig(
        epochs=cfg.epochs, lr=cfg.lr, lr_decay_epoch=cfg.lr_decay_epoch, lr_decay=cfg.lr_decay,
        weight_decay=cfg.weight_decay, seed=cfg.seed,
    )
    model, rows = train(prepare_pairs(pairs, extractor), None, model, tcfg)
    model.save(cfg.checkpoint)
    _write_csv(cfg.log_csv, cfg, TRAIN_COLUMNS, [[r[c] for c in TRAIN_COLUMNS] for r in rows])
    print(f"trained {len(rows)} epoch(s) on {len(pairs)} pairs -> {cfg.checkpoint}")
    return 0


def _model_for(cfg, extractor) -> IdamModel:
    model = IdamModel.load(cfg.checkpoint)
    if model.config.feature_dim != extractor.dim:
        raise ArchitectureMismatchError(
            f"checkpoint expects {model.config.feature_dim}-d features, extractor {extractor.name!r} gives {extractor.dim}"
        )
    changes = {k: getattr(cfg, k) for k in ("n_iter", "hybrid") if getattr(cfg, k) is not None}
    return model.with_config(**changes) if changes else model


def cmd_register(cfg: RegisterConfig, src_path: str, tgt_path: str) -> int:
    extractor = make_extractor(cfg.extractor)
    model = _model_for(cfg, extractor)
    src, tgt = data.read_xyz(src_path), data.read_xyz(tgt_path)
    res = register(src, tgt, extract(extractor, src), extract(extractor, tgt), model)
    print(" ".join(f"{x:.9g}" for x in res.transform.to_row12()))
    if cfg.dump:
        v = res.validity[-1]
        rows = [["source", int(i), s, vi] for i, s, vi in zip(res.src_kept, res.src_significance, v)]
        rows += [["target", int(i), s, ""] for i, s in zip(res.tgt_kept, res.tgt_significance)]
        _write_csv(cfg.dump, cfg, ["cloud", "point_index", "significance", "validity"], rows)
    return 0


def cmd_benchmark(cfg: BenchmarkConfig) -> int:
    unknown = sorted(set(cfg.methods) - set(METHODS))
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
    pairs = _load_pair_manifest(cfg.data, cfg.split, cfg.limit)
    if not pairs:
        raise ValueError(f"no {cfg.split!r} pairs in {cfg.data}")
    methods = list(cfg.methods) + (["oracle"] if cfg.oracle and "oracle" not in cfg.methods else [])
    extractor = make_extractor(cfg.extractor) if "idam" in methods else None
    model = _model_for(cfg, extractor) if "idam" in methods else None
    icp_cfg = IcpConfig(max_iterations=cfg.icp_max_iterations, tol=cfg.icp_tol, trim=cfg.icp_trim)

    def run(method, pair) -> RigidTransform:
        if method == "idam":
            return register(pair.source, pair.target, extract(extractor, pair.source), extract(extractor, pair.target), model).transform
        if method == "icp":
            return icp_register(pair.source, pair.target, icp_cfg).transform
        return pair.gt

    gts = [p.gt for p in pairs]
    rows, dump = [], []
    for method in methods:
        preds = []
        t0 = time.perf_counter()
        for pair in pairs:
            preds.append(run(method, pair))
        per_frame = (time.perf_counter() - t0) / len(pairs)
        m = compute_metrics(preds, gts)
        rows.append([method, m.rmse_rot_deg, m.mae_rot_deg, m.rmse_trans, m.mae_trans, per_frame])
        dump += [[method, k, *pred.to_row12(), *gt.to_row12()] for k, (pred, gt) in enumerate(zip(preds, gts))]
        print(f"{method:>7}: MAE(R)={m.mae_rot_deg:.3f} deg  RMSE(R)={m.rmse_rot_deg:.3f} deg  "
              f"MAE(t)={m.mae_trans:.4f}  {per_frame:.4f} s/frame")
    _write_csv(cfg.output, cfg, BENCH_COLUMNS, rows)
    if cfg.transforms_out:
        cols = ["method", "pair"] + [f"pred_{i}" for i in range(12)] + [f"gt_{i}" for i in range(12)]
        _write_csv(cfg.transforms_out, cfg, cols, dump)
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idam", description="Iterative distance-aware point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (per-epoch losses)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-data", "generate registration pairs and a manifest"),
        ("train", "train a model on the train split of a pair manifest"),
        ("register", "register two XYZ clouds and print R (row-major) then t"),
        ("benchmark", "evaluate methods on the test split and write a metrics CSV"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if name == "register":
            sp.add_argument("source", nargs="?", help="source cloud (XYZ text)")
            sp.add_argument("target", nargs="?", help="target cloud (XYZ text)")
    st = sub.add_parser("selftest", help="run the built-in property checks")
    st.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_selftest

            return run_selftest(args.seed)
        cfg = build_config(CONFIGS[args.command], args.config, args.set)
        if args.print_config:
            print(json.dumps(asdict(cfg), indent=2, sort_keys=True))
            return 0
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "register":
            if not (args.source and args.target):
                raise ConfigError("register needs SOURCE and TARGET paths")
            return cmd_register(cfg, args.source, args.target)
        return cmd_benchmark(cfg)
    except (ConfigError, CheckpointError, TrainingError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
