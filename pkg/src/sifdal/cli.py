"""``sifdal`` command line: data generation, clustering, training, evaluation, ablation.

Exit status is 0 on success, 1 for usage or validation problems and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import stz
from .clustering import assign_levels, read_height_levels, select_k, write_height_levels
from .errors import ConfigurationError, ContractError, DataError, SifdalError
from .evaluate import evaluate
from .metrics import per_class_csv
from .model import LOCATIONS, META_KEY, ModelConfig
from .synth import SynthConfig, TrainingSet, generate_dataset, read_dataset, write_dataset, write_manifest
from .trainer import TrainConfig, train

log = logging.getLogger("sifdal")

SEED_ENV = "SIFDAL_SEED"
HEIGHT_LEVELS = "height_levels.json"

_MODEL_KEYS = ("width", "fpn_channels", "n_classes", "image_size", "sifd_location", "disentangle_mode",
               "use_inv", "use_rel", "proj_dim")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    data_dir: str
    eval_dir: str | None = None
    out_dir: str | None = None
    seeds: tuple = (18, 19, 20)

    def to_dict(self) -> dict:
        return {**asdict(self.train), **{k: getattr(self.model, k) for k in _MODEL_KEYS},
                "data_dir": self.data_dir, "eval_dir": self.eval_dir, "out_dir": self.out_dir,
                "seeds": list(self.seeds)}


_IO_KEYS = ("data_dir", "eval_dir", "out_dir", "seeds")
CONFIG_KEYS = frozenset(TrainConfig.field_names()) | set(_MODEL_KEYS) | set(_IO_KEYS)


def _typed(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"config key {key!r} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"config key {key!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"config key {key!r} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"config key {key!r} must be a string")
    return value


def parse_run_config(obj: dict, base_dir: Path | None = None, seed_override: int | None = None) -> RunConfig:
    """Validate a config document.  Unknown keys are rejected outright."""
    if not isinstance(obj, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(obj) - CONFIG_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    if "data_dir" not in obj:
        raise ConfigurationError("config needs data_dir")
    base = base_dir or Path(".")

    def resolve(p):
        return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

    data_dir = resolve(obj["data_dir"])
    tdef, mdef = TrainConfig(), ModelConfig()
    tkw = {f.name: _typed(f.name, obj[f.name], getattr(tdef, f.name))
           for f in fields(TrainConfig) if f.name in obj}
    mkw = {k: _typed(k, obj[k], getattr(mdef, k)) for k in _MODEL_KEYS if k in obj}
    if seed_override is not None:
        tkw["seed"] = seed_override
    if "k_levels" not in tkw:
        levels = Path(data_dir) / HEIGHT_LEVELS
        if levels.exists():
            tkw["k_levels"] = int(read_height_levels(levels)["k"])
    if mkw.get("sifd_location", "P3") == "NONE":
        tkw["lambda1"] = tkw["lambda2"] = 0.0
    tcfg = TrainConfig(**tkw)
    mcfg = ModelConfig(k_levels=tcfg.k_levels, **mkw)
    seeds = obj.get("seeds", [18, 19, 20])
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        raise ConfigurationError("seeds must be a non-empty list of integers")
    for key in ("eval_dir", "out_dir"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            raise ConfigurationError(f"config key {key!r} must be a string")
    return RunConfig(tcfg, mcfg, data_dir, resolve(obj.get("eval_dir")), resolve(obj.get("out_dir")), tuple(seeds))


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    return parse_run_config(obj, p.parent, seed_override)


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _seed_override():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _range(text, cast, name):
    try:
        lo, hi = (cast(t) for t in text.split(":"))
    except ValueError:
        raise ConfigurationError(f"{name} must look like LO:HI, got {text!r}") from None
    if lo > hi:
        raise ConfigurationError(f"{name}: {lo} > {hi}")
    return lo, hi


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    lo, hi = _range(args.altitude_range, float, "--altitude-range")
    modes = None
    if args.modes:
        try:
            modes = tuple(float(m) for m in args.modes.split(","))
        except ValueError:
            raise ConfigurationError(f"--modes must be comma-separated numbers, got {args.modes!r}") from None
    if args.count < 1:
        raise ConfigurationError("--count must be positive")
    cfg = SynthConfig(image_size=args.image_size, altitude_range=(lo, hi), modes=modes, seed=args.seed)
    records, images = generate_dataset(args.count, cfg)
    write_dataset(records, args.out, images)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_cluster_heights(args) -> int:
    k_min, k_max = _range(args.k_range, int, "--k-range")
    if k_min < 2:
        raise ConfigurationError("--k-range lower bound must be at least 2")
    records = read_dataset(args.data)
    ids = [r.sample_id for r in records]
    alts = [r.altitude_m for r in records]
    if args.reference:
        ref = read_height_levels(args.reference)
        centroids = ref["centroids"]
        labels = assign_levels(alts, centroids)
        out = {"k": len(centroids), "centroids": centroids, "silhouette": ref["silhouette"],
               "assignment": {s: int(v) for s, v in zip(ids, labels)}}
        (Path(args.data) / HEIGHT_LEVELS).write_text(json.dumps(out, indent=2))
        k = len(centroids)
    else:
        result = select_k(alts, k_min, k_max, args.seed, sample_ids=ids)
        write_height_levels(result, Path(args.data) / HEIGHT_LEVELS)
        labels, centroids, k = result.labels, result.centroids, result.k
    for r, lv in zip(records, labels):
        r.height_level = int(lv)
    write_manifest(records, args.data)
    print(f"k={k} centroids={[round(c, 2) for c in centroids]}")
    return 0


def _load_set(directory) -> tuple[TrainingSet, bytes]:
    manifest = (Path(directory) / "manifest.jsonl").read_bytes()
    return TrainingSet.load(directory), manifest


def run_training(cfg: RunConfig, out_dir, seed_override=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data, manifest = _load_set(cfg.data_dir)
    t1 = time.perf_counter()
    train(data, cfg.train, cfg.model, log_path=out / "metrics.jsonl", checkpoint_path=out / "checkpoint.stz")
    t2 = time.perf_counter()
    run = {"config": cfg.to_dict(), "manifest_hash": git_blob_hash(manifest),
           "timings_s": {"load": t1 - t0, "train": t2 - t1, "total": t2 - t0}}
    if seed_override is not None:
        run["seed_override"] = {"variable": SEED_ENV, "value": seed_override}
    (out / "run.json").write_text(json.dumps(run, indent=2))
    return run


def cmd_train(args) -> int:
    override = _seed_override()
    cfg = load_run_config(args.config, override)
    run = run_training(cfg, args.out, override)
    print(f"trained in {run['timings_s']['train']:.1f}s; checkpoint at {Path(args.out) / 'checkpoint.stz'}")
    return 0


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    tensors = stz.load(path)
    if META_KEY not in tensors:
        raise DataError(f"{path}: checkpoint lacks {META_KEY}")
    cfg = ModelConfig.decode(tensors.pop(META_KEY))
    return cfg, tensors


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    data = TrainingSet.load(args.data)
    n_levels = int(data.levels.max()) + 1 if len(data) else 0
    if cfg.sifd_levels and n_levels > cfg.k_levels:
        raise DataError(f"data has height level {n_levels - 1} but model has {cfg.k_levels} levels")
    report = evaluate(params, cfg, data)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.csv:
        Path(args.csv).write_text(per_class_csv(report))
    print(f"mAP {report.map:.4f}  AP50 {report.ap50:.4f}")
    return 0


def ablation_grid(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    def variant(**kw):
        return ModelConfig(**{**base.to_dict(), **kw})
    return [
        ("baseline", variant(sifd_location="NONE", use_inv=True, use_rel=False)),
        ("P3 inv", variant(sifd_location="P3", use_inv=True, use_rel=False)),
        ("P3 rel", variant(sifd_location="P3", use_inv=False, use_rel=True)),
        ("P3 inv+rel", variant(sifd_location="P3", use_inv=True, use_rel=True)),
        ("P4 inv", variant(sifd_location="P4", use_inv=True, use_rel=False)),
        ("P5 inv", variant(sifd_location="P5", use_inv=True, use_rel=False)),
        ("ALL inv", variant(sifd_location="ALL", use_inv=True, use_rel=False)),
    ]


def run_ablation(cfg: RunConfig, grid=None) -> list[dict]:
    """Mean held-out mAP per grid entry over ``cfg.seeds``."""
    train_set, _ = _load_set(cfg.data_dir)
    test_set = TrainingSet.load(cfg.eval_dir) if cfg.eval_dir else train_set
    rows = []
    for name, mcfg in grid or ablation_grid(cfg.model):
        maps, ap50s = [], []
        for seed in cfg.seeds:
            lam = {"lambda1": 0.0, "lambda2": 0.0} if mcfg.sifd_location == "NONE" else {}
            tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, **lam})
            trainer, _ = train(train_set, tcfg, mcfg)
            rep = evaluate(trainer.params, mcfg, test_set)
            maps.append(rep.map)
            ap50s.append(rep.ap50)
        rows.append({"name": name, "sifd_location": mcfg.sifd_location, "use_inv": mcfg.use_inv,
                     "use_rel": mcfg.use_rel, "map": float(np.mean(maps)), "ap50": float(np.mean(ap50s)),
                     "map_per_seed": maps})
    base = next((r["map"] for r in rows if r["sifd_location"] == "NONE"), None)
    for r in rows:
        r["delta_vs_baseline"] = None if base is None else r["map"] - base
    return rows


def format_table(rows) -> str:
    head = f"{'config':<12} {'loc':<5} {'inv':<4} {'rel':<4} {'mAP':>8} {'AP50':>8} {'d mAP':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        d = "" if r["delta_vs_baseline"] is None else f"{r['delta_vs_baseline']:+.4f}"
        lines.append(f"{r['name']:<12} {r['sifd_location']:<5} {'y' if r['use_inv'] else 'n':<4} "
                     f"{'y' if r['use_rel'] else 'n':<4} {r['map']:>8.4f} {r['ap50']:>8.4f} {d:>8}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, _seed_override())
    rows = run_ablation(cfg)
    print(format_table(rows))
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "ablation.json").write_text(json.dumps(rows, indent=2))
    return 0


# -- argument parsing ------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sifdal", description="Scale-invariant feature disentangling experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=18)
    g.add_argument("--altitude-range", default="5:75", metavar="LO:HI")
    g.add_argument("--modes", default=None, help="comma-separated altitude modes in metres")
    g.add_argument("--image-size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("cluster-heights", help="k-means over altitudes, writes height_levels.json")
    c.add_argument("--data", required=True)
    c.add_argument("--k-range", default="2:10", metavar="LO:HI")
    c.add_argument("--seed", type=int, default=18)
    c.add_argument("--reference", default=None, help="reuse centroids from another height_levels.json")
    c.set_defaults(func=cmd_cluster_heights)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--csv", default=None, help="optional per-class AP table")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help=f"train the location/feature grid over {', '.join(LOCATIONS)}")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DataError, ContractError, ValueError) as exc:
        print(f"sifdal: {exc}", file=sys.stderr)
        return 1
    except (SifdalError, OSError, ArithmeticError) as exc:
        print(f"sifdal: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
