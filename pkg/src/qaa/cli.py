"""Command-line entry point: ``qaa <command> --out DIR ...``.

Every command writes ``run_manifest.json`` into its output directory before
any other artifact. Failures print one JSON line ``{"error": code,
"message": text}`` to stderr and exit with status 2 (1 for unexpected
exceptions). ``CQS_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .aggregator import ImageSpec, QaaConfig, QaaParams
from .attention_export import export_attention_maps
from .coding_rate import CodingRateConfig, rate_histogram
from .errors import ConfigError, QaaError
from .experiments import per_domain_recall, prepare, train_on, validation_rates
from .flops import count_flops, profile_csv
from .formats import read_checkpoint, read_descriptors, write_checkpoint, write_descriptors
from .manifests import load_features, read_manifest, write_manifest
from .paradigms import ParadigmKind, SinkhornConfig
from .retrieval import PositiveCriterion, index_from_arrays, recall_at_k
from .synth import (WorldSpec, generate_sequence, generate_world, make_eval_split, make_sequence_split,
                    split_places)
from .trainer import TrainSettings, metrics_csv

log = logging.getLogger("qaa")

CHANNEL_PAIRS = ((64, 128), (64, 64), (32, 128), (64, 32), (16, 128), (64, 16), (8, 128))
NQ_GRID = (16, 32, 64, 128, 256)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(args, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "seed": getattr(args, "seed", None),
        "output_dir": str(out),
        "version": version_string(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def world_from(args, cfg: dict):
    spec = WorldSpec()
    if getattr(args, "world", None):
        spec = WorldSpec.from_dict(load_json(args.world))
    elif "world" in cfg:
        spec = WorldSpec.from_dict(cfg["world"])
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seed=args.seed)
    return generate_world(spec)


def settings_from(args, cfg: dict) -> TrainSettings:
    known = {k: v for k, v in cfg.items() if k not in ("world", "domains", "queries_per_place", "images_per_place")}
    s = TrainSettings.from_dict(known)
    opt = s.optimizer
    if getattr(args, "epochs", None) is not None:
        opt = replace(opt, max_epochs=args.epochs)
    if getattr(args, "lr", None) is not None:
        opt = replace(opt, lr=args.lr)
    s = replace(s, optimizer=opt, seed=args.seed)
    if getattr(args, "paradigm", None):
        s = replace(s, paradigm=ParadigmKind.parse(args.paradigm))
    if getattr(args, "iters_per_epoch", None) is not None:
        s = replace(s, iters_per_epoch=args.iters_per_epoch)
    return s


def _domains(args, cfg, world) -> list:
    if getattr(args, "domains", None):
        ds = [int(d) for d in args.domains.split(",")]
    else:
        ds = cfg.get("domains", list(range(len(world.domains))))
    for d in ds:
        if not 0 <= d < len(world.domains):
            raise ConfigError(f"domain {d} out of range [0, {len(world.domains)})")
    return ds


def _settings_meta(s: TrainSettings, extra=None) -> dict:
    return {"settings": s.to_dict(), **(extra or {})}


def _load_model(path):
    params, meta = read_checkpoint(path)
    s = TrainSettings.from_dict(meta["settings"]) if "settings" in meta else TrainSettings()
    return params, s


def _encode(params, x, settings, workers: int):
    kind = ParadigmKind.parse(settings.paradigm)
    if workers <= 1 or len(x) < 2:
        return pipeline.encode(params, x, kind, settings.sinkhorn)
    chunks = np.array_split(x, workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(lambda c: pipeline.encode(params, c, kind, settings.sinkhorn), chunks)
    return np.concatenate(list(parts))


def cmd_gen_world(args, out: Path):
    cfg = load_json(args.config)
    if args.sequence:
        world = generate_sequence(num_frames=args.sequence, seed=args.seed)
    else:
        # either a bare world spec or a training config with a "world" block
        cfg = cfg.get("world", cfg)
        spec = WorldSpec.from_dict(cfg) if cfg else WorldSpec()
        world = generate_world(replace(spec, seed=args.seed))
    (out / "world.json").write_text(world.spec.to_json() + "\n")
    if args.sequence:
        split = make_sequence_split(world)
        write_manifest(split.database, out / "sequence_database.csv")
        write_manifest(split.queries, out / "sequence_queries.csv")
        return
    for d in range(len(world.domains)):
        split = make_eval_split(world, d, split_places(world, d)[1], queries_per_place=args.queries_per_place)
        write_manifest(split.database, out / f"domain{d}_database.csv")
        write_manifest(split.queries, out / f"domain{d}_queries.csv")
        log.info("domain %d: %d database, %d query records", d, len(split.database), len(split.queries))


def cmd_train(args, out: Path):
    cfg = load_json(args.config)
    world = world_from(args, cfg)
    settings = settings_from(args, cfg)
    splits = prepare(world, cfg.get("queries_per_place", 4), cfg.get("images_per_place", 8))
    domains = _domains(args, cfg, world)
    result = train_on(splits, domains, settings)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    write_checkpoint(out / "model.cqsp", result.params,
                     _settings_meta(result.settings, {"domains": domains, "best_epoch": result.best_epoch}))
    recalls = per_domain_recall(result.params, splits, settings)
    lines = ["domain,recall1"] + [f"{world.domains[d].name},{r:.6f}" for d, r in enumerate(recalls)]
    (out / "val_recall.csv").write_text("\n".join(lines) + "\n")


def cmd_encode(args, out: Path):
    params, settings = _load_model(args.checkpoint)
    rows = read_manifest(args.manifest)
    x = load_features(rows, Path(args.manifest).parent)
    desc = _encode(params, x, settings, args.workers)
    write_descriptors(out / "descriptors.cqsa", desc, [r.id for r in rows])


def _descriptors_for(args, which, params, settings):
    manifest = getattr(args, which)
    rows = read_manifest(manifest)
    pre = getattr(args, f"{which}_descriptors")
    if pre:
        desc, ids = read_descriptors(pre)
        if ids != [r.id for r in rows]:
            raise ConfigError(f"{pre}: ids do not match manifest {manifest}")
        return rows, desc.astype(np.float64)
    if params is None:
        raise ConfigError(f"--checkpoint or --{which}-descriptors is required")
    return rows, _encode(params, load_features(rows, Path(manifest).parent), settings, args.workers)


def cmd_eval(args, out: Path):
    params, settings = _load_model(args.checkpoint) if args.checkpoint else (None, TrainSettings())
    db_rows, db = _descriptors_for(args, "database", params, settings)
    q_rows, qs = _descriptors_for(args, "queries", params, settings)
    crit = PositiveCriterion.parse(args.criterion)
    kind = "frame" if crit.kind == "frames" else "xy"
    index = index_from_arrays(db, [r.id for r in db_rows])
    db_pos = [r.position(kind) for r in db_rows]
    q_pos = [r.position(kind) for r in q_rows]
    name = args.dataset or Path(args.queries).stem
    lines = ["dataset,k,criterion,recall,excluded_queries"]
    for k in sorted({int(k) for k in args.k.split(",")}):
        rep = recall_at_k(qs, q_pos, index, db_pos, k, crit)
        lines.append(f"{name},{k},{crit.label()},{rep.recall:.6f},{rep.excluded}")
    (out / "report.csv").write_text("\n".join(lines) + "\n")


def _ablation_runs(grid, base: TrainSettings):
    if grid == "paradigm":
        return [(k.value, replace(base, paradigm=k)) for k in (ParadigmKind.CS, ParadigmKind.OT, ParadigmKind.SOFTMAX)]
    if grid == "nq":
        return [(f"nq{n}", replace(base, model=replace(base.model, n_q=n))) for n in NQ_GRID]
    if grid == "cfcr":
        return [(f"cf{cf}_cr{cr}", replace(base, model=replace(base.model, c_f=cf, c_r=cr)))
                for cf, cr in CHANNEL_PAIRS]
    raise ConfigError(f"unknown ablation grid {grid!r}; use paradigm, nq or cfcr")


def cmd_ablate(args, out: Path):
    cfg = load_json(args.config)
    world = world_from(args, cfg)
    base = settings_from(args, cfg)
    splits = prepare(world, cfg.get("queries_per_place", 4), cfg.get("images_per_place", 8))
    domains = _domains(args, cfg, world)
    names = [d.name for d in world.domains]
    lines = ["run,paradigm,n_q,c_f,c_r,c_d,best_epoch," + ",".join(f"recall1_{n}" for n in names)
             + ",rate_mean,rate_var"]
    for label, s in _ablation_runs(args.grid, base):
        log.info("ablation run %s", label)
        res = train_on(splits, domains, s)
        rec = per_domain_recall(res.params, splits, s)
        hist = validation_rates(res.params, splits, s)
        (out / f"metrics_{label}.csv").write_text(metrics_csv(res.metrics))
        m = s.model
        lines.append(f"{label},{ParadigmKind.parse(s.paradigm).value},{m.n_q},{m.c_f},{m.c_r},{m.c_d},"
                     f"{res.best_epoch}," + ",".join(f"{r:.6f}" for r in rec)
                     + f",{hist.mean:.6f},{hist.variance:.6f}")
    (out / f"ablation_{args.grid}.csv").write_text("\n".join(lines) + "\n")


def cmd_coding_rate(args, out: Path):
    rows = read_manifest(args.manifest)
    x = load_features(rows, Path(args.manifest).parent)
    cfg = CodingRateConfig(args.epsilon)
    rate_lines = ["paradigm,image_id,rate"]
    hist_lines = ["paradigm,left,right,count"]
    summary = ["paradigm,mean,variance,count"]
    for path in args.checkpoint:
        params, s = _load_model(path)
        kind = ParadigmKind.parse(s.paradigm)
        feats = pipeline.query_features(params, x, kind, s.sinkhorn)
        hist = rate_histogram(feats, cfg, args.bins, kind.value)
        rate_lines += [f"{kind.value},{r.id},{v:.9g}" for r, v in zip(rows, hist.rates)]
        hist_lines += hist.to_csv().splitlines()[1:]
        summary.append(f"{kind.value},{hist.mean:.9g},{hist.variance:.9g},{len(hist.rates)}")
    (out / "rates.csv").write_text("\n".join(rate_lines) + "\n")
    (out / "histogram.csv").write_text("\n".join(hist_lines) + "\n")
    (out / "rate_summary.csv").write_text("\n".join(summary) + "\n")


def cmd_flops(args, out: Path):
    img = ImageSpec(args.height, args.width, args.stride)
    profiles = [count_flops(QaaConfig(n_q=n, c_o=args.c_o, c_f=args.c_f, c_r=args.c_r, heads=args.heads), img)
                for n in (int(v) for v in args.nq.split(","))]
    text = profile_csv(profiles)
    (out / "flops.csv").write_text(text)
    sys.stdout.write(text)


def cmd_attn(args, out: Path):
    params, _ = _load_model(args.checkpoint)
    rows = read_manifest(args.manifest)
    if args.ids:
        wanted = set(args.ids.split(","))
        rows = [r for r in rows if r.id in wanted]
    img = ImageSpec(args.height, args.width, args.stride)
    qids = [int(q) for q in args.queries.split(",")]
    x = load_features(rows, Path(args.manifest).parent)
    for r, patches in zip(rows, x):
        export_attention_maps(patches, params, qids, img, out, image_id=r.id)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qaa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, seed_required=False):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--out", required=True, type=Path, help="output directory")
        c.add_argument("--config", type=Path, help="JSON config; flags override its fields")
        c.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        c.add_argument("--workers", type=int, default=1,
                       help="encode threads; results do not depend on it, timings do")
        c.set_defaults(func=func)
        return c

    c = command("gen-world", cmd_gen_world, "generate a synthetic world and evaluation manifests")
    c.add_argument("--queries-per-place", type=int, default=2)
    c.add_argument("--sequence", type=int, default=0, help="route-style world with this many frames")

    def training_flags(c):
        c.add_argument("--world", type=Path, help="world.json from gen-world")
        c.add_argument("--paradigm", choices=[k.value for k in ParadigmKind])
        c.add_argument("--epochs", type=int)
        c.add_argument("--lr", type=float)
        c.add_argument("--iters-per-epoch", type=int)
        c.add_argument("--domains", help="comma-separated training domain ids")

    training_flags(command("train", cmd_train, "train a model", seed_required=True))

    c = command("encode", cmd_encode, "encode a manifest into a descriptor file")
    c.add_argument("--checkpoint", required=True, type=Path)
    c.add_argument("--manifest", required=True, type=Path)

    c = command("eval", cmd_eval, "Recall@K of queries against a database")
    c.add_argument("--checkpoint", type=Path)
    c.add_argument("--database", required=True, type=Path, help="database manifest")
    c.add_argument("--queries", required=True, type=Path, help="query manifest")
    c.add_argument("--database-descriptors", type=Path, help="precomputed CQSA file for the database")
    c.add_argument("--queries-descriptors", type=Path, help="precomputed CQSA file for the queries")
    c.add_argument("--criterion", default="distance:25")
    c.add_argument("--k", default="1,5,10")
    c.add_argument("--dataset", help="dataset label in the report")

    c = command("ablate", cmd_ablate, "train a sweep of configurations", seed_required=True)
    c.add_argument("--grid", required=True, choices=["paradigm", "nq", "cfcr"])
    training_flags(c)

    c = command("coding-rate", cmd_coding_rate, "coding-rate distribution of query features")
    c.add_argument("--checkpoint", required=True, type=Path, action="append")
    c.add_argument("--manifest", required=True, type=Path)
    c.add_argument("--epsilon", type=float, default=0.001)
    c.add_argument("--bins", type=int, default=20)

    c = command("flops", cmd_flops, "analytic FLOP profile over a list of N_q")
    c.add_argument("--nq", default=",".join(str(n) for n in NQ_GRID))
    c.add_argument("--c-o", type=int, default=768)
    c.add_argument("--c-f", type=int, default=64)
    c.add_argument("--c-r", type=int, default=128)
    c.add_argument("--heads", type=int, default=4)
    c.add_argument("--height", type=int, default=322)
    c.add_argument("--width", type=int, default=322)
    c.add_argument("--stride", type=int, default=14)

    c = command("attn", cmd_attn, "export per-query attention grids")
    c.add_argument("--checkpoint", required=True, type=Path)
    c.add_argument("--manifest", required=True, type=Path)
    c.add_argument("--ids", help="comma-separated record ids (default: all)")
    c.add_argument("--queries", default="0", help="comma-separated feature-query ids")
    c.add_argument("--height", type=int, default=98)
    c.add_argument("--width", type=int, default=98)
    c.add_argument("--stride", type=int, default=14)
    return p


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("CQS_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        write_run_manifest(args, args.out)
        args.func(args, args.out)
    except QaaError as exc:
        return _fail(exc.code, str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), 2)
    except (ValueError, IndexError, KeyError) as exc:
        return _fail("invalid_input", str(exc), 2)
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
