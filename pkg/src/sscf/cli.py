"""``sscf`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint, energy, plotting
from .cfc import attended_pool, temporal_mean
from .config import ConfigValidationError, RunConfig
from .fewshot import data as fsdata
from .fewshot.data import Dataset, NoiseSpec, SplitSpec
from .fewshot.episodes import sample_episode
from .fewshot.training import evaluate, model_input, train
from .model import SSCFNet
from .tensor import no_grad

logger = logging.getLogger("sscf")

SWEEP_PARAMETERS = ("lambda", "noise", "timesteps")


class CliError(RuntimeError):
    pass


# -- shared plumbing ---------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = [kv for group in (getattr(args, "set", None) or []) for kv in group]
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def load_data(cfg: RunConfig) -> tuple[Dataset, SplitSpec]:
    if cfg.data_root:
        if cfg.data_kind == "events":
            ds = fsdata.load_event_dataset(cfg.data_root)
        else:
            ds = fsdata.load_image_dataset(cfg.data_root, cfg.resolution)
    else:
        ds = fsdata.make_synthetic_glyphs(
            cfg.synth_classes, cfg.synth_per_class, cfg.resolution, np.random.default_rng(cfg.synth_seed)
        )
    if cfg.split_file:
        split = SplitSpec.load(cfg.split_file)
    else:
        split = SplitSpec.default(ds, cfg.n_train_classes, cfg.n_val_classes)
    return ds, split


def build_model(cfg: RunConfig, ds: Dataset, split: SplitSpec, seed: int | None = None) -> SSCFNet:
    in_channels = ds.items.shape[2] if ds.is_events else ds.items.shape[1]
    mcfg = cfg.model_config(in_channels, len(split.train))
    if ds.is_events:
        mcfg.backbone.timesteps = ds.items.shape[1]
        mcfg.backbone.input_size = ds.items.shape[-1]
    return SSCFNet(mcfg, np.random.default_rng(cfg.seed if seed is None else seed))


def load_model(cfg: RunConfig, ds: Dataset, split: SplitSpec, path) -> SSCFNet:
    model = build_model(cfg, ds, split)
    try:
        model.load_state_dict(checkpoint.load(path))
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {path} does not fit the configured model: {exc}") from exc
    return model


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def default_checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(args.out) / "model.ckpt"


def derived_seed(parameter: str, value, base: int) -> int:
    digest = hashlib.sha256(f"{parameter}:{value!r}:{base}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# -- commands ----------------------------------------------------------------------

def cmd_make_synthetic(args) -> dict:
    if args.resolution < 16:
        raise CliError(f"resolution must be >= 16, got {args.resolution}")
    ds = fsdata.make_synthetic_glyphs(
        args.classes, args.per_class, args.resolution, np.random.default_rng(args.seed)
    )
    root = out_dir(args)
    files = fsdata.save_image_dataset(ds, root)
    return {"out": str(root), "classes": ds.num_classes, "files": len(files)}


def run_training(cfg: RunConfig, dest: Path, ds=None, split=None) -> tuple[SSCFNet, dict]:
    """Train per ``cfg`` and write checkpoint, metrics, timings and the run record."""
    if ds is None:
        ds, split = load_data(cfg)
    dest.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, ds, split)
    started = datetime.now(timezone.utc).isoformat()
    metrics_path = dest / "metrics.jsonl"
    with open(metrics_path, "w") as mf, open(dest / "timing.jsonl", "w") as tf:
        records = train(
            model, ds, split.ids(ds, "train"), cfg.train_config(), mf, tf, log_every=cfg.log_every
        )
    weights_hash = checkpoint.save(dest / "model.ckpt", model.state_dict())
    record = {
        "config": cfg.to_dict(),
        "weights_sha256": weights_hash,
        "checkpoint": str(dest / "model.ckpt"),
        "metrics": str(metrics_path),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    (dest / "run.json").write_text(json.dumps(record, indent=2))
    if records:
        plotting.training_curve(records, dest / "training_curve.png")
    return model, record


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    _, record = run_training(cfg, out_dir(args))
    return record


def cmd_eval(args) -> dict:
    cfg = resolve_config(args)
    if args.episodes is not None:
        cfg.eval_episodes = args.episodes
    ds, split = load_data(cfg)
    model = load_model(cfg, ds, split, default_checkpoint(args))
    res = evaluate(
        model, ds, split.ids(ds, "test"), cfg.eval_episodes, cfg.n_way, cfg.k_shot, cfg.q_query,
        seed=cfg.eval_seed,
        noise=NoiseSpec(cfg.noise_rate, cfg.eval_seed) if cfg.noise_rate else None,
        noise_queries_only=cfg.noise_queries_only,
    )
    result = {
        "accuracy": res.mean,
        "ci95": res.ci95,
        "display": str(res),
        "episodes": cfg.eval_episodes,
        "n_way": cfg.n_way,
        "k_shot": cfg.k_shot,
        "noise_rate": cfg.noise_rate,
    }
    (out_dir(args) / "eval.json").write_text(json.dumps(result, indent=2))
    return result


def cmd_profile_energy(args) -> dict:
    cfg = resolve_config(args)
    ds, split = load_data(cfg)
    model = load_model(cfg, ds, split, default_checkpoint(args))
    test = split.ids(ds, "test")
    seeds = np.random.SeedSequence(cfg.eval_seed).spawn(cfg.probe_episodes)
    reports = []
    for s in seeds:
        ep = sample_episode(ds, test, cfg.n_way, cfg.k_shot, cfg.q_query, np.random.default_rng(s))
        reports.append(
            energy.energy_report(
                model, model_input(ep.support), ep.support_labels, model_input(ep.query), ep.way,
                ann_flops=args.ann_flops,
            )
        )
    report = energy.average_reports(reports)
    if args.report_timesteps:
        report = report.with_timesteps(args.report_timesteps)
    dest = out_dir(args)
    (dest / "energy.json").write_text(report.to_json())
    (dest / "energy.txt").write_text(report.table() + "\n")
    plotting.energy_bars(report, dest / "energy.png")
    print(report.table(), file=sys.stderr)
    return report.to_dict()


def export_embeddings(model: SSCFNet, ds: Dataset, classes, path: Path, batch: int = 20) -> int:
    """One attended embedding per item, each item attending with itself."""
    idx = np.flatnonzero(np.isin(ds.labels, classes))
    model.eval()
    rows = []
    with no_grad():
        for b0 in range(0, len(idx), batch):
            chunk = idx[b0:b0 + batch]
            fm = temporal_mean(model.features(model_input(ds.items[chunk])))
            for j, item in enumerate(chunk):
                f = fm[j:j + 1]
                att = model.cfc(f, f)
                emb = attended_pool(f.reshape((1,) + f.shape), att.a_q).data[0, 0]
                rows.append([int(ds.labels[item]), ds.class_names[ds.labels[item]], *emb.tolist()])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name"] + [f"e{i}" for i in range(len(rows[0]) - 2)])
        w.writerows(rows)
    return len(rows)


def export_raster(model: SSCFNet, items: np.ndarray, dest: Path) -> dict:
    """Spike counts per LIF layer and time step, plus channel-mean maps as PGM grids."""
    model.eval()
    probe = model.attach_spike_probe()
    try:
        with no_grad():
            model.features(model_input(items))
    finally:
        model.detach_spike_probe()
    counts: dict[str, np.ndarray] = {}
    pgm_files = []
    with open(dest / "raster.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "t", "spike_count", "firing_rate"])
        for name, spikes in probe:
            T = spikes.shape[0]
            counts[name] = spikes.reshape(T, -1).sum(axis=1)
            for t in range(T):
                w.writerow([name, t, int(counts[name][t]), float(spikes[t].mean())])
                maps = spikes[t].mean(axis=1)  # [B, H, W]
                pgm = dest / f"raster_{name}_t{t}.pgm"
                fsdata.write_pgm(pgm, _tile(maps))
                pgm_files.append(str(pgm))
    plotting.raster_plot(counts, dest / "raster.png")
    return {"layers": list(counts), "pgm_files": len(pgm_files), "totals": {k: v.tolist() for k, v in counts.items()}}


def _tile(maps: np.ndarray) -> np.ndarray:
    n, h, w = maps.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i, m in enumerate(maps):
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = m
    return grid


def cmd_export(args) -> dict:
    cfg = resolve_config(args)
    ds, split = load_data(cfg)
    model = load_model(cfg, ds, split, default_checkpoint(args))
    dest = out_dir(args)
    test = split.ids(ds, "test")
    if args.what == "embeddings":
        n = export_embeddings(model, ds, test, dest / "embeddings.csv")
        return {"embeddings": str(dest / "embeddings.csv"), "rows": n}
    by_class = ds.indices_by_class()
    picks = np.array([by_class[int(c)][0] for c in test[: args.items]])
    return export_raster(model, ds.items[picks], dest)


def _parse_values(parameter: str, raw: list[str]) -> list:
    if not raw:
        raise CliError("sweep needs at least one value")
    try:
        if parameter == "timesteps":
            return [int(v) for v in raw]
        return [float(v) for v in raw]
    except ValueError as exc:
        raise CliError(f"bad sweep value: {exc}") from exc


def run_sweep(cfg: RunConfig, parameter: str, values: list, dest: Path, seeds: int = 1) -> list[dict]:
    """Train and evaluate once per (value, seed family); the noise sweep shares one model."""
    if parameter not in SWEEP_PARAMETERS:
        raise CliError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    if not values:
        raise CliError("sweep needs at least one value")
    ds, split = load_data(cfg)
    test = split.ids(ds, "test")
    rows = []
    for family in range(seeds):
        base = cfg.seed + family
        shared = None
        for value in values:
            run_cfg = RunConfig.from_dict(cfg.to_dict())
            if parameter == "lambda":
                run_cfg.lam = float(value)
            elif parameter == "timesteps":
                run_cfg.timesteps = int(value)
            if parameter == "noise":
                run_cfg.seed = base
                run_cfg.noise_rate = float(value)
            else:
                run_cfg.seed = derived_seed(parameter, value, base)
            run_cfg.validate()
            run_dir = dest / f"seed{family}" / f"{parameter}_{value}"
            if parameter == "noise" and shared is not None:
                model = shared
            else:
                model, _ = run_training(run_cfg, run_dir, ds, split)
                shared = model
            noise = None
            if parameter == "noise" and value:
                noise = NoiseSpec(float(value), derived_seed(parameter, value, base))
            res = evaluate(
                model, ds, test, cfg.eval_episodes, cfg.n_way, cfg.k_shot, cfg.q_query,
                seed=cfg.eval_seed + family, noise=noise, noise_queries_only=cfg.noise_queries_only,
            )
            rows.append(
                {"parameter": parameter, "value": value, "seed_family": family,
                 "train_seed": run_cfg.seed, "accuracy": res.mean, "ci95": res.ci95}
            )
            logger.info("%s=%s seed family %d: %s", parameter, value, family, res)
    return rows


def cmd_sweep(args) -> dict:
    cfg = resolve_config(args)
    values = _parse_values(args.parameter, args.values)
    dest = out_dir(args)
    rows = run_sweep(cfg, args.parameter, values, dest, args.seeds)
    with open(dest / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = []
    for v in values:
        accs = np.array([r["accuracy"] for r in rows if r["value"] == v])
        ci = 1.96 * accs.std(ddof=1) / np.sqrt(len(accs)) if len(accs) > 1 else \
            next(r["ci95"] for r in rows if r["value"] == v)
        summary.append({"value": v, "accuracy": float(accs.mean()), "ci95": float(ci), "runs": len(accs)})
    result = {"parameter": args.parameter, "rows": rows, "summary": summary}
    (dest / "sweep.json").write_text(json.dumps(result, indent=2))
    plotting.sweep_plot(
        args.parameter, values, [s["accuracy"] for s in summary], [s["ci95"] for s in summary],
        dest / "sweep.png",
    )
    return result


# -- argument parsing ----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, needs_checkpoint: bool = False) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", nargs="+", action="append", metavar="K=V", help="override config keys")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--out", default="runs/latest", help="output directory")
    if needs_checkpoint:
        p.add_argument("--checkpoint", help="weights file (default: OUT/model.ckpt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sscf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic glyph dataset as PGM files")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="episodic training")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-episode accuracy with a 95%% CI")
    _add_common(p, needs_checkpoint=True)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile-energy", help="SOP/MAC energy estimate on probe episodes")
    _add_common(p, needs_checkpoint=True)
    p.add_argument("--ann-flops", type=int, help="FLOPs of a comparison ANN (default: our dense count)")
    p.add_argument("--report-timesteps", type=int, help="re-evaluate the report at this T")
    p.set_defaults(func=cmd_profile_energy)

    p = sub.add_parser("export", help="embeddings CSV or spike rasters")
    _add_common(p, needs_checkpoint=True)
    p.add_argument("what", choices=("embeddings", "spike-raster"))
    p.add_argument("--items", type=int, default=8, help="raster: number of test classes to sample")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="train and evaluate across values of one parameter")
    _add_common(p)
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", nargs="*", default=[])
    p.add_argument("--seeds", type=int, default=1, help="number of seed families")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    t0 = time.perf_counter()
    try:
        result = args.func(args)
    except ConfigValidationError as exc:
        print(json.dumps({"error": "ConfigValidationError", "problems": exc.problems}), file=sys.stderr)
        return 2
    except Exception as exc:  # every failure becomes one machine-readable line
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    emit(result)
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
