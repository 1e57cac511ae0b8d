"""Single entry point wiring all modules into reproducible commands.

Every command writes a manifest next to its primary output recording the
resolved arguments, seeds, input/output hashes, and wall-clock time;
``trajdiff rerun --manifest <path>`` replays the recorded command and
reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Set TRAJDIFF_LOG to error/info/debug to control verbosity.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from trajdiff import __version__
from trajdiff.checkpoint import Checkpoint
from trajdiff.config import RunConfig, config_from_flat, config_to_flat, load_config
from trajdiff.datapipe import (
    LocationCatalog,
    aggregate_locations,
    chunk_sequences,
    detect_staypoints,
    read_gnss_csv,
    synth_dataset,
)
from trajdiff.diffusion import autoregressive_generate_many, sample_many
from trajdiff.embedding import (
    read_trajectories_jsonl,
    validate_trajectory,
    write_trajectories_jsonl,
)
from trajdiff.errors import DataError, NumericalError
from trajdiff.metrics import corpus_stats, evaluate, freedman_diaconis_bins, shared_histogram
from trajdiff.baselines import fit_baseline, simulate_baseline
from trajdiff.rng import jax_key, substream
from trajdiff.trainer import ablate, default_ablation_grid, train
from trajdiff.utils import sha256_file, write_text_atomic

logger = logging.getLogger("trajdiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _setup_logging() -> None:
    level = os.environ.get("TRAJDIFF_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise DataError(f"TRAJDIFF_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(args: dict) -> RunConfig:
    cfg = load_config(args["config"]) if args.get("config") else RunConfig()
    if args.get("rng_seed") is not None:
        cfg.train.rng_seed = int(args["rng_seed"])
    return cfg


def _load_dataset(path: str) -> tuple[np.ndarray, list[str]]:
    trajectories, users = read_trajectories_jsonl(path)
    if not trajectories:
        raise DataError(f"no trajectories in {path}")
    lengths = {t.shape[0] for t in trajectories}
    if len(lengths) != 1:
        raise DataError(f"trajectories in {path} have mixed lengths: {sorted(lengths)}")
    return np.stack(trajectories), users


# ---------------------------------------------------------------------------
# command bodies: take resolved args, return (inputs, outputs, seeds)


def cmd_train(args: dict):
    cfg = _load_run_config(args)
    data, _ = _load_dataset(args["data"])
    inputs = [args["data"]]
    if args.get("config"):
        inputs.append(args["config"])
    n_locations = None
    if args.get("catalog"):
        catalog = LocationCatalog.from_csv(args["catalog"])
        n_locations = len(catalog)
        inputs.append(args["catalog"])
        validate_trajectory(data.ravel(), n_locations)
    resume = None
    if args.get("resume"):
        resume = Checkpoint.load(args["resume"])
        inputs.append(args["resume"])
    sched = cfg.schedule.build()
    result = train(
        data,
        cfg.train,
        cfg.diffusion,
        sched,
        cfg.model,
        n_locations=n_locations,
        resume_from=resume,
        stop_at_step=args.get("stop_at"),
        log_fn=lambda step, loss, lr, val: logger.info(
            "step %d loss %.6f lr %.2e val %s", step, loss, lr, val
        ),
    )
    out = args["out"]
    result.checkpoint.save(out)
    result.last.save(out + ".last")
    log_lines = ["step,loss,lr,val_objective"]
    for step, loss, lr, val in result.history:
        log_lines.append(f"{step},{loss!r},{lr!r},{val!r}" if val != "" else f"{step},{loss!r},{lr!r},")
    write_text_atomic(out + ".log.csv", "\n".join(log_lines) + "\n")
    return inputs, [out, out + ".last", out + ".log.csv"], {"rng_seed": cfg.train.rng_seed}


def cmd_sample(args: dict):
    ckpt = Checkpoint.load(args["ckpt"])
    run_cfg = config_from_flat(ckpt.config)
    diff_cfg = run_cfg.diffusion
    if args.get("guidance_w") is not None:
        diff_cfg = dataclasses.replace(diff_cfg, guidance_w=float(args["guidance_w"]))
    net_cfg = run_cfg.model
    sched = ckpt.schedule
    N = run_cfg.data.seq_len
    D = run_cfg.data.n_locations
    seed = int(args.get("rng_seed") or 0)
    key = jax_key(seed, "sample")
    params = ckpt.params
    inputs = [args["ckpt"]]

    if args.get("unconditional"):
        count = int(args.get("count") or 1)
        masks = np.zeros((count, N), dtype=np.int64)
        tokens = sample_many(params, None, masks, diff_cfg, key, sched, net_cfg)
    else:
        if not args.get("seed_file"):
            raise DataError("conditional sampling needs --seed-file (or pass --unconditional)")
        seeds, _ = read_trajectories_jsonl(args["seed_file"])
        inputs.append(args["seed_file"])
        if args.get("count"):
            if int(args["count"]) > len(seeds):
                raise DataError(f"--count {args['count']} exceeds {len(seeds)} seeds")
            seeds = seeds[: int(args["count"])]
        lengths = {s.shape[0] for s in seeds}
        if len(lengths) != 1:
            raise DataError(f"seed trajectories have mixed lengths: {sorted(lengths)}")
        L = lengths.pop()
        if D is not None:
            for s in seeds:
                validate_trajectory(s, D)
        chunks = int(args.get("chunks") or 0)
        stacked = np.stack(seeds)
        if chunks > 0:
            if L != N // 2:
                raise DataError(f"autoregressive mode needs seeds of length N/2 = {N // 2}, got {L}")
            tokens = autoregressive_generate_many(params, stacked, chunks, diff_cfg, key, sched, net_cfg)
        else:
            if not 0 < L < N:
                raise DataError(f"seed length {L} must be in (0, {N}) for one infilling round")
            masks = np.zeros((len(seeds), N), dtype=np.int64)
            masks[:, :L] = 1
            full = np.concatenate([stacked, np.zeros((len(seeds), N - L), dtype=np.int64)], axis=1)
            tokens = sample_many(params, full, masks, diff_cfg, key, sched, net_cfg)

    out = args["out"]
    write_trajectories_jsonl(out, list(tokens))
    return inputs, [out], {"rng_seed": seed}


def cmd_evaluate(args: dict):
    generated, _ = _load_dataset(args["generated"])
    reference, _ = _load_dataset(args["reference"])
    inputs = [args["generated"], args["reference"]]
    coords = None
    if args.get("catalog"):
        coords = LocationCatalog.from_csv(args["catalog"]).coords
        inputs.append(args["catalog"])
    report = evaluate(list(generated), list(reference), coords)
    out = args["out"]
    write_text_atomic(out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs = [out]

    # Histogram CSVs share the bins used for the divergence scores.
    gen_stats = corpus_stats(list(generated), coords)
    ref_stats = corpus_stats(list(reference), coords)
    names = ["entropy", "visit_counts"] + (["travel_distance"] if coords is not None else [])
    for idx, name in enumerate(names):
        a, b = gen_stats[idx], ref_stats[idx]
        edges, p, q = shared_histogram(a, b, freedman_diaconis_bins(b))
        hist_path = f"{out}.{name}_hist.csv"
        lines = ["bin_left,bin_right,generated,reference"]
        for i in range(p.size):
            lines.append(
                f"{float(edges[i])!r},{float(edges[i + 1])!r},{float(p[i])!r},{float(q[i])!r}"
            )
        write_text_atomic(hist_path, "\n".join(lines) + "\n")
        outputs.append(hist_path)
    return inputs, outputs, {}


def cmd_ablate(args: dict):
    data, _ = _load_dataset(args["data"])
    inputs = [args["data"]]
    base = _load_run_config(args)
    if args.get("config"):
        inputs.append(args["config"])
    grid = None
    if args.get("grid_json"):
        grid = json.loads(Path(args["grid_json"]).read_text())
        inputs.append(args["grid_json"])
    rows = ablate(data, grid=grid, base=base, steps=args.get("steps"))
    header = ["embed_dim", "parameterization", "self_conditioning", "schedule", "time_dim", "objective", "rel_objective"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header))
    out = args["out"]
    write_text_atomic(out, "\n".join(lines) + "\n")
    return inputs, [out], {"rng_seed": base.train.rng_seed}


def cmd_baseline(args: dict):
    observations, users = _load_dataset(args["fit"])
    inputs = [args["fit"]]
    coords = None
    n_locations = None
    if args.get("catalog"):
        catalog = LocationCatalog.from_csv(args["catalog"])
        coords = catalog.coords
        n_locations = len(catalog)
        inputs.append(args["catalog"])
    kind = args["kind"]
    params = fit_baseline(list(observations), kind, n_locations=n_locations, users=users)
    if args.get("rho") is not None:
        params.rho = float(args["rho"])
    if args.get("gamma") is not None:
        params.gamma = float(args["gamma"])
    rng = substream(int(args.get("rng_seed") or 0), f"baseline:{kind}")
    sequences = simulate_baseline(params, int(args["count"]), int(args["len"]), rng, coords)
    out = args["out"]
    write_trajectories_jsonl(out, sequences, [f"{kind}_{i}" for i in range(len(sequences))])
    return inputs, [out], {"rng_seed": int(args.get("rng_seed") or 0)}


def cmd_synth_data(args: dict):
    out_dir = Path(args["out_dir"])
    seed = int(args.get("rng_seed") or 0)
    catalog, trajectories, users = synth_dataset(
        seed=seed,
        D=int(args["locations"]),
        n_users=int(args["users"]),
        len_per_user=int(args["len_per_user"]),
        geo_extent_km=float(args.get("extent_km") or 30.0),
    )
    chunk_len = int(args.get("chunk_len") or 32)
    chunks, chunk_users = [], []
    for user, seq in zip(users, trajectories):
        for k, chunk in enumerate(chunk_sequences(seq, chunk_len)):
            chunks.append(chunk)
            chunk_users.append(f"{user}#{k}")
    if not chunks:
        raise DataError(
            f"len_per_user {args['len_per_user']} too short for chunk length {chunk_len}"
        )
    catalog_path = str(out_dir / "catalog.csv")
    traj_path = str(out_dir / "trajectories.jsonl")
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog.to_csv(catalog_path)
    write_trajectories_jsonl(traj_path, chunks, chunk_users)
    return [], [catalog_path, traj_path], {"rng_seed": seed}


def cmd_preprocess(args: dict):
    per_user_points = read_gnss_csv(args["gnss"])
    radius = float(args.get("radius_m") or 100.0)
    min_dwell = float(args.get("min_dwell_s") or 300.0)
    chunk_len = int(args.get("chunk_len") or 32)
    staypoints = {
        user: detect_staypoints(points, radius, min_dwell)
        for user, points in per_user_points.items()
    }
    catalog, sequences = aggregate_locations(staypoints, radius)
    chunks, chunk_users = [], []
    for user in sorted(sequences):
        for k, chunk in enumerate(chunk_sequences(sequences[user], chunk_len)):
            chunks.append(chunk)
            chunk_users.append(f"{user}#{k}")
    out_dir = Path(args["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog_path = str(out_dir / "catalog.csv")
    traj_path = str(out_dir / "trajectories.jsonl")
    catalog.to_csv(catalog_path)
    write_trajectories_jsonl(traj_path, chunks, chunk_users)
    return [args["gnss"]], [catalog_path, traj_path], {}


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "synth-data": cmd_synth_data,
    "preprocess": cmd_preprocess,
}


def _manifest_path(name: str, args: dict) -> str:
    if "out" in args and args["out"]:
        return args["out"] + ".manifest.json"
    return str(Path(args["out_dir"]) / "manifest.json")


def _execute(name: str, args: dict) -> str:
    """Run a command body, then write its manifest. Returns the manifest path."""
    started = time.time()
    inputs, outputs, seeds = COMMANDS[name](args)
    manifest = {
        "command": name,
        "args": args,
        "rng_seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": time.time() - started,
        "trajdiff_version": __version__,
    }
    path = _manifest_path(name, args)
    write_text_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("%s done in %.1fs; manifest at %s", name, manifest["wall_clock_s"], path)
    return path


def _dispatch(name: str, args: dict) -> None:
    try:
        _execute(name, args)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except NumericalError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


@click.group()
def main():
    """Categorical diffusion models for synthetic location trajectories."""
    _setup_logging()


@main.command("train")
@click.option("--config", type=str, default=None, help="Flat YAML config file.")
@click.option("--data", type=str, required=True, help="Training trajectories (JSONL).")
@click.option("--out", type=str, required=True, help="Checkpoint output path.")
@click.option("--catalog", type=str, default=None, help="Location catalog CSV (fixes D).")
@click.option("--resume", type=str, default=None, help="Checkpoint to resume from.")
@click.option("--stop-at", type=int, default=None, help="Pause after this step (resumable).")
@click.option("--rng-seed", type=int, default=None, help="Overrides train.rng_seed.")
def train_cmd(**args):
    """Train a model and write best/last checkpoints plus a CSV log."""
    _dispatch("train", args)


@main.command("sample")
@click.option("--ckpt", type=str, required=True)
@click.option("--count", type=int, default=None, help="How many trajectories to emit.")
@click.option("--seed-file", type=str, default=None, help="JSONL seed prefixes.")
@click.option("--unconditional", is_flag=True, default=False)
@click.option("--chunks", type=int, default=0, help="Autoregressive rounds (seeds of length N/2).")
@click.option("--guidance-w", type=float, default=None, help="Classifier-free guidance strength.")
@click.option("--rng-seed", type=int, default=0)
@click.option("--out", type=str, required=True)
def sample_cmd(**args):
    """Generate trajectories from a trained checkpoint."""
    _dispatch("sample", args)


@main.command("evaluate")
@click.option("--generated", type=str, required=True)
@click.option("--reference", type=str, required=True)
@click.option("--catalog", type=str, default=None)
@click.option("--out", type=str, required=True, help="Report JSON path.")
def evaluate_cmd(**args):
    """Compare generated vs reference corpora on the evaluation statistics."""
    _dispatch("evaluate", args)


@main.command("ablate")
@click.option("--data", type=str, required=True)
@click.option("--config", type=str, default=None)
@click.option("--steps", type=int, default=None, help="Training steps per grid cell.")
@click.option("--grid-json", type=str, default=None, help="Custom grid (JSON list of cells).")
@click.option("--rng-seed", type=int, default=None)
@click.option("--out", type=str, required=True, help="Results CSV path.")
def ablate_cmd(**args):
    """Run the ablation grid and emit relative objectives (best cell = 1.0)."""
    _dispatch("ablate", args)


@main.command("baseline")
@click.option("--kind", type=click.Choice(["epr", "depr", "dtepr", "ipt"]), required=True)
@click.option("--fit", type=str, required=True, help="Observation trajectories (JSONL).")
@click.option("--count", type=int, required=True)
@click.option("--len", type=int, required=True)
@click.option("--catalog", type=str, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--rng-seed", type=int, default=0)
@click.option("--out", type=str, required=True)
def baseline_cmd(**args):
    """Fit a mechanistic baseline and simulate synthetic trajectories."""
    _dispatch("baseline", args)


@main.command("synth-data")
@click.option("--locations", type=int, required=True)
@click.option("--users", type=int, required=True)
@click.option("--len-per-user", type=int, required=True)
@click.option("--extent-km", type=float, default=30.0)
@click.option("--chunk-len", type=int, default=32)
@click.option("--rng-seed", type=int, default=0)
@click.option("--out-dir", type=str, required=True)
def synth_data_cmd(**args):
    """Generate a synthetic catalog and trajectory corpus."""
    _dispatch("synth-data", args)


@main.command("preprocess")
@click.option("--gnss", type=str, required=True, help="CSV with user,timestamp,lat,lon.")
@click.option("--radius-m", type=float, default=100.0)
@click.option("--min-dwell-s", type=float, default=300.0)
@click.option("--chunk-len", type=int, default=32)
@click.option("--out-dir", type=str, required=True)
def preprocess_cmd(**args):
    """Staypoints -> locations -> fixed-length trajectories."""
    _dispatch("preprocess", args)


@main.command("rerun")
@click.option("--manifest", type=str, required=True)
def rerun_cmd(manifest):
    """Replay a recorded command; outputs are reproduced byte-identically."""
    path = Path(manifest)
    if not path.exists():
        click.echo(f"data error: manifest not found: {path}", err=True)
        sys.exit(EXIT_DATA)
    spec = json.loads(path.read_text())
    name = spec.get("command")
    if name not in COMMANDS:
        click.echo(f"data error: manifest names unknown command {name!r}", err=True)
        sys.exit(EXIT_DATA)
    _dispatch(name, spec["args"])


if __name__ == "__main__":
    main()
