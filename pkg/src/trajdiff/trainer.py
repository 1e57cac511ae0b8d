"""Optimization loop, learning-rate schedule, validation, and ablations.

Training minimizes the batch-mean single-t objective with AdamW
(decoupled weight decay, bias correction) under a linear learning-rate
decay. All per-step randomness (batch order, masks, conditioning drop,
noise draws) is derived from the step index and the run seed, so
resuming from a checkpoint reproduces an uninterrupted run bit by bit.

Early stopping: training halts once the validation objective has failed
to improve by 0.1% over five consecutive evaluations (every 200 steps by
default), capped at ``total_steps``. The best-validation parameters are
returned; the last state is kept in the checkpoint as well.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from trajdiff.checkpoint import Checkpoint
from trajdiff.config import (
    DiffusionConfig,
    ModelConfig,
    RunConfig,
    ScheduleConfig,
    TrainConfig,
    config_to_flat,
)
from trajdiff.diffusion import make_training_mask, single_example_loss
from trajdiff.errors import DataError, NumericalError
from trajdiff.rng import jax_key, substream
from trajdiff.schedules import NoiseSchedule
from trajdiff.score_net import init_params, renormalize_embedding

__all__ = [
    "TrainConfig",
    "adamw_step",
    "lr_schedule",
    "train",
    "validate",
    "ablate",
    "default_ablation_grid",
]


def lr_schedule(step, cfg: TrainConfig):
    """Linear decay from lr_start (step 1) to lr_end (step total_steps), then flat.

    The interpolation grid is step - 1 over total_steps - 1, so both
    endpoints are hit exactly.
    """
    if cfg.total_steps == 1:
        return cfg.lr_start
    frac = jnp.minimum((step - 1) / (cfg.total_steps - 1), 1.0)
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)


def adamw_step(params, grads, moments, step, cfg: TrainConfig):
    """One AdamW update; returns (new_params, new_moments).

    Weight decay is decoupled (multiplicative shrink by 1 - lr * wd). If
    the parameter tree contains an ``embedding`` entry its rows are
    re-normalized to unit L2 norm after the update.
    """
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    lr = lr_schedule(step, cfg)
    m = jax.tree.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, moments["m"], grads)
    v = jax.tree.map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, moments["v"], grads)
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step

    def update(p, m_, v_):
        return (1.0 - lr * cfg.weight_decay) * p - lr * (m_ / c1) / (
            jnp.sqrt(v_ / c2) + cfg.adam_eps
        )

    new_params = jax.tree.map(update, params, m, v)
    if isinstance(new_params, dict) and "embedding" in new_params:
        new_params = renormalize_embedding(new_params)
    return new_params, {"m": m, "v": v}


def init_moments(params):
    zeros = lambda p: jnp.zeros_like(p)
    return {"m": jax.tree.map(zeros, params), "v": jax.tree.map(zeros, params)}


class _BatchPlan:
    """Deterministic shuffled batch order, addressable by step index."""

    def __init__(self, seed: int, n: int, batch_size: int):
        self.seed, self.n, self.batch_size = seed, n, batch_size
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[epoch] = substream(self.seed, f"data-epoch:{epoch}").permutation(self.n)
        return self._perms[epoch]

    def batch(self, step: int) -> np.ndarray:
        start = (step - 1) * self.batch_size
        out = []
        while len(out) < self.batch_size:
            epoch, off = divmod(start, self.n)
            take = min(self.batch_size - len(out), self.n - off)
            out.extend(self._perm(epoch)[off : off + take])
            start += take
        return np.asarray(out)


def _as_matrix(dataset) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.int64)
    if data.ndim != 2:
        raise DataError(f"dataset must be a list of equal-length trajectories, got shape {data.shape}")
    return data


def split_dataset(dataset, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/validation split; validation gets ceil(M * val_fraction)."""
    data = _as_matrix(dataset)
    M = data.shape[0]
    if M < 2:
        raise DataError("need at least two trajectories to split off a validation set")
    n_val = max(1, math.ceil(M * val_fraction))
    if n_val >= M:
        n_val = M - 1
    order = substream(seed, "val-split").permutation(M)
    return data[order[n_val:]], data[order[:n_val]]


def _step_masks(seed: int, step: int, batch: int, N: int, diff_cfg: DiffusionConfig) -> np.ndarray:
    """Per-step training masks with the conditioning-drop already applied.

    A dropped example is trained as a fully unconditional one: zero mask,
    nothing given, every row modelled.
    """
    rng = substream(seed, f"mask:{step}")
    masks = np.stack(
        [
            make_training_mask(rng, N, diff_cfg.mask_prefix_frac, diff_cfg.mask_random_frac)
            for _ in range(batch)
        ]
    )
    drop = rng.random(batch) < diff_cfg.p_disc
    masks[drop] = 0
    return masks


def _build_update_fn(sched, net_cfg, diff_cfg, train_cfg, root_key):
    def batch_loss(params, tokens, masks, step):
        keys = jax.random.split(jax.random.fold_in(root_key, step), tokens.shape[0])
        per_example = jax.vmap(
            lambda y, m, k: single_example_loss(params, y, m, k, sched, net_cfg, diff_cfg)
        )(tokens, masks, keys)
        return jnp.mean(per_example)

    def update(params, moments, tokens, masks, step):
        loss, grads = jax.value_and_grad(batch_loss)(params, tokens, masks, step)
        params, moments = adamw_step(params, grads, moments, step, train_cfg)
        return params, moments, loss

    return jax.jit(update)


def validate(params, valset, sched, n_mc: int, net_cfg=None, diff_cfg=None, key=None):
    """Monte-Carlo estimate of the validation objective (lower is better)."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    net_cfg = net_cfg or ModelConfig()
    diff_cfg = diff_cfg or DiffusionConfig()
    if key is None:
        key = jax.random.PRNGKey(0)
    data = _as_matrix(valset)
    M, N = data.shape
    key_ints = np.asarray(key).ravel()  # legacy uint32 key layout
    mask_rng = np.random.default_rng(np.random.SeedSequence([int(x) for x in key_ints]))
    masks = np.stack(
        [
            make_training_mask(mask_rng, N, diff_cfg.mask_prefix_frac, diff_cfg.mask_random_frac)
            for _ in range(M * n_mc)
        ]
    ).reshape(M, n_mc, N)
    tokens = np.repeat(data[:, None, :], n_mc, axis=1)
    keys = jax.random.split(key, M * n_mc).reshape(M, n_mc, -1)

    @jax.jit
    def run(params, tokens, masks, keys):
        fn = lambda y, m, k: single_example_loss(params, y, m, k, sched, net_cfg, diff_cfg)
        return jnp.mean(jax.vmap(jax.vmap(fn))(tokens, masks, keys))

    value = float(run(params, tokens, masks, keys))
    if not np.isfinite(value):
        raise NumericalError(f"validation objective is non-finite: {value}")
    return value


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best-validation state
    last: Checkpoint
    history: list  # (step, loss, lr, val_objective or "")


def train(
    dataset,
    train_cfg: TrainConfig,
    diff_cfg: DiffusionConfig,
    sched: NoiseSchedule,
    net_cfg: ModelConfig | None = None,
    n_locations: int | None = None,
    resume_from: Checkpoint | None = None,
    stop_at_step: int | None = None,
    log_fn=None,
) -> TrainResult:
    """Train to convergence or ``total_steps``; returns best + last checkpoints.

    ``stop_at_step`` interrupts the run early without shortening the
    learning-rate horizon; resuming from the resulting checkpoint with the
    same config reproduces an uninterrupted run bit-exactly.
    """
    data = _as_matrix(dataset)
    M, N = data.shape
    if M * (1 - train_cfg.val_fraction) < 2 * train_cfg.batch_size:
        raise DataError(
            f"dataset too small: {M} trajectories for batch size {train_cfg.batch_size}"
        )
    if n_locations is None:
        n_locations = int(data.max()) + 1
    net_cfg = net_cfg or ModelConfig()
    seed = train_cfg.rng_seed

    train_set, val_set = split_dataset(data, train_cfg.val_fraction, seed)
    plan = _BatchPlan(seed, train_set.shape[0], train_cfg.batch_size)
    root_key = jax_key(seed, "train-noise")
    val_key_root = jax_key(seed, "validation")
    update_fn = _build_update_fn(sched, net_cfg, diff_cfg, train_cfg, root_key)

    snapshot = RunConfig(
        schedule=ScheduleConfig(kind=sched.kind, T=sched.T),
        model=net_cfg,
        diffusion=diff_cfg,
        train=train_cfg,
    )
    snapshot.data.seq_len = N
    snapshot.data.n_locations = n_locations
    flat_cfg = config_to_flat(snapshot)

    if resume_from is not None:
        params = jax.tree.map(jnp.asarray, resume_from.params)
        moments = jax.tree.map(jnp.asarray, resume_from.moments)
        start_step = resume_from.step + 1
        best_val = resume_from.best_val
        best_step = resume_from.best_step
        stale = resume_from.stale_evals
        best_params = resume_from.best_params or resume_from.params
        best_params = jax.tree.map(jnp.asarray, best_params)
    else:
        params = init_params(seed, N, net_cfg.embed_dim, n_locations, net_cfg)
        moments = init_moments(params)
        start_step = 1
        best_val, best_step, stale = float("inf"), -1, 0
        best_params = params

    end_step = train_cfg.total_steps if stop_at_step is None else min(stop_at_step, train_cfg.total_steps)
    history = []
    for step in range(start_step, end_step + 1):
        batch = train_set[plan.batch(step)]
        masks = _step_masks(seed, step, batch.shape[0], N, diff_cfg)
        params, moments, loss = update_fn(params, moments, jnp.asarray(batch), jnp.asarray(masks), step)
        loss = float(loss)
        if not np.isfinite(loss):
            raise NumericalError(f"training loss diverged at step {step}: {loss}")
        lr = float(lr_schedule(step, train_cfg))

        val_obj = ""
        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            val_obj = validate(
                params, val_set, sched, train_cfg.val_mc, net_cfg, diff_cfg,
                key=jax.random.fold_in(val_key_root, step),
            )
            if val_obj < best_val * (1.0 - train_cfg.min_rel_improvement) or best_step < 0:
                best_val, best_step, stale = val_obj, step, 0
                best_params = params
            else:
                stale += 1
        history.append((step, loss, lr, val_obj))
        if log_fn is not None:
            log_fn(step, loss, lr, val_obj)
        if stale >= train_cfg.patience:
            break

    make_ckpt = lambda p: Checkpoint(
        params=jax.tree.map(np.asarray, p),
        moments=jax.tree.map(np.asarray, moments),
        step=history[-1][0] if history else start_step - 1,
        config=flat_cfg,
        schedule=sched,
        best_params=jax.tree.map(np.asarray, best_params),
        best_val=best_val,
        best_step=best_step,
        stale_evals=stale,
    )
    last = make_ckpt(params)
    best = last.replace(params=jax.tree.map(np.asarray, best_params))
    return TrainResult(checkpoint=best, last=last, history=history)


def default_ablation_grid() -> list[dict]:
    """The reported ablation: embedding dim x parameterization x
    self-conditioning, plus one-factor sweeps over the noise schedule and
    the timestep-encoding dimensionality."""
    cells = []
    for P, param, sc in itertools.product([8, 16, 32, 64], ["z0", "eps"], [True, False]):
        cells.append({"embed_dim": P, "parameterization": param, "self_conditioning": sc})
    for kind in ["linear", "sqrt"]:
        cells.append({"schedule": kind})
    for tdim in [64, 128]:
        cells.append({"time_dim": tdim})
    return cells


def ablate(
    dataset,
    grid: list[dict] | None = None,
    base: RunConfig | None = None,
    steps: int | None = None,
) -> list[dict]:
    """Train every grid cell briefly and report validation objectives
    normalized so the best cell is exactly 1.0."""
    grid = grid if grid is not None else default_ablation_grid()
    base = base or RunConfig()
    rows = []
    for cell in grid:
        model = dataclasses.replace(
            base.model,
            embed_dim=cell.get("embed_dim", base.model.embed_dim),
            time_dim=cell.get("time_dim", base.model.time_dim),
        )
        diff = dataclasses.replace(
            base.diffusion,
            parameterization=cell.get("parameterization", base.diffusion.parameterization),
            self_conditioning=cell.get("self_conditioning", base.diffusion.self_conditioning),
        )
        sched_cfg = dataclasses.replace(base.schedule, kind=cell.get("schedule", base.schedule.kind))
        train_cfg = base.train
        if steps is not None:
            train_cfg = dataclasses.replace(train_cfg, total_steps=steps)
        sched = sched_cfg.build()
        result = train(dataset, train_cfg, diff, sched, model)
        row = {
            "embed_dim": model.embed_dim,
            "parameterization": diff.parameterization,
            "self_conditioning": diff.self_conditioning,
            "schedule": sched_cfg.kind,
            "time_dim": model.time_dim,
            "objective": result.checkpoint.best_val,
        }
        rows.append(row)
    best = min(row["objective"] for row in rows)
    for row in rows:
        row["rel_objective"] = row["objective"] / best
    return rows
