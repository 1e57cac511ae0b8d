"""Training objectives, masking, guidance, and reverse-process sampling.

The single-step training loss (one uniformly drawn t per example) is

    loss = cross_entropy(y0, z0)
         + || EMB(y0) - decode_estimate(z_1) ||^2      (unmasked rows)
         + || target_t - model(z_t, t, .) ||^2         (unmasked rows)
         + alpha_bar_T * || z0 ||^2

where target_t is z0 or eps_t depending on the parameterization, and
z0 ~ N(EMB(y0), beta_1 I). Masked rows are given, not modelled, so they
are excluded from the two score-model residuals; the cross-entropy and
prior terms involve only the embedding table and reduce over all rows.

Conditioning follows the infilling construction: the model sees the
noisy latent with given rows zeroed, the binary mask, and the clean
embedding with generated rows zeroed. Dropping the conditioning (for
classifier-free guidance) zeroes the mask and embedding streams.
"""

from __future__ import annotations

import functools
import math

import jax
import jax.numpy as jnp
import numpy as np

from trajdiff.config import DiffusionConfig, ModelConfig
from trajdiff.embedding import cross_entropy, decode, embed
from trajdiff.errors import DataError, NumericalError
from trajdiff.schedules import NoiseSchedule
from trajdiff.score_net import ScoreInput, forward, make_score_input


def make_training_mask(
    rng: np.random.Generator,
    N: int,
    prefix_frac: float = 0.25,
    random_frac: float = 0.25,
) -> np.ndarray:
    """Prefix mask plus uniform random mask.

    The first floor(N * prefix_frac) positions are masked, then
    floor(N * random_frac) more are drawn uniformly without replacement
    from the remaining positions. With the default fractions half of the
    sequence is given and half is to be generated.
    """
    if N < 4:
        raise ValueError(f"sequence length must be >= 4, got {N}")
    n_prefix = int(N * prefix_frac)
    n_random = int(N * random_frac)
    mask = np.zeros(N, dtype=np.int64)
    mask[:n_prefix] = 1
    if n_random:
        rest = rng.choice(np.arange(n_prefix, N), size=n_random, replace=False)
        mask[rest] = 1
    return mask


def cfg_combine(pred_cond, pred_uncond, w: float):
    """Classifier-free guidance: (1 + w) * conditional - w * unconditional."""
    return (1.0 + w) * jnp.asarray(pred_cond) - w * jnp.asarray(pred_uncond)


def drop_conditioning(inp: ScoreInput) -> ScoreInput:
    """Zero both conditioning streams; the latent streams are untouched."""
    return ScoreInput(
        z_t=inp.z_t,
        z_hat_prev=inp.z_hat_prev,
        mask=jnp.zeros_like(inp.mask),
        emb_cond=jnp.zeros_like(inp.emb_cond),
        t=inp.t,
    )


def _schedule_arrays(sched: NoiseSchedule) -> tuple[jnp.ndarray, jnp.ndarray]:
    return jnp.asarray(sched.beta), jnp.asarray(sched.alpha_bar)


def _zhat0_traced(z_t, eps_hat, ab_t):
    return (z_t - jnp.sqrt(1.0 - ab_t) * eps_hat) / jnp.sqrt(ab_t)


def _predict_zhat0(params, net_cfg, diff_cfg, z_t_chain, z_hat_prev, mask, emb_cond, t, ab_t):
    """One score-model evaluation returning the clean-latent estimate.

    ``z_t_chain`` is the unzeroed latent; masking is applied when the
    input is assembled. For the eps parameterization the model output is
    converted through the marginal inversion, using the same latent the
    noise was applied to.
    """
    if not diff_cfg.self_conditioning:
        z_hat_prev = jnp.zeros_like(z_hat_prev)
    inp = make_score_input(z_t_chain, z_hat_prev, mask, emb_cond, t)
    pred = forward(params, inp, net_cfg)
    if diff_cfg.guidance_w != 0.0:
        pred_uncond = forward(params, drop_conditioning(inp), net_cfg)
        pred = cfg_combine(pred, pred_uncond, diff_cfg.guidance_w)
    if diff_cfg.parameterization == "eps":
        return _zhat0_traced(z_t_chain, pred, ab_t)
    return pred


def single_example_loss(
    params,
    y0,
    mask,
    key,
    sched: NoiseSchedule,
    net_cfg: ModelConfig,
    diff_cfg: DiffusionConfig,
    t_override: int | None = None,
):
    """Negated single-t objective for one trajectory; traceable under jit/vmap.

    ``key`` is a JAX PRNG key covering the latent draw, the timestep, both
    noise draws, and the self-conditioning coin. ``t_override`` pins the
    sampled timestep (used by estimator tests).
    """
    if sched.T < 2:
        raise DataError("training requires T >= 2 (the objective has a t >= 2 term)")
    beta, alpha_bar = _schedule_arrays(sched)
    E = params["embedding"]
    y0 = jnp.asarray(y0)
    mask = jnp.asarray(mask, dtype=jnp.float64)
    emb = E[y0]

    k_z0, k_t, k_eps, k_eps1, k_sc = jax.random.split(key, 5)
    sigma0_sq = beta[0]
    z0 = emb + jnp.sqrt(sigma0_sq) * jax.random.normal(k_z0, emb.shape)

    if t_override is None:
        t = jax.random.randint(k_t, (), 2, sched.T + 1)
    else:
        t = jnp.asarray(int(t_override))
    ab_t = alpha_bar[t - 1]
    eps_t = jax.random.normal(k_eps, emb.shape)
    z_t = jnp.sqrt(ab_t) * z0 + jnp.sqrt(1.0 - ab_t) * eps_t

    ab_1 = alpha_bar[0]
    eps_1 = jax.random.normal(k_eps1, emb.shape)
    z_1 = jnp.sqrt(ab_1) * z0 + jnp.sqrt(1.0 - ab_1) * eps_1

    def predict(z_chain, t_step, z_hat_prev):
        inp = make_score_input(z_chain, z_hat_prev, mask, emb, t_step)
        return forward(params, inp, net_cfg)

    zeros = jnp.zeros_like(emb)
    if diff_cfg.self_conditioning:
        # Half the time condition on a detached first-pass estimate of z0.
        use_sc = jax.random.bernoulli(k_sc)

        def sc_estimate(z_chain, t_step, ab):
            first = predict(z_chain, t_step, zeros)
            if diff_cfg.parameterization == "eps":
                first = _zhat0_traced(z_chain, first, ab)
            return jnp.where(use_sc, jax.lax.stop_gradient(first), zeros)

        sc_t = sc_estimate(z_t, t, ab_t)
        sc_1 = sc_estimate(z_1, 1, ab_1)
    else:
        sc_t = sc_1 = zeros

    pred_t = predict(z_t, t, sc_t)
    pred_1 = predict(z_1, 1, sc_1)

    unmasked = (1.0 - mask)[:, None]
    if diff_cfg.parameterization == "eps":
        recon_t = jnp.sum(unmasked * (eps_t - pred_t) ** 2)
        zhat0_1 = _zhat0_traced(z_1, pred_1, ab_1)
        emb_recon = jnp.sum(unmasked * (emb - zhat0_1) ** 2)
    else:
        recon_t = jnp.sum(unmasked * (z0 - pred_t) ** 2)
        emb_recon = jnp.sum(unmasked * (emb - pred_1) ** 2)

    ce = cross_entropy(y0, z0, E)
    prior = alpha_bar[sched.T - 1] * jnp.sum(z0**2)
    return ce + emb_recon + recon_t + prior


def loss_z0(params, y0, mask, rng, sched, net_cfg, diff_cfg=None, t_override=None):
    """Single-t loss with the model predicting the clean latent."""
    diff_cfg = diff_cfg or DiffusionConfig()
    cfg = _with(diff_cfg, parameterization="z0")
    return single_example_loss(params, y0, mask, rng, sched, net_cfg, cfg, t_override)


def loss_eps(params, y0, mask, rng, sched, net_cfg, diff_cfg=None, t_override=None):
    """Single-t loss with the model predicting the injected noise."""
    diff_cfg = diff_cfg or DiffusionConfig()
    cfg = _with(diff_cfg, parameterization="eps")
    return single_example_loss(params, y0, mask, rng, sched, net_cfg, cfg, t_override)


def _with(cfg: DiffusionConfig, **changes) -> DiffusionConfig:
    import dataclasses

    return dataclasses.replace(cfg, **changes)


def _reverse_step_core(params, z, z_hat_prev, mask, emb_cond, t, key, beta, alpha_bar, net_cfg, diff_cfg):
    """One reverse transition t -> t-1 for a single example; fully traceable.

    Returns (z_{t-1}, zhat0). Given rows of zhat0 are replaced by the
    conditioning embedding so the posterior pulls them toward the seed.
    """
    ab_t = alpha_bar[t - 1]
    ab_prev = alpha_bar[t - 2]
    b_t = beta[t - 1]
    a_t = 1.0 - b_t
    zhat0 = _predict_zhat0(
        params, net_cfg, diff_cfg, z, z_hat_prev, mask, emb_cond, t, ab_t
    )
    col = mask[:, None]
    zhat0 = zhat0 * (1.0 - col) + emb_cond * col
    c0 = jnp.sqrt(ab_prev) * b_t / (1.0 - ab_t)
    ct = jnp.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    noise = jax.random.normal(key, z.shape)
    z_prev = c0 * zhat0 + ct * z + jnp.sqrt(b_t) * noise
    return z_prev, zhat0


def _final_zhat0_core(params, z1, z_hat_prev, mask, emb_cond, key, beta, alpha_bar, net_cfg, diff_cfg):
    """The t = 1 decode step: estimate the clean embedding from z_1."""
    del key
    ab_1 = alpha_bar[0]
    zhat0 = _predict_zhat0(
        params, net_cfg, diff_cfg, z1, z_hat_prev, mask, emb_cond, 1, ab_1
    )
    col = mask[:, None]
    return zhat0 * (1.0 - col) + emb_cond * col


def reverse_step(params, z_t, z_hat_prev, t, mask, emb_cond, cfg, rng, sched, net_cfg):
    """Public single-example reverse step (2 <= t <= T)."""
    t = int(t)
    if not 2 <= t <= sched.T:
        raise ValueError(f"reverse step needs 2 <= t <= {sched.T}, got {t}")
    beta, alpha_bar = _schedule_arrays(sched)
    mask = jnp.asarray(mask, dtype=jnp.float64)
    return _reverse_step_core(
        params, jnp.asarray(z_t), jnp.asarray(z_hat_prev), mask,
        jnp.asarray(emb_cond), t, rng, beta, alpha_bar, net_cfg, cfg,
    )


@functools.lru_cache(maxsize=32)
def _build_batched_stepper(net_cfg: ModelConfig, diff_cfg: DiffusionConfig):
    """Jitted, vmapped reverse step and final decode, cached per config."""

    def step(params, z, z_hat, masks, emb_conds, t, keys, beta, alpha_bar):
        fn = lambda z_i, zh_i, m_i, e_i, k_i: _reverse_step_core(
            params, z_i, zh_i, m_i, e_i, t, k_i, beta, alpha_bar, net_cfg, diff_cfg
        )
        return jax.vmap(fn)(z, z_hat, masks, emb_conds, keys)

    def final(params, z1, z_hat, masks, emb_conds, beta, alpha_bar):
        fn = lambda z_i, zh_i, m_i, e_i: _final_zhat0_core(
            params, z_i, zh_i, m_i, e_i, None, beta, alpha_bar, net_cfg, diff_cfg
        )
        return jax.vmap(fn)(z1, z_hat, masks, emb_conds)

    return jax.jit(step), jax.jit(final)


def sample_latents(params, masks, emb_conds, cfg, key, sched, net_cfg):
    """Run the full reverse chain for a batch; returns clean-latent estimates (B, N, P)."""
    if sched.T < 2:
        raise DataError("sampling requires T >= 2")
    beta, alpha_bar = _schedule_arrays(sched)
    step_fn, final_fn = _build_batched_stepper(net_cfg, cfg)
    masks = jnp.asarray(masks, dtype=jnp.float64)
    emb_conds = jnp.asarray(emb_conds)
    B, N = masks.shape
    P = net_cfg.embed_dim
    key, k_init = jax.random.split(key)
    z = jax.random.normal(k_init, (B, N, P))
    z_hat = jnp.zeros_like(z)
    for t in range(sched.T, 1, -1):
        keys = jax.random.split(jax.random.fold_in(key, t), B)
        z, z_hat = step_fn(params, z, z_hat, masks, emb_conds, t, keys, beta, alpha_bar)
    return final_fn(params, z, z_hat, masks, emb_conds, beta, alpha_bar)


def sample_many(params, seed_tokens, masks, cfg, key, sched, net_cfg) -> np.ndarray:
    """Generate a batch of trajectories.

    ``masks`` is (B, N) binary; ``seed_tokens`` is None (fully
    unconditional) or (B, N) with values read at masked positions.
    Masked output positions always equal the seed tokens exactly.
    """
    masks = np.asarray(masks, dtype=np.int64)
    B, N = masks.shape
    E = np.asarray(params["embedding"])
    if seed_tokens is None:
        if masks.any():
            raise DataError("mask has given positions but no seed tokens were supplied")
        seed_tokens = np.zeros((B, N), dtype=np.int64)
    seed_tokens = np.asarray(seed_tokens, dtype=np.int64)
    if seed_tokens.shape != (B, N):
        raise DataError(f"seed tokens shape {seed_tokens.shape} != mask shape {(B, N)}")
    emb_conds = np.stack([np.asarray(embed(seed_tokens[i], E)) for i in range(B)])
    emb_conds *= masks[:, :, None]
    zhat0 = sample_latents(params, masks, emb_conds, cfg, key, sched, net_cfg)
    tokens = np.stack([decode(zhat0[i], E) for i in range(B)])
    tokens = np.where(masks == 1, seed_tokens, tokens)
    return tokens.astype(np.int64)


def sample(params, seed_tokens, mask, cfg, rng, sched, net_cfg) -> np.ndarray:
    """Generate one trajectory; seed tokens fill the masked positions in order.

    ``seed_tokens`` may be None (all-zero mask), a vector with one entry
    per masked position, or a full-length vector read at masked positions.
    """
    mask = np.asarray(mask, dtype=np.int64)
    N = mask.shape[0]
    n_given = int(mask.sum())
    full_seed = np.zeros(N, dtype=np.int64)
    if seed_tokens is None:
        if n_given:
            raise DataError(f"mask has {n_given} given positions but no seed tokens")
    else:
        seed_tokens = np.asarray(seed_tokens, dtype=np.int64)
        if seed_tokens.shape == (N,):
            full_seed = seed_tokens.copy()
        elif seed_tokens.shape == (n_given,):
            full_seed[mask == 1] = seed_tokens
        else:
            raise DataError(
                f"seed tokens length {seed_tokens.shape} matches neither the mask "
                f"count {n_given} nor the sequence length {N}"
            )
    out = sample_many(params, full_seed[None, :], mask[None, :], cfg, rng, sched, net_cfg)
    return out[0]


def autoregressive_generate(params, initial_seed, n_chunks: int, cfg, rng, sched, net_cfg) -> np.ndarray:
    """Extend a half-length seed chunk by chunk via prefix-conditioned infilling."""
    out = autoregressive_generate_many(
        params, np.asarray(initial_seed, dtype=np.int64)[None, :], n_chunks, cfg, rng, sched, net_cfg
    )
    return out[0]


def autoregressive_generate_many(params, initial_seeds, n_chunks: int, cfg, rng, sched, net_cfg) -> np.ndarray:
    """Batched autoregressive generation.

    ``initial_seeds`` is (B, N/2). Each round conditions on the previous
    half as a prefix and generates the next half; output length is
    N/2 * (n_chunks + 1) per row.
    """
    seeds = np.asarray(initial_seeds, dtype=np.int64)
    B, half = seeds.shape
    N = 2 * half
    mask = np.zeros((B, N), dtype=np.int64)
    mask[:, :half] = 1
    result = seeds.copy()
    current = seeds
    for chunk in range(n_chunks):
        full_seed = np.concatenate([current, np.zeros((B, half), dtype=np.int64)], axis=1)
        key = jax.random.fold_in(rng, chunk)
        out = sample_many(params, full_seed, mask, cfg, key, sched, net_cfg)
        if not np.array_equal(out[:, :half], current):
            raise NumericalError("conditioning violated: prefix tokens changed")
        new = out[:, half:]
        result = np.concatenate([result, new], axis=1)
        current = new
    return result
