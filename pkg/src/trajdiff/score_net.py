"""Transformer score model and its exact gradients.

The network maps a stacked sequence input (noisy latent, previous clean
estimate, mask column, conditioning embedding) of shape N x (3P + 1) to
an N x P prediction, interpreted as either the clean latent or the
injected noise depending on the configured parameterization.

Pipeline: input MLP -> sinusoidal positions -> pre-LayerNorm transformer
block(s) with 4-head self-attention -> additive time conditioning from a
sinusoidal timestep encoding passed through a two-layer MLP and a linear
projection -> output MLP. Hidden activations are swish.

Parameters live in a nested dict pytree so ``jax.grad`` differentiates
the whole model, embedding table included.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from trajdiff.config import ModelConfig
from trajdiff.embedding import init_embedding, normalize_rows
from trajdiff.errors import NumericalError
from trajdiff.rng import substream

LN_EPS = 1e-6


@dataclass
class ScoreInput:
    """Stacked input to the score model.

    ``z_t`` rows are zeroed where ``mask == 1`` (those positions are
    given); ``emb_cond`` rows are zeroed where ``mask == 0`` (nothing is
    given there). ``make_score_input`` applies both rules.
    """

    z_t: jnp.ndarray        # N x P
    z_hat_prev: jnp.ndarray  # N x P, self-conditioning estimate
    mask: jnp.ndarray       # N, binary
    emb_cond: jnp.ndarray   # N x P
    t: int


def make_score_input(z_t, z_hat_prev, mask, emb, t) -> ScoreInput:
    """Apply the masking rules and assemble a ScoreInput."""
    mask = jnp.asarray(mask, dtype=jnp.float64)
    col = mask[:, None]
    return ScoreInput(
        z_t=jnp.asarray(z_t) * (1.0 - col),
        z_hat_prev=jnp.asarray(z_hat_prev),
        mask=mask,
        emb_cond=jnp.asarray(emb) * col,
        t=t,
    )


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> dict:
    # Fan-in scaled normal weights, zero biases.
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return {"w": w, "b": np.zeros(fan_out)}


def _mlp(rng: np.random.Generator, dims: tuple[int, ...]) -> list[dict]:
    return [_linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def init_params(seed: int, N: int, P: int, D: int, cfg: ModelConfig | None = None) -> dict:
    """Deterministic parameter initialization.

    ``N`` is accepted for interface parity; the positional encoding is
    parameter-free, so no weight depends on it.
    """
    if min(N, P, D) < 1:
        raise ValueError(f"dimensions must be positive, got N={N}, P={P}, D={D}")
    if cfg is None:
        cfg = ModelConfig(embed_dim=P)
    if cfg.embed_dim != P:
        raise ValueError(f"cfg.embed_dim={cfg.embed_dim} does not match P={P}")
    rng = substream(seed, "score_net_init")
    in_dims = (3 * P + 1,) + cfg.hidden_in + (P,)
    ffn_dim = cfg.ffn_mult * P
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            {
                "ln1": {"scale": np.ones(P), "bias": np.zeros(P)},
                "attn": {
                    "q": _linear(rng, P, P),
                    "k": _linear(rng, P, P),
                    "v": _linear(rng, P, P),
                    "o": _linear(rng, P, P),
                },
                "ln2": {"scale": np.ones(P), "bias": np.zeros(P)},
                "ffn": _mlp(rng, (P, ffn_dim, P)),
            }
        )
    params = {
        "in_mlp": _mlp(rng, in_dims),
        "blocks": blocks,
        "time_mlp": _mlp(rng, (cfg.time_dim,) + cfg.hidden_time),
        "time_proj": _linear(rng, cfg.hidden_time[-1], P),
        "out_mlp": _mlp(rng, (P,) + cfg.hidden_out + (P,)),
        "embedding": init_embedding(substream(seed, "embedding_init"), D, P),
    }
    return jax.tree.map(jnp.asarray, params)


def sinusoidal_encoding(positions, dim: int, max_period: float = 10_000.0):
    """Interleaved sin/cos encoding: index 2i is sin, 2i+1 is cos."""
    positions = jnp.asarray(positions, dtype=jnp.float64)
    half = dim // 2
    freqs = jnp.exp(-jnp.log(max_period) * (2.0 * jnp.arange(half) / dim))
    angles = positions[..., None] * freqs
    enc = jnp.stack([jnp.sin(angles), jnp.cos(angles)], axis=-1).reshape(*positions.shape, 2 * half)
    if dim % 2 == 1:
        enc = jnp.concatenate([enc, jnp.sin(positions[..., None] * freqs[-1:] / max_period)], axis=-1)
    return enc


def _apply_mlp(layers: list[dict], x):
    for i, layer in enumerate(layers):
        x = x @ layer["w"] + layer["b"]
        if i < len(layers) - 1:
            x = jax.nn.silu(x)
    return x


def _layer_norm(p: dict, x):
    mean = jnp.mean(x, axis=-1, keepdims=True)
    var = jnp.var(x, axis=-1, keepdims=True)
    return (x - mean) / jnp.sqrt(var + LN_EPS) * p["scale"] + p["bias"]


def _attention(p: dict, x, n_heads: int):
    n, width = x.shape
    head = width // n_heads
    q = (x @ p["q"]["w"] + p["q"]["b"]).reshape(n, n_heads, head)
    k = (x @ p["k"]["w"] + p["k"]["b"]).reshape(n, n_heads, head)
    v = (x @ p["v"]["w"] + p["v"]["b"]).reshape(n, n_heads, head)
    scores = jnp.einsum("nhd,mhd->hnm", q, k) / jnp.sqrt(float(head))
    att = jax.nn.softmax(scores, axis=-1)
    out = jnp.einsum("hnm,mhd->nhd", att, v).reshape(n, width)
    return out @ p["o"]["w"] + p["o"]["b"]


def transformer_block(block: dict, x, n_heads: int):
    """Pre-LN block: x + attn(ln1(x)), then x + ffn(ln2(x))."""
    x = x + _attention(block["attn"], _layer_norm(block["ln1"], x), n_heads)
    x = x + _apply_mlp(block["ffn"], _layer_norm(block["ln2"], x))
    return x


def input_stream(params: dict, cfg: ModelConfig, inp: ScoreInput, positions=None):
    """Stacked features through the input MLP plus positional encoding."""
    x = jnp.concatenate(
        [inp.z_t, inp.z_hat_prev, inp.mask[:, None], inp.emb_cond], axis=1
    )
    h = _apply_mlp(params["in_mlp"], x)
    if positions is None:
        positions = jnp.arange(h.shape[0])
    return h + sinusoidal_encoding(positions, cfg.embed_dim)


def time_conditioning(params: dict, cfg: ModelConfig, t):
    """Sinusoidal timestep encoding through the time MLP and linear projection."""
    temb = sinusoidal_encoding(jnp.asarray(t, dtype=jnp.float64), cfg.time_dim)
    h = _apply_mlp(params["time_mlp"], temb)
    return h @ params["time_proj"]["w"] + params["time_proj"]["b"]


def forward(params: dict, inp: ScoreInput, cfg: ModelConfig, positions=None, validate: bool = False):
    """Evaluate the score model; shape N x P in, N x P out.

    With ``validate=True`` (concrete inputs only) every stage is checked
    for non-finite values and a NumericalError names the failing layer.
    """
    stages: list[tuple[str, Callable]] = [
        ("input_mlp+positions", lambda h: input_stream(params, cfg, inp, positions)),
    ]
    for i in range(len(params["blocks"])):
        stages.append(
            (f"transformer_block_{i}", lambda h, i=i: transformer_block(params["blocks"][i], h, cfg.n_heads))
        )
    stages.append(("time_conditioning", lambda h: h + time_conditioning(params, cfg, inp.t)))
    stages.append(("output_mlp", lambda h: _apply_mlp(params["out_mlp"], h)))

    h = None
    for name, fn in stages:
        h = fn(h)
        if validate and not bool(jnp.all(jnp.isfinite(h))):
            raise NumericalError(f"non-finite values after layer {name!r}")
    return h


def grad(params: dict, batch_loss_fn: Callable[[dict], jnp.ndarray]) -> dict:
    """Exact reverse-mode gradient of a scalar loss w.r.t. every parameter.

    Aborts with NumericalError if the loss or any gradient coordinate is
    non-finite.
    """
    value, grads = jax.value_and_grad(batch_loss_fn)(params)
    if not bool(jnp.isfinite(value)):
        raise NumericalError(f"loss is non-finite: {value}")
    leaves = jax.tree.leaves(grads)
    if not all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in leaves):
        raise NumericalError("non-finite gradient")
    return grads


def param_count(params: dict) -> int:
    return sum(int(np.prod(leaf.shape)) for leaf in jax.tree.leaves(params))


def renormalize_embedding(params: dict) -> dict:
    """Return params with the embedding table rows re-normalized to unit norm."""
    out = dict(params)
    out["embedding"] = normalize_rows(params["embedding"])
    return out
