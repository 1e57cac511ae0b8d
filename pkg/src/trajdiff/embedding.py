"""Mapping between discrete location tokens and the continuous latent space.

A trajectory is a length-N integer vector with tokens in [0, D). The
embedding table is a D x P matrix whose rows are kept at unit L2 norm;
``embed`` looks tokens up rowwise, ``logits``/``decode``/``cross_entropy``
implement the categorical likelihood over tokens given a clean latent.

Functions are written against ``jax.numpy`` so they can be traced inside
jitted losses; they accept plain NumPy inputs as well. Input validation
runs only on concrete (untraced) arrays.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import jax.core
import jax.numpy as jnp
import numpy as np

from trajdiff.errors import DataError
from trajdiff.utils import write_text_atomic

ZERO_ROW_TOL = 1e-12


def _is_traced(x) -> bool:
    return isinstance(x, jax.core.Tracer)


def validate_trajectory(tokens, n_locations: int) -> np.ndarray:
    """Check token range and return the trajectory as an int array."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise DataError(f"trajectory must be one-dimensional, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n_locations):
        raise DataError(
            f"token out of range [0, {n_locations}): min={tokens.min()}, max={tokens.max()}"
        )
    return tokens


def embed(y, E):
    """Rowwise table lookup: output row n is row y_n of E."""
    E = jnp.asarray(E)
    if not _is_traced(y):
        y = validate_trajectory(y, E.shape[0])
    return E[y]


def sample_z0(y, E, sigma0_sq: float, rng: np.random.Generator) -> np.ndarray:
    """Draw z_0 = embed(y) + sqrt(sigma0_sq) * eps with eps standard normal."""
    if sigma0_sq < 0.0:
        raise ValueError(f"sigma0_sq must be nonnegative, got {sigma0_sq}")
    mean = np.asarray(embed(y, E))
    if sigma0_sq == 0.0:
        return mean
    return mean + np.sqrt(sigma0_sq) * rng.standard_normal(mean.shape)


def logits(z0, E):
    """Per-position token logits: entry (n, d) = <z0_n, E_d>."""
    return jnp.asarray(z0) @ jnp.asarray(E).T


def decode(z0, E) -> np.ndarray:
    """Argmax decode of the token likelihood; ties break toward the smallest index."""
    scores = np.asarray(logits(z0, E))
    return np.argmax(scores, axis=-1).astype(np.int64)


def cross_entropy(y, z0, E):
    """Sum over positions of -log softmax(logits_n)[y_n], log-sum-exp stabilized."""
    y = jnp.asarray(y)
    a = logits(z0, E)
    a_max = jnp.max(a, axis=-1, keepdims=True)
    lse = a_max[..., 0] + jnp.log(jnp.sum(jnp.exp(a - a_max), axis=-1))
    picked = jnp.take_along_axis(a, y[..., None], axis=-1)[..., 0]
    return jnp.sum(lse - picked)


def normalize_rows(E):
    """Rescale every row of E to unit L2 norm; directions are preserved."""
    E = jnp.asarray(E)
    norms = jnp.linalg.norm(E, axis=-1, keepdims=True)
    if not _is_traced(norms) and bool(np.any(np.asarray(norms) < ZERO_ROW_TOL)):
        raise ValueError("embedding table has a zero row; degenerate initialization")
    return E / norms


def init_embedding(rng: np.random.Generator, n_locations: int, embed_dim: int) -> np.ndarray:
    """I.i.d. standard normal entries, then row normalization."""
    E = rng.standard_normal((n_locations, embed_dim))
    return np.asarray(normalize_rows(E))


def read_trajectories_jsonl(path: str | Path) -> tuple[list[np.ndarray], list[str]]:
    """Read {"user": str, "tokens": [int, ...]} records; returns (trajectories, users)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"trajectory file not found: {path}")
    trajectories, users = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tokens = np.asarray(rec["tokens"], dtype=np.int64)
                user = str(rec.get("user", ""))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad trajectory record: {exc}") from exc
            trajectories.append(tokens)
            users.append(user)
    return trajectories, users


def write_trajectories_jsonl(
    path: str | Path, trajectories: Iterable, users: Iterable[str] | None = None
) -> None:
    trajectories = list(trajectories)
    if users is None:
        users = [f"synthetic_{i}" for i in range(len(trajectories))]
    lines = []
    for user, tokens in zip(users, trajectories):
        lines.append(json.dumps({"user": user, "tokens": [int(t) for t in np.asarray(tokens)]}))
    write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))
