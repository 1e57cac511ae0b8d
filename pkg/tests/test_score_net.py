import jax
import jax.numpy as jnp
import numpy as np
import pytest

from trajdiff.checkpoint import flatten_tree, unflatten_tree
from trajdiff.diffusion import single_example_loss
from trajdiff.errors import NumericalError
from trajdiff.schedules import make_cosine_schedule
from trajdiff.score_net import (
    forward,
    grad,
    init_params,
    input_stream,
    make_score_input,
    time_conditioning,
    transformer_block,
)

N, P, D = 4, 4, 3


@pytest.fixture
def params(tiny_model_cfg):
    return init_params(0, N, P, D, tiny_model_cfg)


def random_input(rng, t=3):
    return make_score_input(
        rng.standard_normal((N, P)),
        rng.standard_normal((N, P)),
        rng.integers(0, 2, size=N),
        rng.standard_normal((N, P)),
        t,
    )


class TestInit:
    def test_deterministic(self, tiny_model_cfg):
        a = init_params(42, N, P, D, tiny_model_cfg)
        b = init_params(42, N, P, D, tiny_model_cfg)
        for (na, la), (nb, lb) in zip(flatten_tree(a), flatten_tree(b)):
            assert na == nb
            assert np.array_equal(np.asarray(la), np.asarray(lb))

    def test_seeds_differ(self, tiny_model_cfg):
        a = init_params(1, N, P, D, tiny_model_cfg)
        b = init_params(2, N, P, D, tiny_model_cfg)
        assert not np.allclose(np.asarray(a["in_mlp"][0]["w"]), np.asarray(b["in_mlp"][0]["w"]))

    def test_forward_finite_and_moderate(self, params, tiny_model_cfg, rng):
        out = forward(params, random_input(rng), tiny_model_cfg, validate=True)
        out = np.asarray(out)
        assert np.all(np.isfinite(out))
        assert np.max(np.abs(out)) < 100.0

    def test_rejects_bad_dims(self, tiny_model_cfg):
        with pytest.raises(ValueError):
            init_params(0, 0, P, D, tiny_model_cfg)
        with pytest.raises(ValueError):
            init_params(0, N, 8, D, tiny_model_cfg)  # P mismatch with cfg


class TestForward:
    def test_deterministic(self, params, tiny_model_cfg, rng):
        inp = random_input(rng)
        a = np.asarray(forward(params, inp, tiny_model_cfg))
        b = np.asarray(forward(params, inp, tiny_model_cfg))
        assert np.array_equal(a, b)

    def test_permutation_equivariance(self, params, tiny_model_cfg, rng):
        z_t = rng.standard_normal((N, P))
        z_hat = rng.standard_normal((N, P))
        mask = rng.integers(0, 2, size=N)
        emb = rng.standard_normal((N, P))
        base = np.asarray(
            forward(params, make_score_input(z_t, z_hat, mask, emb, 2), tiny_model_cfg)
        )
        perm = rng.permutation(N)
        permuted = np.asarray(
            forward(
                params,
                make_score_input(z_t[perm], z_hat[perm], mask[perm], emb[perm], 2),
                tiny_model_cfg,
                positions=perm,
            )
        )
        assert np.allclose(permuted, base[perm], atol=1e-12)

    def test_time_conditioning_is_live(self, params, tiny_model_cfg, rng):
        z_t = rng.standard_normal((N, P))
        mask = np.zeros(N, dtype=int)
        inp1 = make_score_input(z_t, np.zeros((N, P)), mask, np.zeros((N, P)), 1)
        inpT = make_score_input(z_t, np.zeros((N, P)), mask, np.zeros((N, P)), 1000)
        a = np.asarray(forward(params, inp1, tiny_model_cfg))
        b = np.asarray(forward(params, inpT, tiny_model_cfg))
        assert np.max(np.abs(a - b)) > 1e-8

    def test_zero_final_layer_zeroes_output(self, params, tiny_model_cfg, rng):
        p = unflatten_tree(dict(flatten_tree(params)))
        p["out_mlp"][-1]["w"] = jnp.zeros_like(p["out_mlp"][-1]["w"])
        p["out_mlp"][-1]["b"] = jnp.zeros_like(p["out_mlp"][-1]["b"])
        out = np.asarray(forward(p, random_input(rng), tiny_model_cfg))
        assert np.all(out == 0.0)

    def test_pre_layernorm_reduction(self, params, tiny_model_cfg, rng):
        """With both sublayers' output weights zeroed the block is the
        identity, so forward collapses to out_mlp(input stream + time)."""
        p = unflatten_tree(dict(flatten_tree(params)))
        block = p["blocks"][0]
        block["attn"]["o"]["w"] = jnp.zeros_like(block["attn"]["o"]["w"])
        block["attn"]["o"]["b"] = jnp.zeros_like(block["attn"]["o"]["b"])
        block["ffn"][-1]["w"] = jnp.zeros_like(block["ffn"][-1]["w"])
        block["ffn"][-1]["b"] = jnp.zeros_like(block["ffn"][-1]["b"])

        inp = random_input(rng, t=5)
        x = rng.standard_normal((N, P))
        assert np.allclose(np.asarray(transformer_block(block, jnp.asarray(x), 4)), x, atol=1e-14)

        full = np.asarray(forward(p, inp, tiny_model_cfg))
        stream = input_stream(p, tiny_model_cfg, inp)
        cond = stream + time_conditioning(p, tiny_model_cfg, inp.t)
        from trajdiff.score_net import _apply_mlp

        manual = np.asarray(_apply_mlp(p["out_mlp"], cond))
        assert np.allclose(full, manual, atol=1e-14)

    def test_validate_names_failing_layer(self, params, tiny_model_cfg, rng):
        p = unflatten_tree(dict(flatten_tree(params)))
        w = np.asarray(p["time_mlp"][0]["w"]).copy()
        w[0, 0] = np.nan
        p["time_mlp"][0]["w"] = jnp.asarray(w)
        with pytest.raises(NumericalError, match="time_conditioning"):
            forward(p, random_input(rng), tiny_model_cfg, validate=True)


class TestGrad:
    def _loss_fn(self, tiny_model_cfg, sc_off):
        sched = make_cosine_schedule(8)
        y0 = np.array([0, 1, 2, 1])
        mask = np.array([1, 0, 0, 1])
        key = jax.random.PRNGKey(3)
        return lambda p: single_example_loss(p, y0, mask, key, sched, tiny_model_cfg, sc_off)

    def test_matches_central_finite_differences_everywhere(self, params, tiny_model_cfg, sc_off):
        loss = self._loss_fn(tiny_model_cfg, sc_off)
        loss_jit = jax.jit(loss)
        grads = grad(params, loss)
        pairs = flatten_tree(params)
        grad_pairs = dict(flatten_tree(grads))
        h = 1e-4
        checked = 0
        for name, arr in pairs:
            arr = np.asarray(arr, dtype=np.float64)
            g = np.asarray(grad_pairs[name])
            for idx in np.ndindex(arr.shape):
                up, dn = arr.copy(), arr.copy()
                up[idx] += h
                dn[idx] -= h
                fd_up = float(loss_jit(_patched(params, name, up)))
                fd_dn = float(loss_jit(_patched(params, name, dn)))
                fd = (fd_up - fd_dn) / (2 * h)
                denom = max(abs(fd), abs(g[idx]), 1e-6)
                assert abs(g[idx] - fd) / denom < 1e-4, f"{name}[{idx}]: {g[idx]} vs {fd}"
                checked += 1
        assert checked > 500  # every coordinate of every group

    def test_constant_loss_zero_gradient(self, params):
        g = grad(params, lambda p: jnp.asarray(3.5))
        assert all(np.all(np.asarray(leaf) == 0.0) for leaf in jax.tree.leaves(g))

    def test_gradient_linearity(self, params, tiny_model_cfg, sc_off):
        loss = self._loss_fn(tiny_model_cfg, sc_off)
        g1 = dict(flatten_tree(grad(params, loss)))
        g2 = dict(flatten_tree(grad(params, lambda p: 2.0 * loss(p))))
        for name in g1:
            assert np.allclose(2.0 * np.asarray(g1[name]), np.asarray(g2[name]), rtol=1e-12)

    def test_nonfinite_gradient_aborts(self, params):
        with pytest.raises(NumericalError):
            grad(params, lambda p: jnp.log(jnp.sum(p["embedding"]) * 0.0))


def _patched(params, name: str, value: np.ndarray):
    pairs = dict(flatten_tree(params))
    pairs[name] = value
    return unflatten_tree(pairs)
