"""Denoiser network: embeddings, exact gradients, Adam, checkpoints."""

import numpy as np
import pytest

from diffpol.nets import (
    AdamState,
    MlpParams,
    denoiser_backward,
    denoiser_batch_grads,
    denoiser_forward,
    init_mlp,
    init_params,
    load_checkpoint,
    mlp_forward,
    optimizer_step,
    save_checkpoint,
    sinusoidal_embed,
    _embed_table,
)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def central_diff(f, arr, idx, eps=1e-6):
    old = arr[idx]
    arr[idx] = old + eps
    lp = f()
    arr[idx] = old - eps
    lm = f()
    arr[idx] = old
    return (lp - lm) / (2.0 * eps)


class TestSinusoidalEmbed:
    def test_range_and_shape(self):
        for k in (0, 1, 50, 100):
            e = sinusoidal_embed(k, 128, 100)
            assert e.shape == (128,)
            assert np.all(np.abs(e) <= 1.0)

    def test_zero_step(self):
        e = sinusoidal_embed(0, 8, 100)
        np.testing.assert_array_equal(e[0::2], 0.0)
        np.testing.assert_array_equal(e[1::2], 1.0)

    def test_distinct_rows(self):
        rows = np.stack([sinusoidal_embed(k, 16, 100) for k in range(1, 101)])
        d = np.abs(rows[:, None, :] - rows[None, :, :]).max(axis=2)
        d[np.diag_indices(100)] = 1.0
        assert d.min() > 1e-4

    def test_table_matches_op(self):
        t = _embed_table(32, 50)
        for k in (1, 17, 50):
            np.testing.assert_array_equal(t[k - 1], sinusoidal_embed(k, 32, 50))

    def test_rejects_odd_dim(self):
        with pytest.raises(ValueError):
            sinusoidal_embed(1, 7, 100)
        with pytest.raises(ValueError):
            sinusoidal_embed(101, 8, 100)


class TestInit:
    def test_seeded_reproducible(self):
        a = init_params(9, d_o=6, T_p=16, d_a=2)
        b = init_params(9, d_o=6, T_p=16, d_a=2)
        for wa, wb in zip(a.net.weights, b.net.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_output_scale_on_unit_inputs(self):
        p = init_params(0, d_o=6, T_p=16, d_a=2)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((256, p.d_in))
        y, _ = mlp_forward(p.net, x)
        assert 0.1 <= y.std() <= 10.0

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            init_params(0, d_o=0, T_p=16, d_a=2)


class TestGradients:
    def probe_all(self, width, seed, n_probes=40):
        """Analytic vs central-difference gradients on every array."""
        rng = np.random.default_rng(seed)
        p = init_params(seed, d_o=3, T_p=4, d_a=2, hidden=width, embed_dim=8,
                        T=10)
        obs = rng.normal(size=3)
        ak = rng.normal(size=(4, 2))
        eps = rng.normal(size=(4, 2))
        k = int(rng.integers(1, 11))
        _, grads = denoiser_backward(p, obs, ak, k, eps)
        worst = 0.0
        arrays = list(zip(p.net.weights, grads.weights))
        arrays += list(zip(p.net.biases, grads.biases))
        for _ in range(n_probes):
            arr, g = arrays[rng.integers(len(arrays))]
            idx = tuple(rng.integers(s) for s in arr.shape)
            num = central_diff(
                lambda: denoiser_backward(p, obs, ak, k, eps)[0], arr, idx)
            worst = max(worst, rel_err(num, g[idx]))
        return worst

    def test_exact_against_finite_differences(self):
        assert self.probe_all(width=8, seed=2) < 1e-6
        assert self.probe_all(width=16, seed=3) < 1e-6

    def test_batch_matches_per_sample(self):
        rng = np.random.default_rng(4)
        p = init_params(4, d_o=3, T_p=4, d_a=2, hidden=8, embed_dim=8, T=10)
        B = 5
        obs_b = rng.normal(size=(B, 3))
        ak_b = rng.normal(size=(B, 4, 2))
        eps_b = rng.normal(size=(B, 4, 2))
        ks = rng.integers(1, 11, size=B)
        losses, grads = denoiser_batch_grads(p, obs_b, ak_b, ks, eps_b)
        acc = None
        for i in range(B):
            loss_i, g_i = denoiser_backward(p, obs_b[i], ak_b[i], int(ks[i]),
                                            eps_b[i])
            assert rel_err(loss_i, losses[i]) < 1e-12
            if acc is None:
                acc = g_i
            else:
                acc = MlpParams(
                    [a + b for a, b in zip(acc.weights, g_i.weights)],
                    [a + b for a, b in zip(acc.biases, g_i.biases)])
        for a, b in zip(acc.weights, grads.weights):
            np.testing.assert_allclose(a / B, b, atol=1e-12)

    def test_forward_shape_and_validation(self):
        p = init_params(0, d_o=6, T_p=16, d_a=2)
        rng = np.random.default_rng(0)
        out = denoiser_forward(p, rng.normal(size=6), rng.normal(size=(16, 2)), 5)
        assert out.shape == (16, 2)
        with pytest.raises(ValueError):
            denoiser_forward(p, rng.normal(size=5), rng.normal(size=(16, 2)), 5)
        with pytest.raises(ValueError):
            denoiser_forward(p, rng.normal(size=6), rng.normal(size=(2, 16)), 5)


class TestAdam:
    def test_zero_grad_noop(self):
        rng = np.random.default_rng(5)
        p = init_mlp(rng, [3, 4, 2])
        zero = MlpParams([np.zeros_like(w) for w in p.weights],
                         [np.zeros_like(b) for b in p.biases])
        p2, st = optimizer_step(p, zero, AdamState())
        assert st.t == 1
        for a, b in zip(p.weights + p.biases, p2.weights + p2.biases):
            np.testing.assert_array_equal(a, b)

    def test_first_step_magnitude(self):
        # bias correction makes step one move by ~lr * sign(g)
        p = MlpParams([np.array([[1.0]])], [np.array([0.0])])
        g = MlpParams([np.array([[3.0]])], [np.array([0.0])])
        p2, _ = optimizer_step(p, g, AdamState(lr=0.1))
        expected = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8)
        assert abs(p2.weights[0][0, 0] - expected) < 1e-9

    def test_inputs_untouched(self):
        rng = np.random.default_rng(6)
        p = init_mlp(rng, [2, 3, 1])
        before = p.copy()
        g = MlpParams([np.ones_like(w) for w in p.weights],
                      [np.ones_like(b) for b in p.biases])
        optimizer_step(p, g, AdamState())
        for a, b in zip(p.weights + p.biases, before.weights + before.biases):
            np.testing.assert_array_equal(a, b)

    def test_descends_quadratic(self):
        p = MlpParams([np.array([[4.0]])], [np.array([0.0])])
        st = AdamState(lr=0.05)
        for _ in range(300):
            g = MlpParams([2.0 * p.weights[0]], [np.zeros(1)])
            p, st = optimizer_step(p, g, st)
        assert abs(p.weights[0][0, 0]) < 0.1


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        p = init_params(11, d_o=6, T_p=16, d_a=2, hidden=32, embed_dim=16, T=50)
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(path, p)
        q = load_checkpoint(path)
        assert (q.d_o, q.T_p, q.d_a, q.embed_dim, q.hidden, q.T) == \
               (6, 16, 2, 16, 32, 50)
        for a, b in zip(p.net.weights + p.net.biases,
                        q.net.weights + q.net.biases):
            np.testing.assert_array_equal(a, b)
        save_checkpoint(str(tmp_path / "again.bin"), q)
        assert (tmp_path / "checkpoint.bin").read_bytes() == \
               (tmp_path / "again.bin").read_bytes()

    def test_rejects_corrupt_files(self, tmp_path):
        p = init_params(0, d_o=2, T_p=4, d_a=2, hidden=8, embed_dim=8, T=10)
        path = str(tmp_path / "c.bin")
        save_checkpoint(path, p)
        blob = open(path, "rb").read()
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"WRONGMAG" + blob[8:])
        with pytest.raises(ValueError):
            load_checkpoint(str(bad))
        short = tmp_path / "short.bin"
        short.write_bytes(blob[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(str(short))
