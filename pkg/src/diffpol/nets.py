"""Fully connected denoiser network with hand-written gradients.

A small tanh MLP implemented directly in numpy: explicit forward pass,
explicit reverse-mode gradients, Adam, and a flat binary checkpoint
format.  Keeping the backward pass analytic (instead of relying on an
autodiff framework) lets the test suite verify every gradient against
central finite differences as an independent route.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"DIFFPOL1"

# -- sinusoidal step embedding ------------------------------------------------


def sinusoidal_embed(k: int, dim: int, T: int) -> np.ndarray:
    """Sin/cos features of a step index at geometric frequencies.

    dim must be even; frequencies fall from 1 to 1/T so the slowest pair
    resolves the full 1..T range and the fastest separates neighbours.
    Entries lie in [-1, 1] and distinct k in 1..T map to distinct rows.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    if not (0 <= k <= T):
        raise ValueError(f"step index {k} outside [0, {T}]")
    if k == 0:
        out = np.zeros(dim)
        out[1::2] = 1.0  # sin(0), cos(0) pairs
        return out
    return _embed_table(dim, T)[k - 1].copy()


@lru_cache(maxsize=8)
def _embed_freqs(dim: int, T: int) -> np.ndarray:
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return float(T) ** (-np.arange(half) / (half - 1))


@lru_cache(maxsize=8)
def _embed_table(dim: int, T: int) -> np.ndarray:
    """Rows of sinusoidal_embed for k = 1..T, cached."""
    freqs = _embed_freqs(dim, T)
    ks = np.arange(1, T + 1, dtype=np.float64)[:, None]
    table = np.empty((T, dim))
    table[:, 0::2] = np.sin(ks * freqs)
    table[:, 1::2] = np.cos(ks * freqs)
    table.setflags(write=False)
    return table


# -- generic MLP: forward, backward, init ------------------------------------


@dataclass
class MlpParams:
    """Layer weights (fan_in x fan_out) and biases, hidden tanh, linear out."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def init_mlp(rng: np.random.Generator, sizes: list[int]) -> MlpParams:
    """Fan-in scaled uniform init: W ~ U(+-sqrt(3/fan_in)), unit variance
    of each pre-activation on unit-variance inputs."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-limit, limit, size=fan_out))
    return MlpParams(weights, biases)


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; x is (n, d_in).  Returns (y, cache) where the
    cache holds each layer's input for the backward pass."""
    h = np.asarray(x, dtype=np.float64)
    cache = [h]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def mlp_backward(p: MlpParams, cache: list[np.ndarray],
                 dy: np.ndarray) -> MlpParams:
    """Gradients of a scalar loss wrt every weight, given dL/dy."""
    dw = [np.empty(0)] * len(p.weights)
    db = [np.empty(0)] * len(p.biases)
    g = np.asarray(dy, dtype=np.float64)
    for i in range(len(p.weights) - 1, -1, -1):
        if i < len(p.weights) - 1:
            g = g * (1.0 - cache[i + 1] ** 2)  # tanh'
        dw[i] = cache[i].T @ g
        db[i] = g.sum(axis=0)
        if i > 0:
            g = g @ p.weights[i].T
    return MlpParams(dw, db)


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: MlpParams | None = None
    v: MlpParams | None = None


def _zeros_like(p: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in p.weights],
                     [np.zeros_like(b) for b in p.biases])


def optimizer_step(p: MlpParams, grads: MlpParams,
                   st: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam update.  Inputs are left untouched; returns new values."""
    m = st.m if st.m is not None else _zeros_like(p)
    v = st.v if st.v is not None else _zeros_like(p)
    t = st.t + 1
    new_p, new_m, new_v = [], [], []
    for arrs in zip(p.weights + p.biases, grads.weights + grads.biases,
                    m.weights + m.biases, v.weights + v.biases):
        theta, g, m_i, v_i = arrs
        m_n = st.beta1 * m_i + (1 - st.beta1) * g
        v_n = st.beta2 * v_i + (1 - st.beta2) * g * g
        m_hat = m_n / (1 - st.beta1 ** t)
        v_hat = v_n / (1 - st.beta2 ** t)
        new_p.append(theta - st.lr * m_hat / (np.sqrt(v_hat) + st.eps))
        new_m.append(m_n)
        new_v.append(v_n)
    n = len(p.weights)
    return (
        MlpParams(new_p[:n], new_p[n:]),
        replace(st, t=t,
                m=MlpParams(new_m[:n], new_m[n:]),
                v=MlpParams(new_v[:n], new_v[n:])),
    )


# -- denoiser: obs + noisy action window + step embedding -> noise estimate --


@dataclass
class DenoiserParams:
    """MLP denoiser over concat(obs, flattened noisy window, step embed)."""

    d_o: int
    T_p: int
    d_a: int
    embed_dim: int
    hidden: int
    T: int
    net: MlpParams = field(repr=False)

    @property
    def d_in(self) -> int:
        return self.d_o + self.T_p * self.d_a + self.embed_dim

    def copy(self) -> "DenoiserParams":
        return replace(self, net=self.net.copy())


def init_params(seed: int, d_o: int, T_p: int, d_a: int, hidden: int = 256,
                embed_dim: int = 128, T: int = 100) -> DenoiserParams:
    """Seeded init of the 3-hidden-layer denoiser."""
    for name, v in (("d_o", d_o), ("T_p", T_p), ("d_a", d_a),
                    ("hidden", hidden), ("T", T)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    d_in = d_o + T_p * d_a + embed_dim
    net = init_mlp(rng, [d_in, hidden, hidden, hidden, T_p * d_a])
    return DenoiserParams(d_o=d_o, T_p=T_p, d_a=d_a, embed_dim=embed_dim,
                          hidden=hidden, T=T, net=net)


def _denoiser_input(p: DenoiserParams, obs: np.ndarray, ak: np.ndarray,
                    k: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    ak = np.asarray(ak, dtype=np.float64)
    if obs.shape != (p.d_o,):
        raise ValueError(f"obs shape {obs.shape} != ({p.d_o},)")
    if ak.shape != (p.T_p, p.d_a):
        raise ValueError(f"ak shape {ak.shape} != ({p.T_p}, {p.d_a})")
    emb = sinusoidal_embed(k, p.embed_dim, p.T)
    return np.concatenate([obs, ak.ravel(), emb])


def denoiser_forward(p: DenoiserParams, obs: np.ndarray, ak: np.ndarray,
                     k: int) -> np.ndarray:
    """Noise estimate for one noisy window; returns (T_p, d_a)."""
    x = _denoiser_input(p, obs, ak, k)[None, :]
    y, _ = mlp_forward(p.net, x)
    return y[0].reshape(p.T_p, p.d_a)


def denoiser_backward(p: DenoiserParams, obs: np.ndarray, ak: np.ndarray,
                      k: int, eps: np.ndarray) -> tuple[float, MlpParams]:
    """Loss and exact parameter gradients for one sample.

    Loss is the entry-mean squared error between the noise estimate and
    the true noise; gradients come from the analytic backward pass.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (p.T_p, p.d_a):
        raise ValueError(f"eps shape {eps.shape} != ({p.T_p}, {p.d_a})")
    x = _denoiser_input(p, obs, ak, k)[None, :]
    y, cache = mlp_forward(p.net, x)
    diff = y[0].reshape(p.T_p, p.d_a) - eps
    loss = float(np.mean(diff * diff))
    dy = (2.0 / diff.size) * diff.ravel()[None, :]
    return loss, mlp_backward(p.net, cache, dy)


def denoiser_batch_grads(p: DenoiserParams, obs_b: np.ndarray, ak_b: np.ndarray,
                         ks: np.ndarray, eps_b: np.ndarray
                         ) -> tuple[np.ndarray, MlpParams]:
    """Per-sample losses and the gradient of their mean, in one pass.

    obs_b is (B, d_o), ak_b and eps_b are (B, T_p, d_a), ks is (B,).
    Equivalent to averaging denoiser_backward over the batch but runs as
    three matrix products.
    """
    B = obs_b.shape[0]
    table = _embed_table(p.embed_dim, p.T)
    x = np.concatenate([obs_b, ak_b.reshape(B, -1), table[ks - 1]], axis=1)
    y, cache = mlp_forward(p.net, x)
    diff = y - eps_b.reshape(B, -1)
    losses = np.mean(diff * diff, axis=1)
    dy = (2.0 / diff.shape[1]) * diff / B  # gradient of the batch-mean loss
    return losses, mlp_backward(p.net, cache, dy)


# -- checkpoint: magic + dims header + flat little-endian float64 payload ----


def save_checkpoint(path: str, p: DenoiserParams) -> None:
    """Layout: 8-byte magic; 7 little-endian int64 dims (d_o, T_p, d_a,
    embed_dim, hidden, n_hidden, T); then every layer's W and b raveled
    row-major as little-endian float64, in layer order."""
    dims = (p.d_o, p.T_p, p.d_a, p.embed_dim, p.hidden,
            len(p.net.weights) - 1, p.T)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<7q", *dims))
        for w, b in zip(p.net.weights, p.net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> DenoiserParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint (bad magic)")
    d_o, T_p, d_a, embed_dim, hidden, n_hidden, T = struct.unpack_from(
        "<7q", blob, 8)
    sizes = [d_o + T_p * d_a + embed_dim] + [hidden] * n_hidden + [T_p * d_a]
    off = 8 + 7 * 8
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        w = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
        off += n * 8
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += fan_out * 8
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(blob):
        raise ValueError(f"{path}: payload size mismatch")
    return DenoiserParams(d_o=d_o, T_p=T_p, d_a=d_a, embed_dim=embed_dim,
                          hidden=hidden, T=T, net=MlpParams(weights, biases))
