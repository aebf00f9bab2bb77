"""Adaptive training loop for the action denoiser.

Two mechanisms sit on top of plain denoiser regression, both driven by
batch-normalized loss signals:

* a learnable timestep sampler: a small MLP maps each step's sinusoidal
  embedding to a logit, draws are uniform for a warmup period and then
  follow the softmax, and the net is updated by a score-function step on
  ``-r * log pi(k) - entropy_coef * H(pi)``;
* per-trajectory replay weights: an exponential moving average toward
  ``reward + 1`` with a hard floor, renormalized to mean one, with the
  blend factor cosine-annealed over the run.

``mode="uniform"`` disables both and gives the plain baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import make_noise_schedule
from .env import DemoDataset, policy_features
from .nets import (
    AdamState,
    DenoiserParams,
    MlpParams,
    _embed_table,
    denoiser_batch_grads,
    init_mlp,
    init_params,
    mlp_backward,
    mlp_forward,
    optimizer_step,
)

WEIGHT_FLOOR = 1e-4


# -- reward shaping ----------------------------------------------------------


def normalize_rewards(losses: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-batch z-scores: (l - mean) / (population std + eps)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("losses must be a non-empty 1-d array")
    mu = losses.mean()
    sd = losses.std()
    return (losses - mu) / (sd + eps)


def anneal_alpha(step: int, total_steps: int, alpha_max: float = 0.1,
                 alpha_min: float = 0.01) -> float:
    """Cosine decay of the weight-update blend factor over the run."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
    return alpha_min + (alpha_max - alpha_min) * frac


# -- learnable timestep sampler ----------------------------------------------


@dataclass
class TimestepSampler:
    T: int
    embed_dim: int
    warmup: int
    entropy_coef: float
    net: MlpParams = field(repr=False)
    adam: AdamState = field(repr=False)
    _logits: np.ndarray | None = field(default=None, repr=False)


def make_timestep_sampler(seed: int, T: int, warmup: int = 500,
                          entropy_coef: float = 10.0, hidden: int = 256,
                          embed_dim: int = 128,
                          lr: float = 1e-3) -> TimestepSampler:
    rng = np.random.default_rng(seed)
    net = init_mlp(rng, [embed_dim, hidden, hidden, hidden, 1])
    return TimestepSampler(T=T, embed_dim=embed_dim, warmup=warmup,
                           entropy_coef=entropy_coef, net=net,
                           adam=AdamState(lr=lr))


def _sampler_logits(ts: TimestepSampler) -> np.ndarray:
    if ts._logits is None:
        x = _embed_table(ts.embed_dim, ts.T)
        y, _ = mlp_forward(ts.net, x)
        ts._logits = y[:, 0]
    return ts._logits


def sampler_distribution(ts: TimestepSampler) -> np.ndarray:
    """Current draw probabilities over steps 1..T (softmax of the logits)."""
    z = _sampler_logits(ts)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def sampler_entropy(ts: TimestepSampler) -> float:
    p = sampler_distribution(ts)
    return float(-np.sum(p * np.log(np.maximum(p, 1e-300))))


def sample_timestep(ts: TimestepSampler, rng: np.random.Generator,
                    step_count: int) -> int:
    """Draw a step index in 1..T: uniform while step_count < warmup, from
    the learned distribution afterwards."""
    if step_count < ts.warmup:
        return int(rng.integers(1, ts.T + 1))
    p = sampler_distribution(ts)
    return int(rng.choice(ts.T, p=p)) + 1


def _policy_entropy_grad(ts: TimestepSampler, ks: np.ndarray,
                         rs: np.ndarray) -> np.ndarray:
    """d/d logits of  mean_e[-r_e log pi(k_e)] - entropy_coef * H(pi)."""
    p = sampler_distribution(ts)
    dz = np.zeros(ts.T)
    for k, r in zip(ks, rs):
        dz += r * p
        dz[k - 1] -= r
    dz /= len(ks)
    logp = np.log(np.maximum(p, 1e-300))
    H = float(-np.sum(p * logp))
    dz += ts.entropy_coef * p * (logp + H)
    return dz


def _apply_sampler_grad(ts: TimestepSampler, dz: np.ndarray,
                        lr: float | None) -> TimestepSampler:
    x = _embed_table(ts.embed_dim, ts.T)
    _, cache = mlp_forward(ts.net, x)
    grads = mlp_backward(ts.net, cache, dz[:, None])
    st = ts.adam
    if lr is not None and lr != st.lr:
        st = replace(st, lr=lr)
    ts.net, ts.adam = optimizer_step(ts.net, grads, st)
    ts._logits = None
    return ts


def sampler_update(ts: TimestepSampler, k: int, r: float,
                   lr: float | None = None) -> TimestepSampler:
    """One score-function step for a single (step, reward) pair."""
    if not (1 <= k <= ts.T):
        raise ValueError(f"step index {k} outside [1, {ts.T}]")
    dz = _policy_entropy_grad(ts, np.array([k]), np.array([float(r)]))
    return _apply_sampler_grad(ts, dz, lr)


def sampler_update_batch(ts: TimestepSampler, ks: np.ndarray, rs: np.ndarray,
                         lr: float | None = None) -> TimestepSampler:
    """One optimizer step on the per-batch mean of the per-sample
    objective (policy term averaged, entropy term once)."""
    ks = np.asarray(ks, dtype=np.int64)
    rs = np.asarray(rs, dtype=np.float64)
    if ks.shape != rs.shape or ks.ndim != 1 or ks.size == 0:
        raise ValueError("ks and rs must be matching non-empty 1-d arrays")
    if np.any((ks < 1) | (ks > ts.T)):
        raise ValueError("step indices outside [1, T]")
    dz = _policy_entropy_grad(ts, ks, rs)
    return _apply_sampler_grad(ts, dz, lr)


def sampler_objective(ts: TimestepSampler, k: int, r: float) -> float:
    """The per-sample objective value (used by gradient-check tests)."""
    p = sampler_distribution(ts)
    logp = np.log(np.maximum(p, 1e-300))
    H = float(-np.sum(p * logp))
    return float(-r * logp[k - 1] - ts.entropy_coef * H)


# -- per-trajectory replay weights -------------------------------------------


@dataclass
class TrajectoryWeights:
    w: np.ndarray

    @property
    def n(self) -> int:
        return self.w.size


def make_traj_weights(n: int) -> TrajectoryWeights:
    if n < 1:
        raise ValueError("need at least one trajectory")
    return TrajectoryWeights(np.ones(n))


def ema_weight(w_i: float, r_i: float, alpha: float) -> float:
    """Single-weight blend toward reward + 1 (before floor and renorm)."""
    return (1.0 - alpha) * w_i + alpha * (r_i + 1.0)


def _renormalize(w: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Scale to mean one while keeping every entry at or above the floor.

    Entries pinned at the floor keep it exactly; the remaining mass is
    rescaled so the total is n.  Iterates because rescaling can push new
    entries under the floor; the pinned set only grows, so this ends.
    """
    w = np.maximum(w, floor)
    free = np.ones(w.size, dtype=bool)
    for _ in range(w.size):
        target = w.size - floor * np.count_nonzero(~free)
        s = w[free].sum()
        if s <= 0.0 or target <= 0.0:
            break
        w[free] *= target / s
        sunk = free & (w < floor)
        if not sunk.any():
            break
        w[sunk] = floor
        free &= ~sunk
    return w


def update_traj_weight(tw: TrajectoryWeights, i: int, r_i: float,
                       alpha: float) -> TrajectoryWeights:
    """EMA update of one weight, then floor and mean-one renormalization."""
    if not (0 <= i < tw.n):
        raise IndexError(f"trajectory index {i} outside [0, {tw.n})")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    w = tw.w.copy()
    w[i] = ema_weight(w[i], r_i, alpha)
    return TrajectoryWeights(_renormalize(w))


def update_traj_weights_batch(tw: TrajectoryWeights, idxs: np.ndarray,
                              rs: np.ndarray,
                              alpha: float) -> TrajectoryWeights:
    """EMA updates for every drawn trajectory, then one floor + renorm."""
    w = tw.w.copy()
    for i, r in zip(idxs, rs):
        w[i] = ema_weight(w[i], float(r), alpha)
    return TrajectoryWeights(_renormalize(w))


def weighted_sample_index(tw: TrajectoryWeights,
                          rng: np.random.Generator) -> int:
    """Draw one trajectory index with probability proportional to weight."""
    return int(rng.choice(tw.n, p=tw.w / tw.w.sum()))


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    seed: int = 0
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    warmup: int = 500
    entropy_coef: float = 10.0
    lr: float = 1e-3
    sampler_lr: float = 1e-3
    alpha_max: float = 0.1
    alpha_min: float = 0.01
    reward_eps: float = 1e-8
    negate_reward: bool = False
    hidden: int = 256
    embed_dim: int = 128
    sampler_hidden: int = 256
    eval_every: int = 0
    snapshot_every: int = 1000

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.total_steps > 0 and self.warmup >= self.total_steps:
            raise ValueError("warmup must be < total_steps")


@dataclass
class TrainReport:
    mode: str
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_success: list[float] = field(default_factory=list)
    sampler_snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    weight_snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    final_sampler_probs: np.ndarray | None = None
    final_traj_weights: np.ndarray | None = None

    def to_csv(self, path: str) -> None:
        """Columns: step, loss, eval_success (blank off eval steps),
        sampler_entropy."""
        evals = dict(zip(self.eval_steps, self.eval_success))
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "loss", "eval_success", "sampler_entropy"])
            for s, l, h in zip(self.steps, self.losses, self.entropies):
                ev = f"{evals[s]:.17g}" if s in evals else ""
                wr.writerow([s, f"{l:.17g}", ev, f"{h:.17g}"])

    def snapshots_to_csv(self, path: str) -> None:
        """Wide rows: step then the full draw distribution at that step."""
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            if self.sampler_snapshots:
                T = self.sampler_snapshots[0][1].size
                wr.writerow(["step"] + [f"p{k}" for k in range(1, T + 1)])
                for s, p in self.sampler_snapshots:
                    wr.writerow([s] + [f"{x:.17g}" for x in p])
            else:
                wr.writerow(["step"])


def train(config: TrainConfig, dataset: DemoDataset, mode: str,
          eval_fn=None) -> tuple[DenoiserParams, TrainReport]:
    """Run the denoiser regression loop in "uniform" or "aln" mode.

    "uniform": timesteps and trajectories drawn uniformly.  "aln": both
    adaptive mechanisms active after the warmup.  ``eval_fn(params)``,
    when given, is called every ``config.eval_every`` steps and its
    return value recorded in the report.
    """
    if mode not in ("uniform", "aln"):
        raise ValueError(f"mode must be 'uniform' or 'aln', got {mode!r}")
    if dataset.n_traj == 0:
        raise ValueError("dataset has no trajectories")

    rng = np.random.default_rng(config.seed)
    sched = make_noise_schedule(config.T, config.beta_start, config.beta_end)
    # the denoiser conditions on the lifted observation, not the raw one
    d_feat = policy_features(np.zeros(dataset.d_o)).size
    params = init_params(config.seed, d_o=d_feat, T_p=dataset.T_p,
                         d_a=dataset.d_a, hidden=config.hidden,
                         embed_dim=config.embed_dim, T=config.T)
    adam = AdamState(lr=config.lr)
    adaptive = mode == "aln"
    ts = make_timestep_sampler(config.seed + 1, config.T,
                               warmup=config.warmup,
                               entropy_coef=config.entropy_coef,
                               hidden=config.sampler_hidden,
                               embed_dim=config.embed_dim,
                               lr=config.sampler_lr)
    tw = make_traj_weights(dataset.n_traj)
    report = TrainReport(mode=mode)
    B = config.batch_size
    uniform_entropy = float(np.log(config.T))

    for step in range(config.total_steps):
        if adaptive:
            idxs = np.array([weighted_sample_index(tw, rng) for _ in range(B)])
        else:
            idxs = rng.integers(0, dataset.n_traj, size=B)
        obs_b = np.empty((B, dataset.d_o))
        a0_b = np.empty((B, dataset.T_p, dataset.d_a))
        for e, ti in enumerate(idxs):
            traj = dataset.trajectories[ti]
            wi = int(rng.integers(traj.n_windows))
            obs_b[e] = traj.obs[wi]
            a0_b[e] = traj.actions[wi]
        if adaptive:
            ks = np.array([sample_timestep(ts, rng, step) for _ in range(B)])
        else:
            ks = rng.integers(1, config.T + 1, size=B)
        eps_b = rng.standard_normal(a0_b.shape)
        ab = sched.alpha_bar[ks - 1][:, None, None]
        ak_b = np.sqrt(ab) * a0_b + np.sqrt(1.0 - ab) * eps_b

        losses, grads = denoiser_batch_grads(params, policy_features(obs_b),
                                             ak_b, ks, eps_b)
        params.net, adam = optimizer_step(params.net, grads, adam)

        if adaptive and step >= config.warmup:
            rs = normalize_rewards(losses, config.reward_eps)
            if config.negate_reward:
                rs = -rs
            sampler_update_batch(ts, ks, rs)
            alpha = anneal_alpha(step, config.total_steps,
                                 config.alpha_max, config.alpha_min)
            tw = update_traj_weights_batch(tw, idxs, rs, alpha)

        report.steps.append(step + 1)
        report.losses.append(float(losses.mean()))
        report.entropies.append(sampler_entropy(ts) if adaptive
                                else uniform_entropy)
        if config.snapshot_every > 0 and (step + 1) % config.snapshot_every == 0:
            report.sampler_snapshots.append(
                (step + 1, sampler_distribution(ts).copy()))
            report.weight_snapshots.append((step + 1, tw.w.copy()))
        if eval_fn is not None and config.eval_every > 0 \
                and (step + 1) % config.eval_every == 0:
            report.eval_steps.append(step + 1)
            report.eval_success.append(float(eval_fn(params)))

    report.final_sampler_probs = sampler_distribution(ts).copy()
    report.final_traj_weights = tw.w.copy()
    return params, report
