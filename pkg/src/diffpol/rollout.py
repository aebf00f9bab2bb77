"""Receding-horizon rollout, evaluation metrics, and speedup comparison.

A rollout repeatedly denoises a full action window from Gaussian noise,
executes the first few actions, and replans.  The budget per replan is
either fixed or supplied by the stage scheduler, and every denoiser
invocation is counted: the call count is the hardware-independent cost
metric, with wall time recorded separately and excluded from equality
so seeded rollouts stay bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ddim_reverse_step, ddpm_reverse_step, \
    respaced_schedule
from .env import MAX_STEPS, STAGES, EnvState, env_step, is_success, observe, \
    policy_features, reset_env
from .nets import DenoiserParams, denoiser_forward
from .scheduling import OracleStageClassifier, SchedulerState, make_scheduler, \
    scheduler_tick
from .stages import ScheduleEntry, ScheduleTable

EARLY_FRACTION = 0.6  # success this early in the budget counts as "early"

SAMPLER_KINDS = ("ddpm", "ddim")


def hvts_schedule_table() -> ScheduleTable:
    """Bench table for the push task: the contact-rich precision stage
    (push) gets the small-horizon, many-steps budget; everything else
    runs light."""
    entries = tuple(
        ScheduleEntry(name=n,
                      n_action_steps=8 if n == "push" else 16,
                      num_inference_steps=40 if n == "push" else 20)
        for n in STAGES)
    return ScheduleTable(entries=entries)


def denoise_action_window(params: DenoiserParams, sched: NoiseSchedule,
                          obs: np.ndarray, n_steps: int, kind: str,
                          rng: np.random.Generator,
                          forward_fn=None) -> np.ndarray:
    """Draw one action window by reverse diffusion from pure noise.

    kind "ddpm" walks a respaced chain with re-derived coefficients and
    per-step noise injection; "ddim" walks the same step subset of the
    original schedule deterministically.  The denoiser is always queried
    at original-schedule step indices.  n_steps must not exceed the
    training schedule length.
    """
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"kind must be one of {SAMPLER_KINDS}, got {kind!r}")
    if not (1 <= n_steps <= sched.T):
        raise ValueError(f"n_steps {n_steps} outside [1, {sched.T}]")
    if forward_fn is None:
        forward_fn = denoiser_forward
    obs = policy_features(obs)  # same lift the denoiser was trained on
    a = rng.standard_normal((params.T_p, params.d_a))
    derived, idx = respaced_schedule(sched, n_steps)
    if kind == "ddpm":
        for j in range(n_steps, 0, -1):
            eps_hat = forward_fn(params, obs, a, int(idx[j - 1]))
            z = rng.standard_normal(a.shape) if j > 1 else np.zeros_like(a)
            a = ddpm_reverse_step(derived, eps_hat, a, j, z)
    else:
        zero = np.zeros((params.T_p, params.d_a))
        for j in range(n_steps, 0, -1):
            k = int(idx[j - 1])
            k_prev = int(idx[j - 2]) if j > 1 else 0
            eps_hat = forward_fn(params, obs, a, k)
            a = ddim_reverse_step(sched, eps_hat, a, k, k_prev, 0.0, zero)
    return np.clip(a, -1.0, 1.0)


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    success_step: int | None
    steps: int
    denoiser_calls: int
    trace: tuple[tuple[int, int, int, int], ...]  # (step, stage, N_a, N_d)
    wall_time: float = field(compare=False, default=0.0)

    @property
    def early_success(self) -> bool:
        return (self.success and self.success_step is not None
                and self.success_step <= EARLY_FRACTION * MAX_STEPS)


def rollout(params: DenoiserParams, sched: NoiseSchedule, env_seed: int,
            schedule, sampler_kind: str = "ddpm", seed: int = 0,
            classifier=None, table: ScheduleTable | None = None,
            forward_fn=None, frame_buffer_len: int = 4) -> EpisodeResult:
    """Run one episode under a fixed or scheduled compute budget.

    ``schedule`` is either a fixed ``(N_a, N_d)`` pair or a
    SchedulerState; the scheduled form requires ``classifier`` and
    ``table`` and ticks the scheduler every control step, recording the
    active stage in the trace (-1 for fixed runs).  ``seed`` drives only
    the denoising noise; the initial condition comes from ``env_seed``.
    """
    fixed: tuple[int, int] | None = None
    scheduler: SchedulerState | None = None
    if isinstance(schedule, SchedulerState):
        scheduler = schedule
        if classifier is None or table is None:
            raise ValueError("scheduled rollout needs classifier and table")
    else:
        na, nd = schedule
        fixed = (int(na), int(nd))
    rng = np.random.default_rng(seed)
    env = reset_env(env_seed)
    frames: list[EnvState] = [env]
    pending: list[np.ndarray] = []
    trace: list[tuple[int, int, int, int]] = []
    calls = 0
    step = 0
    success_step: int | None = None
    t0 = time.perf_counter()
    done = False
    while not done:
        if scheduler is not None:
            na, nd, scheduler = scheduler_tick(scheduler, frames,
                                               classifier, table)
            stage = scheduler.active
        else:
            na, nd = fixed
            stage = -1
        if not pending:
            window = denoise_action_window(params, sched, observe(env), nd,
                                           sampler_kind, rng, forward_fn)
            calls += nd
            pending = [window[i] for i in range(min(na, window.shape[0]))]
        action = pending.pop(0)
        trace.append((step, stage, na, nd))
        env, _, done = env_step(env, action)
        frames.append(env)
        if len(frames) > frame_buffer_len:
            frames.pop(0)
        step += 1
        if success_step is None and is_success(env):
            success_step = step
    wall = time.perf_counter() - t0
    return EpisodeResult(success=is_success(env), success_step=success_step,
                         steps=step, denoiser_calls=calls,
                         trace=tuple(trace), wall_time=wall)


@dataclass(frozen=True)
class Metrics:
    success_rate: float
    early_success_rate: float
    mean_calls_per_step: float
    n_episodes: int
    seeds: tuple[int, ...]
    per_seed_success: tuple[float, ...]
    total_calls: int
    total_steps: int
    mean_wall_time: float = field(compare=False, default=0.0)

    @property
    def success_std(self) -> float:
        return float(np.std(self.per_seed_success))


def episode_seeds(seed: int, n_episodes: int) -> list[int]:
    """Environment seeds for one evaluation seed, disjoint across seeds."""
    return [10_000 * seed + i for i in range(n_episodes)]


def evaluate(params: DenoiserParams, sched: NoiseSchedule, n_episodes: int,
             schedule, sampler_kind: str = "ddpm",
             seeds: tuple[int, ...] = (0, 1, 2), gap: float = 0.2,
             forward_fn=None) -> Metrics:
    """Aggregate rollouts over n_episodes per evaluation seed.

    ``schedule`` is a fixed ``(N_a, N_d)`` pair, or a ScheduleTable to
    run the oracle-classified scheduler.  Episode initial conditions
    depend only on (seed, episode index), so two evaluations with the
    same seeds see identical environments.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if not seeds:
        raise ValueError("need at least one evaluation seed")
    use_table = isinstance(schedule, ScheduleTable)
    classifier = OracleStageClassifier() if use_table else None
    results: list[EpisodeResult] = []
    per_seed: list[float] = []
    for s in seeds:
        seed_results = []
        for env_seed in episode_seeds(s, n_episodes):
            if use_table:
                sub = make_scheduler(seed=env_seed, gap=gap)
                r = rollout(params, sched, env_seed, sub, sampler_kind,
                            seed=env_seed + 1, classifier=classifier,
                            table=schedule, forward_fn=forward_fn)
            else:
                r = rollout(params, sched, env_seed, schedule, sampler_kind,
                            seed=env_seed + 1, forward_fn=forward_fn)
            seed_results.append(r)
        per_seed.append(float(np.mean([r.success for r in seed_results])))
        results.extend(seed_results)
    total_calls = sum(r.denoiser_calls for r in results)
    total_steps = sum(r.steps for r in results)
    return Metrics(
        success_rate=float(np.mean([r.success for r in results])),
        early_success_rate=float(np.mean([r.early_success for r in results])),
        mean_calls_per_step=total_calls / total_steps,
        n_episodes=n_episodes,
        seeds=tuple(seeds),
        per_seed_success=tuple(per_seed),
        total_calls=total_calls,
        total_steps=total_steps,
        mean_wall_time=float(np.mean([r.wall_time for r in results])))


@dataclass(frozen=True)
class SpeedupReport:
    nfe_reduction: float
    success_delta: float  # baseline minus candidate, in rate points
    baseline_calls_per_step: float
    candidate_calls_per_step: float

    def row(self) -> str:
        return (f"{self.nfe_reduction:.2f}x NFE reduction, "
                f"success delta {self.success_delta:+.3f}")


def compare_speedup(baseline: Metrics, candidate: Metrics) -> SpeedupReport:
    """Denoiser-call reduction of candidate relative to baseline; both
    runs must cover identical seeds and episode counts."""
    if baseline.seeds != candidate.seeds \
            or baseline.n_episodes != candidate.n_episodes:
        raise ValueError("metrics were not computed on matching episodes")
    return SpeedupReport(
        nfe_reduction=baseline.mean_calls_per_step
        / candidate.mean_calls_per_step,
        success_delta=baseline.success_rate - candidate.success_rate,
        baseline_calls_per_step=baseline.mean_calls_per_step,
        candidate_calls_per_step=candidate.mean_calls_per_step)
