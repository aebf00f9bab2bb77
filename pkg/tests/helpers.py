"""Shared test utilities: oracle denoisers built from the scripted expert."""

import numpy as np

from diffpol.env import D_A, T_P, EnvState, env_step, scripted_expert
from diffpol.diffusion import NoiseSchedule


def expert_window(obs: np.ndarray) -> np.ndarray:
    """The next T_P expert actions from the state encoded in obs."""
    st = EnvState(agent=obs[0:2].copy(), block=obs[2:4].copy(),
                  target=obs[4:6].copy())
    acts = np.empty((T_P, D_A))
    for i in range(T_P):
        a = scripted_expert(st)
        acts[i] = a
        st, _, _ = env_step(st, a)
    return acts


def expert_forward_fn(sched: NoiseSchedule):
    """A denoiser that always points the chain at the expert's window.

    Returns eps_hat such that the clean-sample reconstruction at any
    step equals the expert action window for the current observation, so
    a deterministic sampler reproduces the expert exactly.
    """

    def forward(params, obs, ak, k):
        target = expert_window(obs)
        ab = sched.alpha_bar[k - 1]
        return (ak - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)

    return forward


def zero_forward_fn(sched: NoiseSchedule):
    """A denoiser whose clean-sample reconstruction is always zero."""

    def forward(params, obs, ak, k):
        return ak / np.sqrt(1.0 - sched.alpha_bar[k - 1])

    return forward
