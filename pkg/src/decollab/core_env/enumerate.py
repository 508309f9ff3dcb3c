"""Exhaustive trajectory enumeration for small deterministic environments."""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

from ..errors import CapExceeded
from .base import END, DecPOMDPEnv, TaskInstance

DEFAULT_CAP = 10**6


def action_space(allowed, max_len: int) -> list:
    """Every action an autoregressive policy can emit over ``allowed`` tokens.

    Generation stops at END or at ``max_len``, so the support is the
    END-terminated sequences shorter than ``max_len`` plus every END-free or
    END-final sequence of exactly ``max_len`` tokens. Ordered by length, then
    lexicographically.
    """
    allowed = sorted(set(allowed))
    body = [t for t in allowed if t != END]
    has_end = END in allowed
    out = []
    for L in range(1, max_len + 1):
        for prefix in itertools.product(body, repeat=L - 1):
            if L < max_len:
                if has_end:
                    out.append(prefix + (END,))
            else:
                out.extend(prefix + (t,) for t in allowed)
    return out


@dataclass(frozen=True)
class Trajectory:
    """One complete joint trajectory; ``obs[t]`` is the joint observation before turn t."""

    obs: tuple
    actions: tuple  # actions[t] = joint action at turn t
    rewards: tuple
    globals: tuple  # GlobalInfo before each turn plus the final one
    early: bool

    @property
    def turns(self) -> int:
        return len(self.actions)

    def local_history(self, agent: int, t: int) -> tuple:
        """h_{i,t} as an alternating tuple (o_0, a_0, ..., o_t)."""
        out = []
        for k in range(t):
            out.append(self.obs[k][agent])
            out.append(self.actions[k][agent])
        out.append(self.obs[t][agent])
        return tuple(out)


def joint_action_spaces(env: DecPOMDPEnv, task: TaskInstance) -> list:
    return [action_space(env.allowed_set(i, task), env.max_action_len) for i in range(task.n_agents)]


def count_bound(env: DecPOMDPEnv, task: TaskInstance) -> int:
    per_turn = 1
    for space in joint_action_spaces(env, task):
        per_turn *= len(space)
    return per_turn**task.horizon


def enumerate_trajectories(env: DecPOMDPEnv, task: TaskInstance, cap: int = DEFAULT_CAP, seed: int = 0) -> list:
    """All reachable joint trajectories in a deterministic depth-first order.

    Refuses with ``CapExceeded`` when the no-termination count exceeds ``cap``.
    The environment must be deterministic given (task, seed, actions).
    """
    est = count_bound(env, task)
    if est > cap:
        raise CapExceeded(est, cap)
    spaces = joint_action_spaces(env, task)
    joint = list(itertools.product(*spaces))
    obs0, g0, state0 = env.reset(task, seed)
    out = []

    def walk(state, obs, acts, rews, globs):
        for ja in joint:
            st = copy.deepcopy(state)
            res = env.step(st, ja)
            o2 = obs + (res.next_obs,)
            a2 = acts + (ja,)
            r2 = rews + (res.reward,)
            g2 = globs + (res.global_info,)
            if res.terminated:
                out.append(Trajectory(o2, a2, r2, g2, bool(res.info.get("early"))))
            else:
                walk(st, o2, a2, r2, g2)

    walk(state0, (obs0,), (), (), (g0,))
    return out
