"""Enumerable micro-environments used by the estimator harnesses.

Both use single-token actions over a tiny vocabulary, so every joint
trajectory can be listed. Tokens are plain integers; the reserved names of
tokens 0 and 1 carry no meaning here.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, UsageError
from .base import DecPOMDPEnv, TaskInstance, Vocab


def _micro_vocab(size: int) -> Vocab:
    return Vocab.build([f"t{k}" for k in range(2, size)])


class TableEnv(DecPOMDPEnv):
    """Rewards looked up from a table keyed by the full joint-action history.

    ``payload["rewards"][t]`` is a flat list of length ``V**(n*(t+1))``; the
    index is the joint actions of turns ``0..t`` read as a base-``V`` number,
    most significant first. Alternatively ``payload["reward_seed"]`` fills the
    table with seeded uniform draws on [0, 1]. ``payload["terminate"]``
    optionally lists joint-history indices of turn ``t`` that end the episode,
    one list per turn. Each agent observes the partner's last token.
    """

    kind = "Table"

    def __init__(self, vocab_size: int = 2, max_action_len: int = 1):
        if max_action_len != 1:
            raise ConfigurationError("TableEnv supports single-token actions only")
        super().__init__(_micro_vocab(vocab_size), max_action_len, context_len=2)
        self.V = vocab_size

    def check_task(self, task: TaskInstance) -> None:
        super().check_task(task)
        p = task.payload
        if ("rewards" in p) == ("reward_seed" in p):
            raise ConfigurationError("payload: give exactly one of rewards, reward_seed")
        if "rewards" in p:
            r = p["rewards"]
            if not isinstance(r, list) or len(r) != task.horizon:
                raise ConfigurationError(f"payload.rewards: expected {task.horizon} per-turn tables")
            for t, tab in enumerate(r):
                need = self.V ** (task.n_agents * (t + 1))
                if len(tab) != need:
                    raise ConfigurationError(f"payload.rewards[{t}]: expected {need} entries, got {len(tab)}")
        term = p.get("terminate")
        if term is not None and (not isinstance(term, list) or len(term) != task.horizon):
            raise ConfigurationError(f"payload.terminate: expected {task.horizon} lists")

    def tables(self, task: TaskInstance) -> list:
        p = task.payload
        if "rewards" in p:
            return [np.asarray(t, dtype=float) for t in p["rewards"]]
        key = (p["reward_seed"], task.n_agents, task.horizon)
        cache = self.__dict__.setdefault("_tables", {})
        if key not in cache:
            rng = np.random.default_rng(p["reward_seed"])
            cache[key] = [rng.uniform(0.0, 1.0, size=self.V ** (task.n_agents * (t + 1))) for t in range(task.horizon)]
        return cache[key]

    def action_tokens(self, agent: int) -> tuple:
        return tuple(range(self.V))

    def _initial(self, task, seed):
        n = task.n_agents
        obs = tuple((i % self.V,) for i in range(n))
        term = task.payload.get("terminate") or [[] for _ in range(task.horizon)]
        return obs, {"tables": self.tables(task), "index": 0, "terminate": [set(x) for x in term]}, None

    def _transition(self, state, joint_action, rng):
        s = state.sys
        n = state.task.n_agents
        idx = s["index"]
        for a in joint_action:
            idx = idx * self.V + a[0]
        s["index"] = idx
        t = state.turn
        reward = float(s["tables"][t][idx])
        obs = tuple((joint_action[(i + 1) % n][0],) for i in range(n))
        early = idx in s["terminate"][t]
        return reward, obs, (t + 1) / state.task.horizon, early, {}


class NoiseEnv(DecPOMDPEnv):
    """Reward 0 before the last turn and an exogenous N(mean, sd^2) draw at the last turn.

    With ``shared=False`` the draw comes from the step's rng stream, so
    sibling branches of a rollout tree see independent noise. With
    ``shared=True`` it comes from a generator seeded by the episode seed,
    so every leaf of one tree sees the same value.
    """

    kind = "Noise"
    has_early_termination = False

    def __init__(self, vocab_size: int = 2, shared: bool = False, mean: float = 0.0, sd: float = 1.0):
        super().__init__(_micro_vocab(vocab_size), max_action_len=1, context_len=2, reward_cap=1.0)
        self.V = vocab_size
        self.shared = shared
        self.mean = mean
        self.sd = sd

    def action_tokens(self, agent: int) -> tuple:
        return tuple(range(self.V))

    def _initial(self, task, seed):
        return tuple((i % self.V,) for i in range(task.n_agents)), {"seed": seed}, None

    def _transition(self, state, joint_action, rng):
        n = state.task.n_agents
        obs = tuple((joint_action[(i + 1) % n][0],) for i in range(n))
        last = state.turn == state.task.horizon - 1
        if not last:
            return 0.0, obs, 0.0, False, {}
        if self.shared:
            rng = np.random.default_rng(state.sys["seed"])
        elif rng is None:
            raise UsageError("NoiseEnv.step needs an rng for the independent-noise draw")
        return self.mean + self.sd * float(rng.standard_normal()), obs, 1.0, False, {}
