"""Dec-POMDP abstraction over token-sequence observations and actions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..errors import ConfigurationError, UsageError, ValidationError

END = 0
PAD = 1

ActionSeq = tuple  # tuple[int, ...]
Observation = tuple  # tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Ordered token names; token ``k`` is ``names[k]``."""

    names: tuple

    def __post_init__(self):
        if len(self.names) < 2:
            raise ConfigurationError("vocab needs at least 2 tokens")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("vocab token names must be distinct")
        if self.names[END] != "<end>" or self.names[PAD] != "<pad>":
            raise ConfigurationError("token 0 must be <end> and token 1 must be <pad>")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @classmethod
    def build(cls, *groups: Sequence[str]) -> "Vocab":
        names = ["<end>", "<pad>"]
        for g in groups:
            names.extend(g)
        return cls(tuple(names))

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def tokens(self) -> range:
        return range(len(self.names))

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"unknown token name {name!r}") from None

    def ids(self, names: Sequence[str]) -> tuple:
        return tuple(self.id(n) for n in names)

    def render(self, tokens: Sequence[int]) -> str:
        return " ".join(self.names[t] for t in tokens)


@dataclass(frozen=True)
class TaskInstance:
    env_kind: str
    payload: dict
    horizon: int
    n_agents: int

    def __post_init__(self):
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ConfigurationError(f"horizon must be an integer >= 1, got {self.horizon!r}")
        if not isinstance(self.n_agents, int) or self.n_agents < 1:
            raise ConfigurationError(f"n_agents must be an integer >= 1, got {self.n_agents!r}")


@dataclass(frozen=True)
class GlobalInfo:
    """Training-time side information m_t (turn index and task progress)."""

    turn: int
    horizon: int
    progress: float = 0.0
    last_reward_norm: float = 0.0


@dataclass
class EnvState:
    task: TaskInstance
    seed: int
    sys: Any
    usr: Any = None
    turn: int = 0
    terminated: bool = False
    progress: float = 0.0
    last_reward: float = 0.0


@dataclass
class StepOutcome:
    reward: float
    next_obs: tuple
    global_info: GlobalInfo
    terminated: bool
    info: dict = field(default_factory=dict)


def validate_action(tokens, vocab_size: int, max_len: int, allowed=None) -> tuple:
    """Check an action against vocab and length cap; oversize is never truncated."""
    tokens = tuple(int(t) for t in tokens)
    if not 1 <= len(tokens) <= max_len:
        raise ValidationError(f"action length {len(tokens)} outside [1, {max_len}]")
    for pos, t in enumerate(tokens):
        if not 0 <= t < vocab_size:
            raise ValidationError(f"token {t} outside vocab of size {vocab_size}")
        if t == END and pos != len(tokens) - 1:
            raise ValidationError("<end> may only appear as the final token")
        if allowed is not None and t not in allowed:
            raise ValidationError(f"token {t} is not in this agent's action set")
    return tokens


def content(tokens: Sequence[int]) -> tuple:
    """Tokens with <end>/<pad> stripped."""
    return tuple(t for t in tokens if t != END and t != PAD)


class DecPOMDPEnv:
    """Base class: subclasses implement ``_initial`` and ``_transition``.

    Environments are stateless; everything episode-specific lives in the
    ``EnvState`` returned by ``reset`` and mutated by ``step``.
    """

    kind = "abstract"
    has_early_termination = True

    def __init__(self, vocab: Vocab, max_action_len: int, context_len: int, reward_cap: float = 1.0):
        if max_action_len < 1:
            raise ConfigurationError("max_action_len must be >= 1")
        self.vocab = vocab
        self.max_action_len = max_action_len
        self.context_len = context_len
        self.reward_cap = reward_cap

    # -- subclass hooks -------------------------------------------------
    def check_task(self, task: TaskInstance) -> None:
        if task.env_kind != self.kind:
            raise ConfigurationError(f"env_kind: expected {self.kind!r}, got {task.env_kind!r}")

    def _initial(self, task: TaskInstance, seed: int):
        """Return (observations, sys_part, usr_part)."""
        raise NotImplementedError

    def _transition(self, state: EnvState, joint_action, rng):
        """Return (reward, next_obs, progress, terminate_early, info)."""
        raise NotImplementedError

    def action_tokens(self, agent: int) -> tuple:
        raise NotImplementedError

    def optimal_return(self, task: TaskInstance, gamma: float = 1.0) -> float:
        raise NotImplementedError

    # -- public API -----------------------------------------------------
    def reset(self, task: TaskInstance, seed: int):
        self.check_task(task)
        obs, sys_part, usr_part = self._initial(task, int(seed))
        obs = tuple(self._check_obs(o) for o in obs)
        state = EnvState(task=task, seed=int(seed), sys=sys_part, usr=usr_part)
        return obs, GlobalInfo(turn=0, horizon=task.horizon), state

    def step(self, state: EnvState, joint_action, rng: np.random.Generator | None = None) -> StepOutcome:
        if state.terminated:
            raise UsageError("episode already terminated; call reset")
        n = state.task.n_agents
        if len(joint_action) != n:
            raise UsageError(f"expected {n} actions, got {len(joint_action)}")
        joint_action = tuple(
            validate_action(a, self.vocab.size, self.max_action_len, self.allowed_set(i, state.task))
            for i, a in enumerate(joint_action)
        )
        reward, obs, progress, early, info = self._transition(state, joint_action, rng)
        reward = float(reward)
        if not math.isfinite(reward):
            raise ValidationError(f"non-finite reward {reward}")
        obs = tuple(self._check_obs(o) for o in obs)
        state.turn += 1
        state.progress = max(state.progress, float(progress))
        state.last_reward = reward
        terminated = bool(early) or state.turn >= state.task.horizon
        state.terminated = terminated
        info.setdefault("early", bool(early) and state.turn < state.task.horizon)
        g = GlobalInfo(
            turn=state.turn,
            horizon=state.task.horizon,
            progress=state.progress,
            last_reward_norm=reward / self.reward_cap,
        )
        return StepOutcome(reward, obs, g, terminated, info)

    def allowed_set(self, agent: int, task: TaskInstance | None = None) -> frozenset:
        """Action tokens for ``agent``; a task payload may narrow them via ``action_tokens``."""
        if task is not None and "action_tokens" in task.payload:
            return frozenset(task.payload["action_tokens"][agent])
        cache = self.__dict__.setdefault("_allowed_cache", {})
        if agent not in cache:
            cache[agent] = frozenset(self.action_tokens(agent))
        return cache[agent]

    def _check_obs(self, obs) -> tuple:
        obs = tuple(int(t) for t in obs)
        if len(obs) > self.context_len:
            raise ValidationError(f"observation of {len(obs)} tokens exceeds context {self.context_len}")
        return obs
