"""Linear value heads over hashed history features, TD errors and semi-gradient updates.

A decentralized critic scores one agent's local history (optionally with
the global information m_t); the centralized critic scores the
concatenation of every agent's history features and m_t.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core_env.base import GlobalInfo
from .errors import ConfigurationError, NumericFault, ValidationError
from .seqpolicy import LocalHistory, context_features


def encode_global(m: GlobalInfo) -> np.ndarray:
    """one-hot(turn, H+1) ⧺ [progress, last_reward_norm]."""
    if not 0 <= m.turn <= m.horizon:
        raise ValidationError(f"turn {m.turn} outside [0, {m.horizon}]")
    v = np.zeros(m.horizon + 3)
    v[m.turn] = 1.0
    v[-2] = m.progress
    v[-1] = m.last_reward_norm
    return v


def critic_dim(kind: str, n_agents: int, horizon: int, d_agent: int, use_global: bool) -> int:
    g = horizon + 3 if use_global else 0
    return (1 if kind == "dc" else n_agents) * d_agent + g


@dataclass(frozen=True, eq=False)
class CriticParams:
    weights: np.ndarray
    hash_seed: int
    kind: str  # "dc" or "cc"
    agent: int | None  # owning agent for "dc"
    n_agents: int
    horizon: int
    d_agent: int = 512
    window: int = 16
    use_global: bool = True

    def __post_init__(self):
        if self.kind not in ("dc", "cc"):
            raise ConfigurationError(f"critic kind must be 'dc' or 'cc', got {self.kind!r}")
        if self.kind == "dc" and (self.agent is None or not 0 <= self.agent < self.n_agents):
            raise ConfigurationError(f"dc critic needs an agent index in [0, {self.n_agents})")
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ConfigurationError(f"critic weights have shape {w.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("critic weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return critic_dim(self.kind, self.n_agents, self.horizon, self.d_agent, self.use_global)

    @classmethod
    def zeros(cls, kind: str, n_agents: int, horizon: int, agent=None, hash_seed: int = 1, d_agent: int = 512,
              use_global: bool = True, window: int = 16):
        w = np.zeros(critic_dim(kind, n_agents, horizon, d_agent, use_global))
        return cls(w, hash_seed, kind, agent, n_agents, horizon, d_agent, window, use_global)

    def with_weights(self, w) -> "CriticParams":
        return dataclasses.replace(self, weights=np.array(w, dtype=np.float64))


def history_features(params: CriticParams, history: LocalHistory) -> np.ndarray:
    """ψ(h): the policy encoder with the critic's own hash seed."""
    return context_features(history.flat(), history.turn, hash_seed=params.hash_seed, d=params.d_agent,
                            window=params.window, turn_slots=min(8, params.horizon + 1))


def _global_block(params: CriticParams, m: GlobalInfo):
    if not params.use_global:
        return []
    if m.horizon != params.horizon:
        raise ConfigurationError(f"global info horizon {m.horizon} != critic horizon {params.horizon}")
    return [encode_global(m)]


def dc_features(params: CriticParams, history: LocalHistory, m: GlobalInfo) -> np.ndarray:
    if params.kind != "dc":
        raise ConfigurationError("dc_features needs a decentralized critic")
    return np.concatenate([history_features(params, history)] + _global_block(params, m))


def cc_features(params: CriticParams, joint: Sequence[LocalHistory], m: GlobalInfo) -> np.ndarray:
    if params.kind != "cc":
        raise ConfigurationError("cc_features needs a centralized critic")
    if len(joint) != params.n_agents:
        raise ConfigurationError(f"joint history has {len(joint)} agents, critic expects {params.n_agents}")
    return np.concatenate([history_features(params, h) for h in joint] + _global_block(params, m))


def dc_value(params: CriticParams, history: LocalHistory, m: GlobalInfo) -> float:
    return float(params.weights @ dc_features(params, history, m))


def cc_value(params: CriticParams, joint: Sequence[LocalHistory], m: GlobalInfo) -> float:
    return float(params.weights @ cc_features(params, joint, m))


class TDSample(NamedTuple):
    value: float
    next_value: float
    reward: float
    terminal: bool

    def target(self, gamma: float) -> float:
        return self.reward + (0.0 if self.terminal else gamma * self.next_value)


def td_error(sample: TDSample, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
    return sample.target(gamma) - sample.value


class CriticStep(NamedTuple):
    params: CriticParams
    loss_before: float
    loss_after: float
    targets: np.ndarray


def critic_update(params: CriticParams, batch, alpha_v: float, gamma: float = 1.0) -> CriticStep:
    """One semi-gradient step on the mean squared TD error.

    ``batch`` holds ``(features, TDSample)`` pairs. The bootstrap target
    r + γ·next_value is read from the sample and held fixed; the prediction
    is recomputed from the current weights, so repeated steps on a frozen
    batch descend the least-squares objective.
    """
    if not alpha_v > 0:
        raise ValidationError(f"alpha_v must be positive, got {alpha_v}")
    if not batch:
        raise ValidationError("critic batch is empty")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    if X.shape[1] != params.dim:
        raise ConfigurationError(f"feature dimension {X.shape[1]} != critic dimension {params.dim}")
    y = np.array([s.target(gamma) for _, s in batch])
    w = params.weights
    delta = y - X @ w
    with np.errstate(over="ignore", invalid="ignore"):
        new_w = w + alpha_v * (delta @ X) / len(batch)
    if not np.all(np.isfinite(new_w)):
        raise NumericFault(f"critic update is non-finite (alpha_v={alpha_v}, max |delta|={np.max(np.abs(delta)):.3g})")
    after = y - X @ new_w
    return CriticStep(params.with_weights(new_w), float(np.mean(delta**2)), float(np.mean(after**2)), y)


def lstsq_loss(X: np.ndarray, y: np.ndarray) -> float:
    """Minimum of mean (y − Xw)² over w."""
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ w
    return float(np.mean(r**2))


def max_stable_step(X: np.ndarray) -> float:
    """1/λ_max of the batch second-moment matrix (monotone-descent step size)."""
    lam = np.linalg.eigvalsh(X.T @ X / len(X))[-1] if X.shape[1] <= X.shape[0] else \
        np.linalg.eigvalsh(X @ X.T / len(X))[-1]
    return 1.0 / lam if lam > 0 else math.inf
