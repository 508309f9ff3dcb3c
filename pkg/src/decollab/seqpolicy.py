"""Autoregressive linear-softmax policies over hashed n-gram context features.

A policy scores the next token with ``W @ f / T`` where ``f`` counts hashed
unigrams and bigrams of the last ``window`` tokens of (history ⧺ prefix),
plus a one-hot turn indicator in the last ``turn_slots`` coordinates.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .core_env.base import END
from .errors import ConfigurationError, NumericFault, ValidationError

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@lru_cache(maxsize=1 << 16)
def _bucket(seed: int, a: int, b: int, n_buckets: int) -> int:
    """Bucket of unigram ``a`` (``b == -1``) or bigram ``(a, b)``."""
    h = _mix64((seed & _MASK64) ^ _mix64(a + 1))
    h = _mix64(h ^ _mix64((b + 2) << 20))
    return h % n_buckets


@dataclass(frozen=True)
class LocalHistory:
    """Alternating observations and actions ``(o_0, a_0, ..., o_t)``."""

    entries: tuple

    def __post_init__(self):
        if len(self.entries) % 2 != 1:
            raise ValidationError("a local history must start and end with an observation")

    @classmethod
    def start(cls, obs) -> "LocalHistory":
        return cls((tuple(obs),))

    @property
    def turn(self) -> int:
        return (len(self.entries) - 1) // 2

    def extend(self, action, obs) -> "LocalHistory":
        return LocalHistory(self.entries + (tuple(action), tuple(obs)))

    def flat(self) -> tuple:
        out = []
        for e in self.entries:
            out.extend(e)
        return tuple(out)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray  # (vocab, d)
    hash_seed: int
    temperature: float
    window: int = 16
    turn_slots: int = 8
    allowed: tuple | None = None  # token mask; None means the whole vocabulary

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ConfigurationError(f"weights must be a matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("weights must be finite")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if w.shape[1] <= self.turn_slots:
            raise ConfigurationError(f"d={w.shape[1]} leaves no room for n-gram buckets")
        if self.allowed is not None:
            allowed = tuple(sorted(set(int(t) for t in self.allowed)))
            if not allowed or allowed[0] < 0 or allowed[-1] >= w.shape[0]:
                raise ConfigurationError("allowed tokens must be a non-empty subset of the vocabulary")
            object.__setattr__(self, "allowed", allowed)
        w = w.copy() if w is self.weights else w
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, vocab_size: int, d: int = 512, hash_seed: int = 0, temperature: float = 1.0, **kw):
        return cls(np.zeros((vocab_size, d)), hash_seed, temperature, **kw)

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Additive logit mask: 0 on allowed tokens, -inf elsewhere."""
        m = self.__dict__.get("_mask")
        if m is None:
            m = np.zeros(self.vocab_size)
            if self.allowed is not None:
                m[:] = -np.inf
                m[list(self.allowed)] = 0.0
            m.flags.writeable = False
            object.__setattr__(self, "_mask", m)
        return m

    @property
    def n_buckets(self) -> int:
        return self.d - self.turn_slots

    def with_weights(self, weights) -> "PolicyParams":
        return dataclasses.replace(self, weights=np.array(weights, dtype=np.float64))


class SeqLogProb(NamedTuple):
    total: float
    per_token: tuple


def context_features(context: Sequence[int], turn: int, *, hash_seed: int, d: int, window: int = 16,
                     turn_slots: int = 8) -> np.ndarray:
    """Feature vector of a flat token context at a given turn."""
    nb = d - turn_slots
    f = np.zeros(d)
    win = list(context[-window:]) if window > 0 else []
    for k, a in enumerate(win):
        f[_bucket(hash_seed, a, -1, nb)] += 1.0
        if k > 0:
            f[_bucket(hash_seed, win[k - 1], a, nb)] += 1.0
    np.minimum(f, 255.0, out=f)
    f[nb + min(turn, turn_slots - 1)] = 1.0
    return f


def encode_context(history: LocalHistory, prefix: Sequence[int], params: PolicyParams) -> np.ndarray:
    """Features for predicting the token after ``prefix`` given ``history``."""
    ctx = history.flat() + tuple(prefix)
    return context_features(ctx, history.turn, hash_seed=params.hash_seed, d=params.d,
                            window=params.window, turn_slots=params.turn_slots)


def action_features(params: PolicyParams, history: LocalHistory, action: Sequence[int]) -> np.ndarray:
    """Stacked features, one row per position of ``action`` (teacher forcing)."""
    base = history.flat()
    rows = [
        context_features(base + tuple(action[:mu]), history.turn, hash_seed=params.hash_seed, d=params.d,
                         window=params.window, turn_slots=params.turn_slots)
        for mu in range(len(action))
    ]
    return np.stack(rows) if rows else np.zeros((0, params.d))


def _log_softmax(params: PolicyParams, F: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        logits = F @ params.weights.T / params.temperature
    if not np.all(np.isfinite(logits)):
        raise NumericFault(
            f"non-finite logits (max |w| = {np.max(np.abs(params.weights)):.3g}, "
            f"temperature = {params.temperature})"
        )
    if params.allowed is not None:
        logits = logits + params.mask
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _check_action(params: PolicyParams, action) -> tuple:
    action = tuple(int(t) for t in action)
    if not action:
        raise ValidationError("action must contain at least one token")
    for pos, t in enumerate(action):
        if not 0 <= t < params.vocab_size:
            raise ValidationError(f"token {t} outside vocab of size {params.vocab_size}")
        if t == END and pos != len(action) - 1:
            raise ValidationError("<end> may only appear as the final token")
    return action


def logprob_from_features(params: PolicyParams, F: np.ndarray, action: Sequence[int]) -> SeqLogProb:
    ls = _log_softmax(params, F)
    per = tuple(float(ls[mu, a]) for mu, a in enumerate(action))
    return SeqLogProb(sum(per), per)


def grad_from_features(params: PolicyParams, F: np.ndarray, action: Sequence[int]) -> np.ndarray:
    """Σ_μ (onehot(a_μ) − softmax_μ) ⊗ f_μ / T."""
    P = np.exp(_log_softmax(params, F))
    P[np.arange(len(action)), list(action)] -= 1.0
    return -(P.T @ F) / params.temperature


def sequence_logprob(params: PolicyParams, history: LocalHistory, action) -> SeqLogProb:
    action = _check_action(params, action)
    return logprob_from_features(params, action_features(params, history, action), action)


def sequence_logprob_grad(params: PolicyParams, history: LocalHistory, action) -> np.ndarray:
    action = _check_action(params, action)
    return grad_from_features(params, action_features(params, history, action), action)


def sample_with_features(params: PolicyParams, history: LocalHistory, M: int, rng: np.random.Generator):
    """Sample an action; also return its per-position feature matrix."""
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    base = history.flat()
    action, rows = [], []
    for _ in range(M):
        f = context_features(base + tuple(action), history.turn, hash_seed=params.hash_seed, d=params.d,
                             window=params.window, turn_slots=params.turn_slots)
        cdf = np.cumsum(np.exp(_log_softmax(params, f[None, :])[0]))
        # inverse-CDF draw; zero-probability tokens can never be selected
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, params.vocab_size - 1)
        action.append(tok)
        rows.append(f)
        if tok == END:
            break
    F = np.stack(rows)
    # log-probs through the teacher-forcing path so they match sequence_logprob exactly
    return tuple(action), logprob_from_features(params, F, action), F


def sample_sequence(params: PolicyParams, history: LocalHistory, M: int, rng: np.random.Generator):
    action, lp, _ = sample_with_features(params, history, M, rng)
    return action, lp


def importance_ratio(lp_new: SeqLogProb, lp_old: SeqLogProb) -> float:
    if not (math.isfinite(lp_new.total) and math.isfinite(lp_old.total)):
        raise NumericFault(f"non-finite log-probs {lp_new.total}, {lp_old.total}")
    diff = lp_new.total - lp_old.total
    if diff == 0.0:
        return 1.0
    try:
        r = math.exp(diff)
    except OverflowError:
        raise NumericFault(f"importance ratio overflows (log-ratio {diff:.3g})") from None
    return r


def next_token_probs(params: PolicyParams, history: LocalHistory, prefix=()) -> np.ndarray:
    f = encode_context(history, prefix, params)
    return np.exp(_log_softmax(params, f[None, :])[0])


def weighted_grad_sum(params: PolicyParams, feats: Sequence[np.ndarray], actions: Sequence[Sequence[int]],
                      weights: Sequence[float]) -> np.ndarray:
    """Σ_k weights[k] · ∇log π(actions[k]) with all positions stacked into one pass."""
    keep = [k for k, w in enumerate(weights) if w != 0.0]
    if not keep:
        return np.zeros_like(params.weights)
    F = np.concatenate([feats[k] for k in keep])
    toks = np.concatenate([np.asarray(actions[k], dtype=np.int64) for k in keep])
    row_w = np.concatenate([np.full(len(actions[k]), float(weights[k])) for k in keep])
    P = np.exp(_log_softmax(params, F))
    P[np.arange(len(toks)), toks] -= 1.0
    return -((P * row_w[:, None]).T @ F) / params.temperature
