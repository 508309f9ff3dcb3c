"""MA-REINFORCE, MAGRPO, CoLLM-DC and CoLLM-CC updates and the episode loop.

All four algorithms share one actor step: for agent i the ascent direction
is the minibatch mean of clip(ρ, 1−ε, 1+ε)·A·∇log π_i(a_i | h_i), where ρ
is the sequence-level ratio of current to behavior probability. They differ
in the data (K-ary trees vs single paths) and in the advantage A.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core_env.base import DecPOMDPEnv
from .critics import CriticParams, TDSample, cc_features, critic_update, dc_features
from .errors import ConfigurationError, NumericFault
from .rollout import (
    CallCounter,
    ReplayBuffer,
    TransitionRecord,
    backup_returns,
    expand_tree,
    rollout_episode,
    tree_nodes,
)
from .seqpolicy import PolicyParams, importance_ratio, logprob_from_features, weighted_grad_sum

ALGORITHMS = ("mareinforce", "magrpo", "collm_dc", "collm_cc")
TREE_ALGORITHMS = ("mareinforce", "magrpo")
DEFAULT_TEMPERATURE = {"pairwrite": 0.7}  # everything else samples at 0.6


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str
    env: str
    turns: int
    generations: int
    epochs: int
    agent_lr: float
    critic_lr: float
    gamma: float = 1.0
    advantage_clip: float = 0.2
    minibatch: int = 4
    buffer: int = 4
    eval_samples: int = 4
    seed: int = 0
    out_dir: str = "runs"
    # not part of the config file
    episodes: int = 100
    max_calls: int | None = None
    d: int = 512
    critic_d: int = 512
    temperature: float | None = None
    strict_dc: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("turns", "generations", "minibatch", "buffer"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: expected an integer >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs: expected an integer >= 0, got {self.epochs}")
        if self.eval_samples < 0:
            raise ConfigurationError(f"eval_samples: expected an integer >= 0, got {self.eval_samples}")
        if not self.agent_lr > 0 or not self.critic_lr > 0:
            raise ConfigurationError("agent_lr and critic_lr must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma: expected a value in [0, 1], got {self.gamma}")
        if not 0.0 <= self.advantage_clip < 1.0:
            raise ConfigurationError(f"advantage_clip: expected a value in [0, 1), got {self.advantage_clip}")
        if self.algorithm == "magrpo" and self.generations < 2:
            raise ConfigurationError("generations: MAGRPO needs at least 2 samples per group")

    @property
    def sampling_temperature(self) -> float:
        return self.temperature if self.temperature is not None else DEFAULT_TEMPERATURE.get(self.env, 0.6)

    @property
    def rollouts_per_update(self) -> int:
        """Complete trajectories gathered before each round of epochs."""
        if self.algorithm in TREE_ALGORITHMS:
            return self.generations**self.turns
        return max(1, self.buffer // self.turns)


class UpdateReport(NamedTuple):
    grad_norms: tuple
    mean_advantage: float
    mean_ratio: float
    critic_loss_before: float
    critic_loss_after: float
    tf_calls: int


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

def magrpo_advantages(returns: Sequence[float]) -> np.ndarray:
    """G_k − mean(G) over a sibling group."""
    g = np.asarray(returns, dtype=np.float64)
    if g.size < 2:
        raise ConfigurationError("a group-relative baseline needs at least 2 returns")
    return g - g.mean()


def tree_advantages(roots, baseline: str = "zero") -> list:
    """(record, advantage) per node; ``group`` subtracts the sibling mean at every node."""
    out = []

    def visit(group):
        adv = magrpo_advantages([n.G for n in group]) if baseline == "group" else [n.G for n in group]
        for n, a in zip(group, adv):
            out.append((n.record, float(a)))
            if n.children:
                visit(n.children)

    if baseline not in ("zero", "group"):
        raise ConfigurationError(f"baseline must be 'zero' or 'group', got {baseline!r}")
    visit(list(roots))
    return out


# ---------------------------------------------------------------------------
# Actor step shared by every algorithm
# ---------------------------------------------------------------------------

def actor_step(policies: Sequence[PolicyParams], records: Sequence[TransitionRecord], advantages, cfg: TrainConfig):
    """One ascent step per agent. ``advantages[k][i]`` is agent i's advantage on record k.

    Returns (new policies, grad norms, mean ratio, tf calls used).
    """
    new, norms, ratios = [], [], []
    tf = 0
    lo, hi = 1.0 - cfg.advantage_clip, 1.0 + cfg.advantage_clip
    N = len(records)
    for i, params in enumerate(policies):
        feats = [r.features[i] for r in records]
        acts = [r.actions[i] for r in records]
        weights = []
        for r, F, a, adv in zip(records, feats, acts, advantages):
            rho = importance_ratio(logprob_from_features(params, F, a), r.behavior[i])
            tf += 1
            ratios.append(rho)
            weights.append(min(max(rho, lo), hi) * adv[i] / N)
        g = weighted_grad_sum(params, feats, acts, weights)
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"agent {i}: non-finite policy gradient (max |A| = {max(abs(w) for w in weights):.3g})")
        norms.append(float(np.linalg.norm(g)))
        new.append(params.with_weights(params.weights + cfg.agent_lr * g) if any(weights) else params)
    return new, tuple(norms), float(np.mean(ratios)) if ratios else 1.0, tf


def ma_reinforce_update(items, policies, cfg: TrainConfig):
    """Actor step on (record, G − b) pairs from a backed-up rollout tree."""
    recs = [r for r, _ in items]
    n = len(policies)
    advs = [(a,) * n for _, a in items]
    new, norms, ratio, tf = actor_step(policies, recs, advs, cfg)
    mean_adv = float(np.mean([a for _, a in items])) if items else 0.0
    return new, UpdateReport(norms, mean_adv, ratio, float("nan"), float("nan"), tf)


# ---------------------------------------------------------------------------
# Critic-based updates
# ---------------------------------------------------------------------------

def _cached(record: TransitionRecord, key, fn):
    if key not in record.cache:
        record.cache[key] = fn()
    return record.cache[key]


def _dc_pair(record: TransitionRecord, critic: CriticParams):
    i = critic.agent
    key = ("dc", i, critic.hash_seed, critic.use_global, critic.d_agent)

    def build():
        x = dc_features(critic, record.histories[i], record.m)
        x2 = None if record.terminal else dc_features(critic, record.next_histories()[i], record.next_m)
        return x, x2

    return _cached(record, key, build)


def _cc_pair(record: TransitionRecord, critic: CriticParams):
    key = ("cc", critic.hash_seed, critic.d_agent)

    def build():
        x = cc_features(critic, record.histories, record.m)
        x2 = None if record.terminal else cc_features(critic, record.next_histories(), record.next_m)
        return x, x2

    return _cached(record, key, build)


def _td_batch(records, critic: CriticParams, pair_fn, gamma: float):
    """(features, TDSample) pairs and δ under the current (pre-update) critic."""
    batch, deltas = [], []
    w = critic.weights
    for r in records:
        x, x2 = pair_fn(r, critic)
        v = float(w @ x)
        v2 = 0.0 if x2 is None else float(w @ x2)
        s = TDSample(v, v2, r.reward, r.terminal)
        batch.append((x, s))
        deltas.append(s.target(gamma) - v)
    return batch, deltas


def collm_dc_update(records, policies, critics: Sequence[CriticParams], cfg: TrainConfig):
    """Per agent: δ from its own critic, critic step, then actor step with δ."""
    deltas_by_agent, new_critics = [], []
    before, after = [], []
    for c in critics:
        batch, deltas = _td_batch(records, c, _dc_pair, cfg.gamma)
        step = critic_update(c, batch, cfg.critic_lr, cfg.gamma)
        new_critics.append(step.params)
        before.append(step.loss_before)
        after.append(step.loss_after)
        deltas_by_agent.append(deltas)
    advs = list(zip(*deltas_by_agent))
    new, norms, ratio, tf = actor_step(policies, records, advs, cfg)
    mean_adv = float(np.mean(deltas_by_agent))
    return new, new_critics, UpdateReport(norms, mean_adv, ratio, float(np.mean(before)), float(np.mean(after)), tf)


def collm_cc_update(records, policies, critic: CriticParams, cfg: TrainConfig):
    """Shared critic step on the joint history, then every actor steps with the same δ."""
    batch, deltas = _td_batch(records, critic, _cc_pair, cfg.gamma)
    step = critic_update(critic, batch, cfg.critic_lr, cfg.gamma)
    advs = [(d,) * len(policies) for d in deltas]
    new, norms, ratio, tf = actor_step(policies, records, advs, cfg)
    return new, step.params, UpdateReport(norms, float(np.mean(deltas)), ratio, step.loss_before, step.loss_after, tf)


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------

METRIC_FIELDS = (
    "episode", "calls", "joint_samples", "tf_calls", "train_return", "eval_return",
    "critic_loss", "grad_norm", "mean_ratio",
)


@dataclass
class MetricPoint:
    episode: int
    calls: int
    joint_samples: int
    tf_calls: int
    train_return: float
    eval_return: float
    critic_loss: float
    grad_norm: float
    mean_ratio: float
    wall_time: float = field(default=0.0, compare=False)

    def row(self) -> list:
        return [getattr(self, k) for k in METRIC_FIELDS]


def init_policies(env: DecPOMDPEnv, n_agents: int, cfg: TrainConfig, task=None) -> list:
    return [
        PolicyParams.zeros(env.vocab.size, d=cfg.d, hash_seed=1 + i, temperature=cfg.sampling_temperature,
                           allowed=tuple(sorted(env.allowed_set(i, task))))
        for i in range(n_agents)
    ]


def init_critics(cfg: TrainConfig, n_agents: int) -> list:
    if cfg.algorithm == "collm_cc":
        return [CriticParams.zeros("cc", n_agents, cfg.turns, hash_seed=101, d_agent=cfg.critic_d)]
    if cfg.algorithm == "collm_dc":
        return [
            CriticParams.zeros("dc", n_agents, cfg.turns, agent=i, hash_seed=101 + i, d_agent=cfg.critic_d,
                               use_global=not cfg.strict_dc)
            for i in range(n_agents)
        ]
    return []


def episode_rng(seed: int, episode: int, stream: int = 0) -> np.random.Generator:
    """Generator for one episode; depends only on (seed, episode, stream) so runs can resume."""
    return np.random.default_rng(np.random.SeedSequence([seed, episode, stream]))


class Trainer:
    """Holds parameters and counters; ``run_episode`` performs one Alg.-1 iteration."""

    def __init__(self, cfg: TrainConfig, env: DecPOMDPEnv, train_tasks, eval_tasks, policies=None, critics=None):
        if not train_tasks:
            raise ConfigurationError("taskset is empty")
        for t in list(train_tasks) + list(eval_tasks):
            if t.horizon != cfg.turns:
                raise ConfigurationError(f"turns: config says {cfg.turns}, task horizon is {t.horizon}")
        self.cfg = cfg
        self.env = env
        self.train_tasks = list(train_tasks)
        self.eval_tasks = list(eval_tasks) or list(train_tasks)
        n = self.train_tasks[0].n_agents
        self.n_agents = n
        self.policies = policies if policies is not None else init_policies(env, n, cfg)
        self.critics = critics if critics is not None else init_critics(cfg, n)
        self.episode = 0
        self.calls = 0
        self.tf_calls = 0

    # -- phases ---------------------------------------------------------
    def collect(self, rng):
        """Rollout phase. Returns (records for DC/CC or tree items, mean return, counter)."""
        cfg = self.cfg
        counter = CallCounter()
        if cfg.algorithm in TREE_ALGORITHMS:
            task = self.train_tasks[int(rng.integers(len(self.train_tasks)))]
            roots, counter = expand_tree(self.env, task, self.policies, cfg.generations, rng,
                                         seed=int(rng.integers(2**31)))
            backup_returns(roots, cfg.gamma)
            items = tree_advantages(roots, "group" if cfg.algorithm == "magrpo" else "zero")
            return items, float(np.mean([r.G for r in roots])), counter
        buf = ReplayBuffer(cfg.rollouts_per_update * cfg.turns)
        returns = []
        for _ in range(cfg.rollouts_per_update):
            task = self.train_tasks[int(rng.integers(len(self.train_tasks)))]
            b, ret, c = rollout_episode(self.env, task, self.policies, rng, seed=int(rng.integers(2**31)))
            buf.extend(b)
            counter.add(c)
            returns.append(ret)
        return list(buf), float(np.mean(returns)), counter

    def train_epochs(self, data, rng) -> list:
        cfg = self.cfg
        reports = []
        for _ in range(cfg.epochs):
            k = min(cfg.minibatch, len(data))
            idx = np.sort(rng.choice(len(data), size=k, replace=False))
            mb = [data[j] for j in idx]
            if cfg.algorithm in TREE_ALGORITHMS:
                self.policies, rep = ma_reinforce_update(mb, self.policies, cfg)
            elif cfg.algorithm == "collm_cc":
                self.policies, c, rep = collm_cc_update(mb, self.policies, self.critics[0], cfg)
                self.critics = [c]
            else:
                self.policies, self.critics, rep = collm_dc_update(mb, self.policies, self.critics, cfg)
            self.tf_calls += rep.tf_calls
            reports.append(rep)
        return reports

    def evaluate(self, rng) -> float:
        cfg = self.cfg
        if cfg.eval_samples == 0:
            return float("nan")
        rets = []
        for j in range(cfg.eval_samples):
            task = self.eval_tasks[(self.episode * cfg.eval_samples + j) % len(self.eval_tasks)]
            _, ret, _ = rollout_episode(self.env, task, self.policies, rng, seed=int(rng.integers(2**31)))
            rets.append(ret)
        return float(np.mean(rets))

    def run_episode(self) -> MetricPoint:
        t0 = time.perf_counter()
        rng = episode_rng(self.cfg.seed, self.episode)
        data, train_ret, counter = self.collect(rng)
        self.calls += counter.generation_calls
        reports = self.train_epochs(data, rng)
        eval_ret = self.evaluate(episode_rng(self.cfg.seed, self.episode, stream=1))
        losses = [r.critic_loss_before for r in reports if np.isfinite(r.critic_loss_before)]
        norms = [np.mean(r.grad_norms) for r in reports]
        point = MetricPoint(
            episode=self.episode,
            calls=self.calls,
            joint_samples=self.calls // self.n_agents,
            tf_calls=self.tf_calls,
            train_return=train_ret,
            eval_return=eval_ret,
            critic_loss=float(np.mean(losses)) if losses else float("nan"),
            grad_norm=float(np.mean(norms)) if norms else 0.0,
            mean_ratio=float(np.mean([r.mean_ratio for r in reports])) if reports else 1.0,
            wall_time=time.perf_counter() - t0,
        )
        self.episode += 1
        return point

    def done(self) -> bool:
        cfg = self.cfg
        if self.episode >= cfg.episodes:
            return True
        return cfg.max_calls is not None and self.calls >= cfg.max_calls


def train_loop(cfg: TrainConfig, env: DecPOMDPEnv, train_tasks, eval_tasks=(), trainer: Trainer | None = None):
    """Yield one MetricPoint per episode until the episode or call budget runs out."""
    tr = trainer or Trainer(cfg, env, train_tasks, eval_tasks)
    while not tr.done():
        yield tr.run_episode()
    return tr
