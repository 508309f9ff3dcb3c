"""Episode rollouts, K-ary rollout trees, return backup and call accounting.

rng discipline: every edge of a rollout (one joint action) gets its own
generator spawned from its parent's, so a K=1 tree and a single-path
episode drawn from the same generator are identical, and sibling subtrees
use independent streams.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core_env.base import DecPOMDPEnv, GlobalInfo, TaskInstance
from .errors import ConfigurationError, InvariantViolation
from .seqpolicy import LocalHistory, PolicyParams, SeqLogProb, sample_with_features

SCHEMA_VERSION = 1


@dataclass
class CallCounter:
    generation_calls: int = 0  # one per agent per sampled action
    tf_calls: int = 0  # teacher-forced evaluations

    def add(self, other: "CallCounter") -> None:
        self.generation_calls += other.generation_calls
        self.tf_calls += other.tf_calls


@dataclass
class TransitionRecord:
    histories: tuple  # LocalHistory per agent, h_t
    m: GlobalInfo
    actions: tuple
    reward: float
    next_obs: tuple
    next_m: GlobalInfo
    behavior: tuple  # SeqLogProb per agent, recorded at sampling time
    terminal: bool
    seed: int  # episode reset seed
    step_seed: int  # seed of the env step rng
    features: tuple = field(default=None, repr=False, compare=False)  # per-agent policy feature matrices
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def turn(self) -> int:
        return self.m.turn

    def next_histories(self) -> tuple:
        return tuple(h.extend(a, o) for h, a, o in zip(self.histories, self.actions, self.next_obs))

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "turn": self.turn,
            "histories": [[list(e) for e in h.entries] for h in self.histories],
            "m": _global_json(self.m),
            "actions": [list(a) for a in self.actions],
            "reward": self.reward,
            "next_obs": [list(o) for o in self.next_obs],
            "next_m": _global_json(self.next_m),
            "behavior": [{"total": lp.total, "per_token": list(lp.per_token)} for lp in self.behavior],
            "terminal": self.terminal,
            "seed": self.seed,
            "step_seed": self.step_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TransitionRecord":
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigurationError(f"trajectory schema {d.get('schema')!r} != {SCHEMA_VERSION}")
        return cls(
            histories=tuple(LocalHistory(tuple(tuple(e) for e in h)) for h in d["histories"]),
            m=GlobalInfo(**d["m"]),
            actions=tuple(tuple(a) for a in d["actions"]),
            reward=d["reward"],
            next_obs=tuple(tuple(o) for o in d["next_obs"]),
            next_m=GlobalInfo(**d["next_m"]),
            behavior=tuple(SeqLogProb(b["total"], tuple(b["per_token"])) for b in d["behavior"]),
            terminal=d["terminal"],
            seed=d["seed"],
            step_seed=d["step_seed"],
        )


def _global_json(m: GlobalInfo) -> dict:
    return {"turn": m.turn, "horizon": m.horizon, "progress": m.progress, "last_reward_norm": m.last_reward_norm}


class ReplayBuffer:
    """FIFO store of transition records; cleared at the start of every episode."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.records: deque = deque(maxlen=capacity)

    def add(self, record: TransitionRecord) -> None:
        self.records.append(record)

    def extend(self, records: Iterable[TransitionRecord]) -> None:
        for r in records:
            self.add(r)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, k):
        return list(self.records)[k] if isinstance(k, slice) else self.records[k]


def dump_records(records: Iterable[TransitionRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_records(path) -> list:
    with open(path) as fh:
        return [TransitionRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Sampling one joint action
# ---------------------------------------------------------------------------

def _joint_sample(policies: Sequence[PolicyParams], histories, M: int, rng: np.random.Generator):
    """Each agent samples from its own params and local history only."""
    acts, lps, feats = [], [], []
    for params, h in zip(policies, histories):
        a, lp, F = sample_with_features(params, h, M, rng)
        acts.append(a)
        lps.append(lp)
        feats.append(F)
    return tuple(acts), tuple(lps), tuple(feats)


def _edge(env: DecPOMDPEnv, state, policies, histories, rng: np.random.Generator, counter: CallCounter):
    """Sample and execute one joint action on ``state``; return (record, next histories)."""
    m = GlobalInfo(turn=state.turn, horizon=state.task.horizon, progress=state.progress,
                   last_reward_norm=state.last_reward / env.reward_cap)
    acts, lps, feats = _joint_sample(policies, histories, env.max_action_len, rng)
    counter.generation_calls += len(policies)
    step_seed = int(rng.integers(2**63))
    turn = state.turn
    try:
        out = env.step(state, acts, np.random.default_rng(step_seed))
    except Exception as e:
        e.turn = turn  # attach the failing turn for diagnostics
        if len(e.args) == 1 and isinstance(e.args[0], str):
            e.args = (f"turn {turn}: {e.args[0]}",)
        raise
    rec = TransitionRecord(
        histories=tuple(histories), m=m, actions=acts, reward=out.reward, next_obs=out.next_obs,
        next_m=out.global_info, behavior=lps, terminal=out.terminated, seed=state.seed,
        step_seed=step_seed, features=feats,
    )
    return rec, rec.next_histories()


def rollout_episode(env: DecPOMDPEnv, task: TaskInstance, policies, rng: np.random.Generator, seed: int = 0,
                    capacity: int | None = None):
    """Single-path episode. Returns (buffer, undiscounted return, counter)."""
    if len(policies) != task.n_agents:
        raise ConfigurationError(f"{len(policies)} policies for {task.n_agents} agents")
    counter = CallCounter()
    obs, _, state = env.reset(task, seed)
    histories = tuple(LocalHistory.start(o) for o in obs)
    buf = ReplayBuffer(capacity or task.horizon)
    total = 0.0
    cur = rng
    while not state.terminated:
        cur = cur.spawn(1)[0]
        rec, histories = _edge(env, state, policies, histories, cur, counter)
        buf.add(rec)
        total += rec.reward
    return buf, total, counter


def replay(env: DecPOMDPEnv, task: TaskInstance, records: Sequence[TransitionRecord]):
    """Re-execute stored actions from reset; return (state, rewards)."""
    if not records:
        raise ConfigurationError("nothing to replay")
    _, _, state = env.reset(task, records[0].seed)
    rewards = []
    for r in records:
        out = env.step(state, r.actions, np.random.default_rng(r.step_seed))
        rewards.append(out.reward)
    return state, rewards


# ---------------------------------------------------------------------------
# Rollout trees
# ---------------------------------------------------------------------------

@dataclass
class RolloutTreeNode:
    record: TransitionRecord
    depth: int
    children: list = field(default_factory=list)
    G: float = float("nan")

    @property
    def joint_action(self):
        return self.record.actions

    @property
    def reward(self) -> float:
        return self.record.reward

    @property
    def terminated(self) -> bool:
        return self.record.terminal

    @property
    def early(self) -> bool:
        return self.record.terminal and self.record.next_m.turn < self.record.next_m.horizon

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def expand_tree(env: DecPOMDPEnv, task: TaskInstance, policies, K: int, rng: np.random.Generator, seed: int = 0):
    """K-ary rollout tree of depth H. Returns (root nodes, counter).

    Each node is reached by resetting the environment and replaying the
    action prefix with the stored step seeds; the replayed reward must
    match, otherwise the environment is not replayable.
    """
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if len(policies) != task.n_agents:
        raise ConfigurationError(f"{len(policies)} policies for {task.n_agents} agents")
    counter = CallCounter()
    obs, _, _ = env.reset(task, seed)
    h0 = tuple(LocalHistory.start(o) for o in obs)

    def state_after(prefix):
        _, _, st = env.reset(task, seed)
        for r in prefix:
            out = env.step(st, r.actions, np.random.default_rng(r.step_seed))
            if out.reward != r.reward:
                raise ConfigurationError(
                    f"environment {env.kind} is not replayable: turn {r.turn} reward {out.reward} != {r.reward}"
                )
        return st

    def grow(prefix, histories, node_rng, depth):
        nodes = []
        for child_rng in node_rng.spawn(K):
            st = state_after(prefix)
            rec, nxt = _edge(env, st, policies, histories, child_rng, counter)
            node = RolloutTreeNode(rec, depth)
            if not rec.terminal:
                node.children = grow(prefix + [rec], nxt, child_rng, depth + 1)
            nodes.append(node)
        return nodes

    return grow([], h0, rng, 0), counter


def backup_returns(roots: Sequence[RolloutTreeNode], gamma: float = 1.0) -> list:
    """Set and return G for every node (pre-order): r + γ·mean(children G)."""

    def up(node):
        if not node.children:
            node.G = node.reward
        else:
            for c in node.children:
                up(c)
            node.G = node.reward + gamma * sum(c.G for c in node.children) / len(node.children)

    for r in roots:
        up(r)
    return [n.G for r in roots for n in r.walk()]


def tree_nodes(roots: Sequence[RolloutTreeNode]) -> list:
    return [n for r in roots for n in r.walk()]


def predicted_calls(n: int, K: int, H: int) -> int:
    """Generation calls of a full K-ary tree of depth H with n agents (exact integer)."""
    for name, v in (("n", n), ("K", K), ("H", H)):
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigurationError(f"{name} must be an integer >= 1, got {v!r}")
    n, K, H = int(n), int(K), int(H)
    if K == 1:
        return n * H
    return n * K * (K**H - 1) // (K - 1)


class CallAudit(NamedTuple):
    measured: int
    predicted: int
    early_nodes: int
    pruned: tuple  # (depth, joint nodes pruned below it) per early-terminated node
    ok: bool


def audit_calls(counter: CallCounter, n: int, K: int, H: int, roots: Sequence[RolloutTreeNode]) -> CallAudit:
    """Reconcile measured generation calls with the closed form.

    Without early termination the two must be equal; otherwise the
    shortfall must equal n times the size of the pruned subtrees.
    """
    predicted = predicted_calls(n, K, H)
    pruned = []
    for node in tree_nodes(roots):
        if node.early:
            below = H - 1 - node.depth
            pruned.append((node.depth, sum(K**l for l in range(1, below + 1))))
    missing = n * sum(p for _, p in pruned)
    ok = counter.generation_calls == predicted - missing
    if not pruned and counter.generation_calls != predicted:
        raise InvariantViolation(f"measured {counter.generation_calls} calls, closed form gives {predicted}")
    if not ok:
        raise InvariantViolation(
            f"measured {counter.generation_calls} calls, expected {predicted} minus {missing} pruned"
        )
    return CallAudit(counter.generation_calls, predicted, len(pruned), tuple(pruned), ok)
