"""Enumeration oracles and statistical harnesses for the tree policy-gradient estimator.

* ``exact_policy_gradient`` / ``dp_values``: exact quantities by listing
  every trajectory of a small deterministic environment.
* ``unbiasedness_test``: sampled K-tree root estimates against the exact
  gradient, with a bootstrap power check.
* ``variance_scaling_test``: the 1/K^(H−t) variance law on exogenous noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core_env.base import DecPOMDPEnv, TaskInstance
from .core_env.enumerate import DEFAULT_CAP, enumerate_trajectories
from .rollout import backup_returns, expand_tree
from .seqpolicy import LocalHistory, PolicyParams, grad_from_features, logprob_from_features, action_features


class _PolicyCache:
    """Memoized log-prob and score gradient per (agent, history, action)."""

    def __init__(self, policies):
        self.policies = policies
        self._lp = {}
        self._grad = {}

    def _feats(self, i, h, a):
        return action_features(self.policies[i], LocalHistory(h), a)

    def logprob(self, i, h, a) -> float:
        key = (i, h, a)
        if key not in self._lp:
            self._lp[key] = logprob_from_features(self.policies[i], self._feats(i, h, a), a).total
        return self._lp[key]

    def grad(self, i, h, a) -> np.ndarray:
        key = (i, h, a)
        if key not in self._grad:
            self._grad[key] = grad_from_features(self.policies[i], self._feats(i, h, a), a)
        return self._grad[key]


@dataclass
class ExactGradient:
    per_agent: list  # total gradient per agent (same shape as weights)
    per_turn: list  # per_turn[t][i]: contribution of turn t
    objective: float  # expected discounted return


def _trajectory_prob(cache: _PolicyCache, tr, n: int) -> float:
    lp = 0.0
    for t in range(tr.turns):
        for i in range(n):
            lp += cache.logprob(i, tr.local_history(i, t), tr.actions[t][i])
    return math.exp(lp)


def expected_return(env: DecPOMDPEnv, task: TaskInstance, policies, gamma: float = 1.0, cap: int = DEFAULT_CAP):
    cache = _PolicyCache(policies)
    total = 0.0
    for tr in enumerate_trajectories(env, task, cap):
        ret = sum(gamma**t * r for t, r in enumerate(tr.rewards))
        total += _trajectory_prob(cache, tr, task.n_agents) * ret
    return total


def exact_policy_gradient(env: DecPOMDPEnv, task: TaskInstance, policies, gamma: float = 1.0,
                          cap: int = DEFAULT_CAP) -> ExactGradient:
    """Σ_τ P(τ) Σ_t γ^t ∇log π_i(a_{i,t}|h_{i,t}) · G_t(τ), with G_t the return-to-go from t.

    The turn-t term is split out so a per-turn estimator can be compared
    with its own target.
    """
    n = task.n_agents
    cache = _PolicyCache(policies)
    H = task.horizon
    per_turn = [[np.zeros_like(p.weights) for p in policies] for _ in range(H)]
    objective = 0.0
    for tr in enumerate_trajectories(env, task, cap):
        p = _trajectory_prob(cache, tr, n)
        if p == 0.0:
            continue
        rets = [0.0] * (tr.turns + 1)
        for t in reversed(range(tr.turns)):
            rets[t] = tr.rewards[t] + gamma * rets[t + 1]
        objective += p * rets[0]
        for t in range(tr.turns):
            w = p * gamma**t * rets[t]
            if w == 0.0:
                continue
            for i in range(n):
                per_turn[t][i] += w * cache.grad(i, tr.local_history(i, t), tr.actions[t][i])
    per_agent = [sum(per_turn[t][i] for t in range(H)) for i in range(n)]
    return ExactGradient(per_agent, per_turn, objective)


def finite_difference_gradient(env, task, policies, gamma: float = 1.0, eps: float = 1e-5, agents=None):
    """Central differences of the enumerated expected return, entry by entry."""
    out = []
    for i in agents if agents is not None else range(len(policies)):
        W = np.array(policies[i].weights)
        g = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            vals = []
            for s in (+1, -1):
                W2 = W.copy()
                W2[idx] += s * eps
                pols = list(policies)
                pols[i] = policies[i].with_weights(W2)
                vals.append(expected_return(env, task, pols, gamma))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Dynamic programming values
# ---------------------------------------------------------------------------

@dataclass
class DPValues:
    joint: dict  # joint-action prefix -> V(h_t)
    prob: dict  # prefix -> probability of reaching it
    histories: dict  # prefix -> (local histories, GlobalInfo) at that point
    agent: list  # agent -> {local history entries: E[V | h_i]}
    agent_m: list = field(default_factory=list)  # agent -> {(entries, m): E[V | h_i, m]}


def dp_values(env: DecPOMDPEnv, task: TaskInstance, policies, gamma: float = 1.0, cap: int = DEFAULT_CAP) -> DPValues:
    """Backward induction over the enumerated trajectory tree.

    V(h_t) = Σ_a π(a|h)·(r + γ·V(h_{t+1})) with V = 0 after termination;
    per-agent marginals average V(h) over the joint histories consistent
    with h_i, weighted by their probability of being reached.
    """
    n = task.n_agents
    cache = _PolicyCache(policies)
    trajs = enumerate_trajectories(env, task, cap)
    # children[prefix] = list of (joint action, reward, terminal)
    children: dict = {}
    histories: dict = {}
    for tr in trajs:
        for t in range(tr.turns):
            prefix = tr.actions[:t]
            if prefix not in histories:
                histories[prefix] = (tuple(LocalHistory(tr.local_history(i, t)) for i in range(n)), tr.globals[t])
            kids = children.setdefault(prefix, {})
            kids[tr.actions[t]] = (tr.rewards[t], t == tr.turns - 1)
    V: dict = {}

    def value(prefix):
        if prefix in V:
            return V[prefix]
        hs = histories[prefix][0]
        v = 0.0
        for ja, (r, terminal) in children[prefix].items():
            p = math.exp(sum(cache.logprob(i, hs[i].entries, ja[i]) for i in range(n)))
            v += p * (r + (0.0 if terminal else gamma * value(prefix + (ja,))))
        V[prefix] = v
        return v

    value(())
    prob = {(): 1.0}
    for prefix in sorted(histories, key=len):
        hs = histories[prefix][0]
        for ja, (_, terminal) in children[prefix].items():
            if not terminal:
                p = math.exp(sum(cache.logprob(i, hs[i].entries, ja[i]) for i in range(n)))
                prob[prefix + (ja,)] = prob[prefix] * p
    agent, agent_m = [], []
    for i in range(n):
        num, den, num_m, den_m = {}, {}, {}, {}
        for prefix, (hs, m) in histories.items():
            p = prob[prefix]
            k = hs[i].entries
            num[k] = num.get(k, 0.0) + p * V[prefix]
            den[k] = den.get(k, 0.0) + p
            km = (k, m)
            num_m[km] = num_m.get(km, 0.0) + p * V[prefix]
            den_m[km] = den_m.get(km, 0.0) + p
        agent.append({k: num[k] / den[k] for k in num if den[k] > 0})
        agent_m.append({k: num_m[k] / den_m[k] for k in num_m if den_m[k] > 0})
    return DPValues(V, prob, histories, agent, agent_m)


# ---------------------------------------------------------------------------
# Sampled estimators
# ---------------------------------------------------------------------------

def root_estimate(roots, policies, baseline=None) -> np.ndarray:
    """ḡ at the root for every agent, flattened and concatenated.

    ḡ_i = (1/K) Σ_k ∇log π_i(a^k_i | h_i) · (G^k − b); on-policy, so ρ = 1.
    ``baseline(agent, action)`` injects an action-dependent baseline.
    """
    K = len(roots)
    parts = []
    for i, params in enumerate(policies):
        g = np.zeros_like(params.weights)
        for node in roots:
            rec = node.record
            a = rec.actions[i]
            b = baseline(i, a) if baseline is not None else 0.0
            g += grad_from_features(params, rec.features[i], a) * (node.G - b)
        parts.append((g / K).ravel())
    return np.concatenate(parts)


def sample_root_estimates(env, task, policies, K: int, replicates: int, seed: int = 0, gamma: float = 1.0,
                          baseline=None) -> np.ndarray:
    """Matrix of ``replicates`` independent root estimates (one row each)."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(replicates):
        roots, _ = expand_tree(env, task, policies, K, rng, seed=int(rng.integers(2**31)))
        backup_returns(roots, gamma)
        rows.append(root_estimate(roots, policies, baseline))
    return np.stack(rows)


class UnbiasednessReport(NamedTuple):
    n_components: int
    n_inside: int
    frac_inside: float
    passed: bool
    mean: np.ndarray
    stderr: np.ndarray
    exact: np.ndarray


def ci_check(samples: np.ndarray, exact: np.ndarray, level: float = 0.99, required: float = 0.95):
    """Fraction of components whose exact value lies in the level-CI of the sample mean.

    A zero-variance component is inside only on an exact match.
    """
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n)
    z = stats.norm.ppf(0.5 + level / 2)
    tol = 1e-12 * np.maximum(1.0, np.abs(exact))
    inside = np.where(se > 0, np.abs(mean - exact) <= z * se, np.abs(mean - exact) <= tol)
    k = int(inside.sum())
    frac = k / len(exact)
    return UnbiasednessReport(len(exact), k, frac, frac >= required, mean, se, exact)


def unbiasedness_test(env, task, policies, K: int, replicates: int, seed: int = 0, gamma: float = 1.0,
                      level: float = 0.99, required: float = 0.95, baseline=None, return_samples: bool = False):
    """Compare the mean sampled root estimate with the exact turn-0 gradient."""
    exact = exact_policy_gradient(env, task, policies, gamma)
    target = np.concatenate([g.ravel() for g in exact.per_turn[0]])
    samples = sample_root_estimates(env, task, policies, K, replicates, seed, gamma, baseline)
    rep = ci_check(samples, target, level, required)
    return (rep, samples) if return_samples else rep


def power_check(samples: np.ndarray, exact: np.ndarray, bias_sd: float = 0.1, trials: int = 100, seed: int = 0,
                level: float = 0.99, required: float = 0.95) -> float:
    """Rejection rate of the CI test on bootstrap resamples shifted by ``bias_sd`` standard deviations."""
    rng = np.random.default_rng(seed)
    n = samples.shape[0]
    shift = bias_sd * samples.std(axis=0, ddof=1)
    rejected = 0
    for _ in range(trials):
        boot = samples[rng.integers(n, size=n)] + shift
        rejected += not ci_check(boot, exact, level, required).passed
    return rejected / trials


# ---------------------------------------------------------------------------
# Variance law
# ---------------------------------------------------------------------------

class VarianceCell(NamedTuple):
    depth: int  # H − t
    K: int
    variance: float
    ratio: float  # Var(K) / Var(1)
    predicted: float  # 1 / K^(H−t)
    ci: tuple  # 95% interval of the ratio
    within: bool


@dataclass
class VarianceReport:
    cells: list
    replicates: int
    tolerance: float
    shared: bool

    @property
    def passed(self) -> bool:
        return all(c.within for c in self.cells)

    def table(self) -> str:
        lines = ["H-t  K   ratio    predicted  95% CI             ok"]
        for c in self.cells:
            lines.append(f"{c.depth:<4} {c.K:<3} {c.ratio:<8.4f} {c.predicted:<10.4f} "
                         f"[{c.ci[0]:.4f}, {c.ci[1]:.4f}]  {'yes' if c.within else 'no'}")
        return "\n".join(lines)


def _ratio_ci(a: np.ndarray, b: np.ndarray, level: float = 0.95):
    """Delta-method interval for var(a)/var(b), a and b independent."""
    va, vb = a.var(ddof=1), b.var(ddof=1)
    ra = np.var((a - a.mean()) ** 2, ddof=1) / len(a) / va**2
    rb = np.var((b - b.mean()) ** 2, ddof=1) / len(b) / vb**2
    r = va / vb
    z = stats.norm.ppf(0.5 + level / 2)
    s = r * math.sqrt(ra + rb)
    return r - z * s, r + z * s


def variance_scaling_test(K_list: Sequence[int] = (1, 2, 3), depths: Sequence[int] = (1, 2), replicates: int = 10_000,
                          seed: int = 0, shared: bool = False, tolerance: float = 0.2, d: int = 16,
                          n_agents: int = 2, min_replicates: int = 1000) -> VarianceReport:
    """Var of a fixed scalar projection of the root ḡ for each (H−t, K), relative to K=1.

    Rewards are exogenous N(0, 1) draws at the last turn, independent of
    the actions, which is the independence assumption behind the law.
    """
    from .core_env.tasks import noise_micro

    if replicates < min_replicates:
        raise ValueError(f"at least {min_replicates} replicates needed for a usable interval")
    if 1 not in K_list:
        K_list = (1,) + tuple(K_list)
    rng = np.random.default_rng(seed)
    policies = [PolicyParams(rng.normal(scale=0.5, size=(2, d)), 7 + i, 1.0) for i in range(n_agents)]
    u = rng.normal(size=2 * d * n_agents)
    u /= np.linalg.norm(u)
    cells = []
    for depth in depths:
        env, task = noise_micro(depth, shared=shared, n_agents=n_agents)
        proj = {}
        for K in K_list:
            rows = sample_root_estimates(env, task, policies, K, replicates, seed=seed * 1000 + 10 * depth + K)
            proj[K] = rows @ u
        base = proj[1]
        for K in K_list:
            ratio = proj[K].var(ddof=1) / base.var(ddof=1)
            pred = 1.0 / K**depth
            ci = (1.0, 1.0) if K == 1 else _ratio_ci(proj[K], base)
            within = abs(ratio - pred) <= tolerance * pred
            cells.append(VarianceCell(depth, K, float(proj[K].var(ddof=1)), float(ratio), pred, ci, within))
    return VarianceReport(cells, replicates, tolerance, shared)


# ---------------------------------------------------------------------------
# Shared instances for the command line and the acceptance suite
# ---------------------------------------------------------------------------

def unbiasedness_instance(seed: int = 0, d: int = 16, scale: float = 0.5, reward_seed: int = 3):
    """(env, task, policies) of the vocab-2, M=1, n=2, H=2 table environment with random weights."""
    from .core_env.tasks import table_micro

    env, task = table_micro(horizon=2, reward_seed=reward_seed, n_agents=2)
    rng = np.random.default_rng(seed)
    policies = [PolicyParams(rng.normal(scale=scale, size=(2, d)), 11 + i, 1.0) for i in range(2)]
    return env, task, policies


class CallSweepRow(NamedTuple):
    n: int
    K: int
    H: int
    measured: int
    predicted: int


def call_count_sweep(ns=(1, 2, 3), Ks=(1, 2, 3, 4), Hs=(1, 2, 3, 4), seed: int = 0, d: int = 16) -> list:
    """Measured vs closed-form generation calls of full trees on the noise environment (no early exits)."""
    from .core_env.tasks import noise_micro
    from .rollout import audit_calls

    rows = []
    rng = np.random.default_rng(seed)
    for n in ns:
        policies = [PolicyParams(rng.normal(size=(2, d)), 7 + i, 1.0) for i in range(n)]
        for H in Hs:
            env, task = noise_micro(H, n_agents=n)
            for K in Ks:
                roots, counter = expand_tree(env, task, policies, K, rng, seed=int(rng.integers(2**31)))
                audit = audit_calls(counter, n, K, H, roots)
                rows.append(CallSweepRow(n, K, H, audit.measured, audit.predicted))
    return rows


# ---------------------------------------------------------------------------
# Critic fixed points
# ---------------------------------------------------------------------------

class CriticFitReport(NamedTuple):
    kind: str
    max_error: float  # max |V_critic − V_oracle| over reachable histories
    n_histories: int
    sweeps: int
    passed: bool


def uniform_policies(env: DecPOMDPEnv, task: TaskInstance, d: int = 32) -> list:
    return [PolicyParams.zeros(env.vocab.size, d=d, hash_seed=1 + i, allowed=tuple(sorted(env.allowed_set(i, task))))
            for i in range(task.n_agents)]


def fit_critic(env: DecPOMDPEnv, task: TaskInstance, policies, kind: str, episodes: int = 5000, seed: int = 0,
               gamma: float = 1.0, d_agent: int = 64, sweeps: int = 20, inner: int = 500, tolerance: float = 0.05):
    """Fitted semi-gradient TD on a frozen batch of sampled episodes, scored against ``dp_values``.

    Each sweep freezes the bootstrap targets under the current critic and
    runs ``critic_update`` on them until the loss settles; sweeps repeat
    until the weights stop moving. ``kind="dc"`` fits one critic per agent
    and compares with E[V | h_i, m].
    """
    from .critics import CriticParams, TDSample, cc_features, critic_update, dc_features, max_stable_step
    from .rollout import rollout_episode

    n = task.n_agents
    if kind == "cc":
        critics = [CriticParams.zeros("cc", n, task.horizon, hash_seed=101, d_agent=d_agent)]
        feat = lambda c, hs, m: cc_features(c, hs, m)
    elif kind == "dc":
        critics = [CriticParams.zeros("dc", n, task.horizon, agent=i, hash_seed=101 + i, d_agent=d_agent)
                   for i in range(n)]
        feat = lambda c, hs, m: dc_features(c, hs[c.agent], m)
    else:
        raise ValueError(f"kind must be 'cc' or 'dc', got {kind!r}")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(episodes):
        buf, _, _ = rollout_episode(env, task, policies, rng, seed=int(rng.integers(2**31)))
        records.extend(buf)
    done = 0
    fitted = []
    for c in critics:
        # distinct transitions with sqrt(frequency) row scaling give exactly the
        # same mean-squared TD gradient as the full sampled batch
        rows = {}
        for r in records:
            key = (r.histories, r.m, r.reward, r.terminal, None if r.terminal else r.next_histories(), r.next_m)
            rows[key] = rows.get(key, 0) + 1
        keys = list(rows)
        scale = np.sqrt(np.array([rows[k] for k in keys]) * len(keys) / len(records))
        X = np.stack([feat(c, k[0], k[1]) for k in keys]) * scale[:, None]
        X2 = np.stack([np.zeros(c.dim) if k[3] else feat(c, k[4], k[5]) for k in keys]) * scale[:, None]
        rew = np.array([k[2] for k in keys]) * scale
        term = np.array([k[3] for k in keys])
        step = 0.9 * max_stable_step(X)
        for s in range(sweeps):
            w0 = c.weights
            v2 = X2 @ w0
            batch = [(x, TDSample(0.0, float(nv), float(rr), bool(tt))) for x, nv, rr, tt in zip(X, v2, rew, term)]
            for _ in range(inner):
                c = critic_update(c, batch, step, gamma).params
            done = max(done, s + 1)
            if np.max(np.abs(c.weights - w0)) < 1e-9:
                break
        fitted.append(c)
    oracle = dp_values(env, task, policies, gamma)
    err = 0.0
    for prefix, (hs, m) in oracle.histories.items():
        if oracle.prob[prefix] <= 0:
            continue
        if kind == "cc":
            err = max(err, abs(fitted[0].weights @ feat(fitted[0], hs, m) - oracle.joint[prefix]))
        else:
            for i, c in enumerate(fitted):
                err = max(err, abs(c.weights @ feat(c, hs, m) - oracle.agent_m[i][(hs[i].entries, m)]))
    return CriticFitReport(kind, float(err), len(oracle.histories), done, bool(err <= tolerance)), fitted
