import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decollab.core_env.base import TaskInstance
from decollab.core_env.micro import TableEnv
from decollab.core_env.tasks import coopcode_micro, make_env, builtin_suite, noise_micro, table_micro
from decollab.errors import ConfigurationError, InvariantViolation
from decollab.rollout import (
    CallCounter,
    ReplayBuffer,
    audit_calls,
    backup_returns,
    dump_records,
    expand_tree,
    load_records,
    predicted_calls,
    replay,
    rollout_episode,
    tree_nodes,
)
from decollab.seqpolicy import PolicyParams, sequence_logprob


def random_policies(n, rng, vocab=2, d=16, allowed=None):
    return [PolicyParams(rng.normal(scale=0.5, size=(vocab, d)), 7 + i, 1.0,
                         allowed=None if allowed is None else allowed[i]) for i in range(n)]


def loop_sum(n, K, H):
    return n * K * sum(K**l for l in range(H))


# -- predicted_calls --------------------------------------------------------------

def test_predicted_calls_examples():
    assert predicted_calls(2, 4, 2) == 40
    assert predicted_calls(3, 1, 5) == 15
    assert predicted_calls(3, 2, 3) == 42
    assert predicted_calls(2, 2, 2) == 12


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 8))
def test_predicted_calls_matches_loop_sum(n, K, H):
    assert predicted_calls(n, K, H) == loop_sum(n, K, H)


def test_predicted_calls_is_exact_for_huge_inputs():
    big = predicted_calls(3, 7, 60)
    assert isinstance(big, int) and big == loop_sum(3, 7, 60)


@pytest.mark.parametrize("bad", [(0, 2, 2), (2, 0, 2), (2, 2, 0), (2.0, 2, 2)])
def test_predicted_calls_rejects(bad):
    with pytest.raises(ConfigurationError):
        predicted_calls(*bad)


# -- single-path episodes -------------------------------------------------------------

def test_episode_counts_and_histories(rng):
    env, task = noise_micro(2)
    pol = random_policies(2, rng)
    buf, ret, counter = rollout_episode(env, task, pol, rng, seed=3)
    assert len(buf) == 2 and counter.generation_calls == 4
    r0, r1 = buf[0], buf[1]
    assert r1.histories == r0.next_histories()
    for i in range(2):
        assert r1.histories[i].entries == r0.histories[i].entries + (r0.actions[i], r0.next_obs[i])
    assert ret == r0.reward + r1.reward


def test_behavior_logprobs_recorded(rng):
    env, task = table_micro(3)
    pol = random_policies(2, rng)
    buf, _, _ = rollout_episode(env, task, pol, rng)
    for r in buf:
        for i in range(2):
            assert r.behavior[i].total == sequence_logprob(pol[i], r.histories[i], r.actions[i]).total


def test_early_termination_single_record():
    env = TableEnv(vocab_size=2)
    task = TaskInstance("Table", {"reward_seed": 0, "terminate": [[0, 1, 2, 3], []]}, 2, 2)
    rng = np.random.default_rng(0)
    buf, _, counter = rollout_episode(env, task, random_policies(2, rng), rng)
    assert len(buf) == 1 and buf[0].terminal and counter.generation_calls == 2


def test_coopcode_gate_failure_terminates_early():
    env, task = coopcode_micro()
    v = env.vocab
    # main calls a helper that aux never wrote: syntax gate fails at turn 0
    pol = [PolicyParams.zeros(v.size, d=16, allowed=(0,)),
           PolicyParams.zeros(v.size, d=16, allowed=(v.id("call_aux"),))]
    buf, ret, _ = rollout_episode(env, task, pol, np.random.default_rng(0))
    assert len(buf) == 1 and buf[0].terminal


def test_env_fault_carries_turn(rng):
    env, task = noise_micro(2)
    pol = random_policies(2, rng, vocab=4)  # tokens 2, 3 are outside the noise env vocab
    with pytest.raises(Exception) as e:
        for _ in range(50):
            rollout_episode(env, task, pol, rng)
    assert getattr(e.value, "turn", None) is not None and "turn" in str(e.value)


def test_replay_reproduces_rewards(rng):
    env = make_env("gridbuild")
    task = builtin_suite("gridbuild", "train", 4)[0]
    pol = [PolicyParams.zeros(env.vocab.size, d=64, hash_seed=1 + i, temperature=1.0,
                              allowed=tuple(sorted(env.allowed_set(i, task)))) for i in range(2)]
    buf, _, _ = rollout_episode(env, task, pol, rng, seed=11)
    _, rewards = replay(env, task, list(buf))
    assert rewards == [r.reward for r in buf]


def test_record_dump_roundtrip(tmp_path, rng):
    env, task = table_micro(2)
    buf, _, _ = rollout_episode(env, task, random_policies(2, rng), rng)
    path = tmp_path / "traj.jsonl"
    dump_records(buf, path)
    back = load_records(path)
    assert back == list(buf)
    assert len(path.read_text().splitlines()) == len(buf)


def test_replay_buffer_fifo_and_clear():
    b = ReplayBuffer(2)
    for k in range(3):
        b.add(k)
    assert list(b) == [1, 2]
    b.clear()
    assert len(b) == 0
    with pytest.raises(ConfigurationError):
        ReplayBuffer(0)


# -- trees ------------------------------------------------------------------------------

def test_k1_tree_equals_episode(rng):
    env, task = table_micro(3)
    pol = random_policies(2, rng)
    roots, _ = expand_tree(env, task, pol, 1, np.random.default_rng(9), seed=4)
    buf, _, _ = rollout_episode(env, task, pol, np.random.default_rng(9), seed=4)
    path = [n.record for n in tree_nodes(roots)]
    assert [r.actions for r in path] == [r.actions for r in buf]
    assert [r.reward for r in path] == [r.reward for r in buf]


@pytest.mark.parametrize("K,H,nodes", [(2, 2, 6), (4, 2, 20)])
def test_tree_node_counts(K, H, nodes, rng):
    env, task = noise_micro(H)
    roots, counter = expand_tree(env, task, random_policies(2, rng), K, rng)
    assert len(roots) == K and len(tree_nodes(roots)) == nodes
    assert sum(1 for n in tree_nodes(roots) if not n.children) == K**H
    assert counter.generation_calls == 2 * nodes


@pytest.mark.parametrize("K", [1, 2, 3])
@pytest.mark.parametrize("H", [1, 2, 3])
def test_tree_shape(K, H, rng):
    env, task = noise_micro(H)
    roots, _ = expand_tree(env, task, random_policies(2, rng), K, rng)
    for t in range(H):
        assert sum(1 for n in tree_nodes(roots) if n.depth == t) == K ** (t + 1)
    for n in tree_nodes(roots):
        assert (not n.children) == (n.depth == H - 1)
        assert len(n.children) in (0, K)


def test_siblings_use_independent_streams():
    env, task = noise_micro(1)
    rng = np.random.default_rng(0)
    roots, _ = expand_tree(env, task, random_policies(2, rng), 8, rng)
    assert len({n.reward for n in roots}) == 8


def test_non_replayable_env_rejected(rng):
    class Flaky(TableEnv):
        calls = 0

        def _transition(self, state, joint_action, r):
            Flaky.calls += 1
            reward, *rest = super()._transition(state, joint_action, r)
            return (reward + Flaky.calls, *rest)

    env = Flaky(vocab_size=2)
    task = TaskInstance("Table", {"reward_seed": 0}, 2, 2)
    with pytest.raises(ConfigurationError, match="replayable"):
        expand_tree(env, task, random_policies(2, rng), 2, rng)


# -- backup -----------------------------------------------------------------------------

def test_backup_h1_and_hand_average(rng):
    env, task = table_micro(1)
    roots, _ = expand_tree(env, task, random_policies(2, rng), 3, rng)
    assert backup_returns(roots) == [n.reward for n in roots]
    # K=2, H=2: root reward 0, leaves 1 and 0 -> G = 0.5
    tab = [[0.0] * 4, [1.0, 0.0] * 8]
    env, task = TableEnv(2), TaskInstance("Table", {"rewards": tab}, 2, 2)
    pol = [PolicyParams.zeros(2, d=16, allowed=(0,)), PolicyParams.zeros(2, d=16)]
    for s in range(200):
        roots, _ = expand_tree(env, task, pol, 2, np.random.default_rng(s))
        kids = roots[0].children
        if sorted(k.reward for k in kids) == [0.0, 1.0]:
            backup_returns(roots)
            assert roots[0].G == 0.5
            break
    else:
        pytest.fail("no tree with mixed leaves")


def test_backup_constant_rewards():
    env = TableEnv(2)
    H = 3
    task = TaskInstance("Table", {"rewards": [[0.7] * 4**(t + 1) for t in range(H)]}, H, 2)
    rng = np.random.default_rng(1)
    roots, _ = expand_tree(env, task, random_policies(2, rng), 2, rng)
    backup_returns(roots)
    for n in tree_nodes(roots):
        assert n.G == pytest.approx(0.7 * (H - n.depth), abs=1e-12)


@settings(max_examples=20)
@given(st.floats(-5, 5).filter(lambda c: c != 0), st.integers(0, 1000))
def test_backup_linearity(c, seed):
    H = 2
    rng = np.random.default_rng(seed)
    vals = rng.uniform(size=(H, 4**H))
    env = TableEnv(2)
    pol = random_policies(2, rng)
    t1 = TaskInstance("Table", {"rewards": [list(vals[t][:4**(t + 1)]) for t in range(H)]}, H, 2)
    t2 = TaskInstance("Table", {"rewards": [list(c * vals[t][:4**(t + 1)]) for t in range(H)]}, H, 2)
    r1, _ = expand_tree(env, t1, pol, 2, np.random.default_rng(seed))
    r2, _ = expand_tree(env, t2, pol, 2, np.random.default_rng(seed))
    g1, g2 = backup_returns(r1), backup_returns(r2)
    assert np.allclose(np.array(g2), c * np.array(g1), rtol=1e-12, atol=1e-12)


def test_early_terminated_node_keeps_reward():
    env = TableEnv(2)
    task = TaskInstance("Table", {"reward_seed": 2, "terminate": [[0, 1, 2, 3], []]}, 2, 2)
    rng = np.random.default_rng(0)
    roots, _ = expand_tree(env, task, random_policies(2, rng), 2, rng)
    backup_returns(roots)
    assert all(n.early and not n.children and n.G == n.reward for n in roots)


# -- call audit ------------------------------------------------------------------------------

def test_audit_full_tree(rng):
    env, task = noise_micro(2)
    roots, counter = expand_tree(env, task, random_policies(2, rng), 2, rng)
    a = audit_calls(counter, 2, 2, 2, roots)
    assert (a.measured, a.predicted, a.ok) == (12, 12, True)


def test_audit_one_root_terminated():
    env = TableEnv(2)
    # agent 1 always plays token 0; joint (1, 0) has index 2 and terminates at turn 0
    task = TaskInstance("Table", {"reward_seed": 0, "terminate": [[2], []]}, 2, 2)
    for s in range(100):
        rng = np.random.default_rng(s)
        pol = random_policies(2, rng, allowed=[None, (0,)])
        roots, counter = expand_tree(env, task, pol, 2, rng)
        if sum(n.early for n in roots) == 1:
            a = audit_calls(counter, 2, 2, 2, roots)
            assert a.measured == 8 and a.predicted == 12 and a.pruned == ((0, 2),)
            return
    pytest.fail("no tree with exactly one early root")


def test_audit_k1_path(rng):
    env, task = noise_micro(4, n_agents=3)
    roots, counter = expand_tree(env, task, random_policies(3, rng), 1, rng)
    assert audit_calls(counter, 3, 1, 4, roots).measured == 12


def test_audit_mismatch_raises(rng):
    env, task = noise_micro(2)
    roots, counter = expand_tree(env, task, random_policies(2, rng), 2, rng)
    counter.generation_calls += 1
    with pytest.raises(InvariantViolation):
        audit_calls(counter, 2, 2, 2, roots)


def test_call_counter_add():
    a, b = CallCounter(2, 1), CallCounter(3, 4)
    a.add(b)
    assert (a.generation_calls, a.tf_calls) == (5, 5)
