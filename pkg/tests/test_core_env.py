import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decollab.core_env import (
    END,
    CoopCodeEnv,
    GridBuildEnv,
    PairWriteEnv,
    TaskInstance,
    builtin_suite,
    coopcode_micro,
    coopcode_reward,
    count_bound,
    enumerate_trajectories,
    gridbuild_reward,
    gridbuild_score,
    hazard_penalty,
    jaccard,
    load_tasks,
    make_env,
    save_tasks,
    table_micro,
    task_from_dict,
)
from decollab.errors import CapExceeded, ConfigurationError, UsageError, ValidationError


# -- reset / step ------------------------------------------------------------

def test_reset_is_deterministic():
    env = GridBuildEnv(rows=2, cols=2)
    task = TaskInstance("GridBuild", {"grid": ["##", "#."]}, 2, 2)
    a = env.reset(task, 7)
    b = env.reset(task, 7)
    assert a[0] == b[0] and a[1] == b[1]


def test_coopcode_prompts_carry_roles():
    env = CoopCodeEnv()
    task = builtin_suite("coopcode", "train", 2)[0]
    obs, m, _ = env.reset(task, 0)
    assert obs[0] != obs[1]
    assert env.vocab.id("role_aux") in obs[0] and env.vocab.id("role_main") in obs[1]
    assert m.turn == 0 and m.progress == 0.0


def test_pairwrite_starts_at_turn_zero():
    env = make_env("pairwrite")
    for seed in (0, 1, 99):
        _, m, _ = env.reset(builtin_suite("pairwrite", "train", 1)[0], seed)
        assert m.turn == 0


def test_gridbuild_empty_turn_scores_zero():
    env = make_env("gridbuild")
    task = builtin_suite("gridbuild", "train", 4)[0]
    _, _, state = env.reset(task, 0)
    out = env.step(state, ((END,), (END,)))
    assert out.reward == 0.0 and not out.terminated


def test_coopcode_all_pass_terminates_early():
    env = CoopCodeEnv()
    task = builtin_suite("coopcode", "train", 2)[0]
    _, _, state = env.reset(task, 0)
    out = env.step(state, env.witness(task))
    assert out.terminated and out.info["early"]
    assert out.info["all_passed"]


@pytest.mark.parametrize("name", ["pairwrite", "coopcode", "gridbuild", "gridbuild_hazard"])
def test_horizon_exhaustion_terminates(name):
    env = make_env(name)
    H = 3
    task = builtin_suite(name, "train", H)[0]
    _, _, state = env.reset(task, 0)
    rng = np.random.default_rng(0)
    outs = []
    while not state.terminated:
        acts = []
        for i in range(task.n_agents):
            toks = sorted(env.allowed_set(i, task) - {END})
            acts.append((int(rng.choice(toks)), END))
        outs.append(env.step(state, acts, rng))
    assert outs[-1].terminated
    assert len(outs) == H or outs[-1].info["early"]
    with pytest.raises(UsageError):
        env.step(state, acts, rng)


def test_step_arity_and_oversize_actions():
    env = make_env("gridbuild")
    task = builtin_suite("gridbuild", "train", 2)[0]
    _, _, state = env.reset(task, 0)
    with pytest.raises(UsageError):
        env.step(state, ((END,),))
    tok = sorted(env.allowed_set(0) - {END})[0]
    with pytest.raises(ValidationError):
        env.step(state, ((tok,) * (env.max_action_len + 1), (END,)))
    assert state.turn == 0  # nothing was truncated and executed


def test_disallowed_token_rejected():
    env = make_env("coopcode")
    task = builtin_suite("coopcode", "train", 2)[0]
    _, _, state = env.reset(task, 0)
    call = env.vocab.id("call_aux")
    assert call not in env.allowed_set(0)
    with pytest.raises(ValidationError):
        env.step(state, ((call,), (END,)))


# -- PairWrite reward ----------------------------------------------------------

@pytest.fixture
def pw():
    return PairWriteEnv()


def test_pairwrite_ratio_two_gives_full_structure(pw):
    w = pw.words
    s = pw.score((w[0], w[1], END), (w[2], w[3], w[4], w[5], END))
    assert s.structure == 1.0
    assert not s.terminate


def test_pairwrite_style_cap_binds(pw):
    w, tr = pw.words, pw.transitions
    # 1 shared of 20 distinct tokens: Jaccard 0.05 > 0.03
    a1 = (w[0],) + tuple(tr[:9])
    a2 = (w[0],) + tuple(tr[9:19])
    assert math.isclose(jaccard(a1, a2), 0.05)
    s = pw.score(a1, a2)
    assert s.style == 1.0


def test_pairwrite_no_transitions_zero_coherence(pw):
    w = pw.words
    s = pw.score((w[0], END), (w[1], w[2], END))
    assert s.coherence == 0.0


def test_pairwrite_empty_completion_terminates(pw):
    s = pw.score((END,), (pw.words[0], END))
    assert s.structure == 0.0 and s.terminate


@pytest.mark.parametrize("n1,n2,expected", [(2, 4, 1.0), (2, 3, 0.8), (4, 5, (1.25 - 1.1) / 0.5), (2, 8, (5.0 - 4.0) / 1.8), (1, 6, 0.0)])
def test_pairwrite_band_credit(pw, n1, n2, expected):
    w = pw.words
    a1 = tuple(w[k % 6] for k in range(n1))
    a2 = tuple(w[k % 6] for k in range(n2))
    pw2 = PairWriteEnv(max_action_len=8)
    assert math.isclose(pw2.score(a1, a2).structure, expected)


def test_pairwrite_witness_is_optimal(pw):
    a1, a2 = pw.witness()
    assert pw.score(a1, a2).total == pytest.approx(1.0)
    task = builtin_suite("pairwrite", "test", 1)[0]
    assert pw.optimal_return(task) == pytest.approx(1.0)


# -- CoopCode reward -----------------------------------------------------------

@pytest.fixture
def cc():
    return CoopCodeEnv()


def _lits(env, values):
    return tuple(env.literal_tokens[v] for v in values)


def test_coopcode_missing_header(cc):
    lx = cc.lex
    s = coopcode_reward((lx.def_aux, END), (cc.literal_tokens[0], END), [(0, 0)], lex=lx)
    assert s.reward == 0.0 and s.terminated and s.stage == "header"
    assert s.feedback == (lx.fb, lx.no_header)


def test_coopcode_four_of_five_tests(cc):
    lx = cc.lex
    tests = [(p, v) for p, v in enumerate([0, 1, 2, 0, 1])]
    main = (lx.def_main,) + _lits(cc, [0, 1, 2, 0, 2])  # last output wrong
    s = coopcode_reward((END,), main, tests, lex=lx)
    assert s.pass_fraction == 0.8
    assert s.reward == pytest.approx(0.7 * 0.8)
    assert s.feedback == (lx.fb, lx.passed[4], lx.fail[4])
    assert not s.terminated


def test_coopcode_unused_call_deduction(cc):
    lx = cc.lex
    aux = (lx.def_aux,) + _lits(cc, [0])
    main = (lx.def_main,) + _lits(cc, [0]) + (lx.call, END)
    s = coopcode_reward(aux, main, [(0, 0)], lex=lx)
    assert s.deduction == 0.15
    assert s.reward == pytest.approx(0.7 + 0.3 * 0.5 - 0.15)


def test_coopcode_full_cooperation(cc):
    task = TaskInstance("CoopCode", {"tests": [[0, 2], [1, 0]]}, 2, 2)
    aux, main = cc.witness(task)
    s = cc.score(aux, main, cc.tests_of(task))
    assert s.reward == pytest.approx(1.0) and s.all_passed and s.cooperation == 1.0


def test_coopcode_syntax_gate(cc):
    lx = cc.lex
    s = coopcode_reward((END,), (lx.def_main, lx.use, END), [(0, 0)], lex=lx)
    assert s.stage == "syntax" and s.terminated and s.reward == 0.0


def test_coopcode_success_credit_and_return():
    env = CoopCodeEnv()
    task = builtin_suite("coopcode", "train", 2)[0]
    _, _, state = env.reset(task, 0)
    out = env.step(state, env.witness(task))
    assert out.reward == pytest.approx(2.0) == pytest.approx(env.optimal_return(task))


def test_coopcode_implicit_headers():
    env = CoopCodeEnv(implicit_headers=True, role_tokens=True)
    lx = env.lex
    assert lx.def_main not in env.allowed_set(1) and lx.def_aux not in env.allowed_set(0)
    assert not set(env.literal_tokens) & env.allowed_set(1)
    task = TaskInstance("CoopCode", {"tests": [[0, 1], [1, 0]]}, 2, 2)
    aux, main = env.witness(task)
    assert lx.def_main not in main
    assert env.score(aux, main, env.tests_of(task)).reward == pytest.approx(1.0)
    # an empty helper stays undefined, so calling it is a syntax error
    assert env.score((END,), (lx.call, lx.use, END), env.tests_of(task)).stage == "syntax"


# -- GridBuild reward ----------------------------------------------------------

def test_gridbuild_full_cover_no_penalties():
    target = {(0, 0), (0, 1), (1, 1)}
    placements = [((0, 0), "wood"), ((0, 1), "stone"), ((1, 1), "wood")]
    assert gridbuild_reward(placements, target, (2, 2)) == 2.0


def test_gridbuild_no_placements():
    assert gridbuild_reward([], {(0, 0)}, (2, 2)) == 0.0


def test_gridbuild_adjacent_same_texture():
    target = {(0, 0), (0, 1)}
    r = gridbuild_reward([((0, 0), "stone"), ((0, 1), "stone")], target, (1, 2))
    assert r == 2.0 - 0 - 1 / (2 * 1) == 1.5


def test_gridbuild_out_of_bounds_is_extra():
    s = gridbuild_score([((0, 0), "wood"), ((5, 5), "wood")], {(0, 0), (0, 1)}, (2, 2))
    assert s.extra == 1 and s.covered == 1
    assert s.total == pytest.approx(2 * 0.5 - 1.5 * 0.5)


def test_gridbuild_invalid_texture():
    with pytest.raises(ValidationError):
        gridbuild_score([((0, 0), "gold")], {(0, 0)}, (1, 1), allowed_textures={"wood"})


def test_gridbuild_witness_reaches_optimum():
    env = make_env("gridbuild")
    for task in builtin_suite("gridbuild", "test", 4):
        _, _, state = env.reset(task, 0)
        total = env.step(state, env.witness(task)).reward
        while not state.terminated:
            total += env.step(state, ((END,), (END,))).reward
        assert total == pytest.approx(env.optimal_return(task)) == pytest.approx(8.0)


# -- hazard --------------------------------------------------------------------

def test_hazard_penalty_examples():
    assert hazard_penalty(0.0, 4.0) == 0.0
    assert hazard_penalty(9.0, 4.0) == 0.2
    assert hazard_penalty(4.0, 4.0) == 0.2
    assert hazard_penalty(2.0, 4.0) == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        hazard_penalty(1.0, 0.0)


def test_hazard_spiders_damage_until_attacked():
    env = make_env("gridbuild_hazard")
    task = builtin_suite("gridbuild_hazard", "train", 3)[0]
    _, _, state = env.reset(task, 0)
    r0 = env.step(state, ((END,), (END,))).reward
    assert r0 == pytest.approx(-hazard_penalty(1.0, 4.0))
    out = env.step(state, ((env.attack, END), (END,)))
    assert env.spider not in out.next_obs[0]
    assert out.reward == pytest.approx(-hazard_penalty(1.0, 4.0))  # damage stays, no new damage


# -- enumeration -----------------------------------------------------------------

def test_enumeration_counts():
    env, task = table_micro(horizon=1)
    assert len(enumerate_trajectories(env, task)) == 4
    env, task = table_micro(horizon=2)
    trs = enumerate_trajectories(env, task)
    assert len(trs) == 16 and count_bound(env, task) == 16


def test_coopcode_micro_hand_count():
    # turn 0: (END, call_aux) is a syntax error and stops; the other 3 joint actions continue into 4 each
    env, task = coopcode_micro()
    trs = enumerate_trajectories(env, task)
    assert count_bound(env, task) == 16
    assert len(trs) == 1 + 3 * 4 == 13
    early = [t for t in trs if t.early]
    assert len(early) == 1 and early[0].actions[0] == ((END,), (env.lex.call,))
    rewards = sorted(sum(t.rewards) for t in trs)
    assert rewards.count(0.7) == 4 and rewards.count(0.0) == 3


def test_enumeration_cap():
    env, task = table_micro(horizon=2)
    with pytest.raises(CapExceeded) as e:
        enumerate_trajectories(env, task, cap=10)
    assert e.value.estimate == 16


# -- task files ------------------------------------------------------------------

def test_task_file_roundtrip(tmp_path):
    tasks = builtin_suite("gridbuild_hazard", "train", 4) + builtin_suite("coopcode", "test", 2)
    p = tmp_path / "tasks.json"
    save_tasks(tasks, p)
    assert load_tasks(p) == tasks


def test_task_unknown_field_rejected():
    with pytest.raises(ConfigurationError, match="colour"):
        task_from_dict({"env_kind": "GridBuild", "horizon": 2, "n_agents": 2, "payload": {"grid": ["#"]}, "colour": 1})
    with pytest.raises(ConfigurationError, match="size"):
        task_from_dict({"env_kind": "GridBuild", "horizon": 2, "n_agents": 2, "payload": {"grid": ["#"], "size": 3}})


def test_malformed_payload_names_field():
    env = make_env("coopcode")
    with pytest.raises(ConfigurationError, match="payload.tests"):
        env.reset(TaskInstance("CoopCode", {"tests": [[0, 9]]}, 2, 2), 0)
    with pytest.raises(ConfigurationError, match="payload.grid"):
        make_env("gridbuild").reset(TaskInstance("GridBuild", {"grid": ["#x#", "###"]}, 2, 2), 0)


# -- properties --------------------------------------------------------------------

def _random_action(env, agent, task, data):
    toks = sorted(env.allowed_set(agent, task))
    body = data.draw(st.lists(st.sampled_from([t for t in toks if t != END]), min_size=0, max_size=env.max_action_len))
    if len(body) < env.max_action_len:
        body = body + [END]
    return tuple(body)


@given(st.data())
def test_reward_purity_and_ranges(data):
    name = data.draw(st.sampled_from(["pairwrite", "coopcode", "gridbuild", "gridbuild_hazard"]))
    env = make_env(name)
    H = data.draw(st.integers(1, 4))
    tasks = builtin_suite(name, "train", H)
    task = tasks[data.draw(st.integers(0, len(tasks) - 1))]
    _, _, s1 = env.reset(task, 0)
    _, _, s2 = env.reset(task, 0)
    while not s1.terminated:
        acts = tuple(_random_action(env, i, task, data) for i in range(task.n_agents))
        o1 = env.step(s1, acts, np.random.default_rng(1))
        o2 = env.step(s2, acts, np.random.default_rng(1))
        assert o1.reward == o2.reward and o1.next_obs == o2.next_obs
        assert all(len(o) <= env.context_len for o in o1.next_obs)
        if name == "pairwrite":
            assert 0.0 <= o1.reward <= 1.0
        elif name.startswith("gridbuild"):
            assert -1.5 - 0.5 - 0.2 <= o1.reward <= 2.0
        else:
            assert -0.15 <= o1.reward <= 1.0 * H
        assert o1.global_info.turn == s1.turn


@given(st.lists(st.tuples(st.tuples(st.integers(-1, 3), st.integers(-1, 3)), st.sampled_from(["wood", "stone", "brick"])),
                max_size=12))
def test_gridbuild_score_bounds(placements):
    s = gridbuild_score(placements, {(0, 0), (0, 1), (1, 1)}, (2, 3))
    assert -1.5 - 0.5 <= s.total <= 2.0
    assert 0 <= s.covered <= s.n_target


def test_task_files_are_json(tmp_path):
    p = tmp_path / "t.json"
    save_tasks(builtin_suite("pairwrite", "train", 1), p)
    json.loads(p.read_text())
