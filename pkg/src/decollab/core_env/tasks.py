"""Task files, the environment registry and the built-in desk task suites."""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import ConfigurationError
from .base import END, TaskInstance
from .coopcode import CoopCodeEnv
from .gridbuild import GridBuildEnv
from .micro import NoiseEnv, TableEnv
from .pairwrite import PairWriteEnv

TASK_FIELDS = ("env_kind", "horizon", "n_agents", "payload")
PAYLOAD_FIELDS = {
    "PairWrite": {"topics", "action_tokens"},
    "CoopCode": {"tests", "action_tokens"},
    "GridBuild": {"grid", "player_hp", "spiders", "action_tokens"},
    "Table": {"rewards", "reward_seed", "terminate", "action_tokens"},
    "Noise": {"action_tokens"},
}


def task_from_dict(d: dict) -> TaskInstance:
    if not isinstance(d, dict):
        raise ConfigurationError(f"task: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(TASK_FIELDS))
    if unknown:
        raise ConfigurationError(f"task: unknown field(s) {unknown}; allowed {list(TASK_FIELDS)}")
    missing = [k for k in TASK_FIELDS if k not in d]
    if missing:
        raise ConfigurationError(f"task: missing field(s) {missing}")
    kind = d["env_kind"]
    if kind not in PAYLOAD_FIELDS:
        raise ConfigurationError(f"env_kind: unknown kind {kind!r}; expected one of {sorted(PAYLOAD_FIELDS)}")
    payload = d["payload"]
    if not isinstance(payload, dict):
        raise ConfigurationError("payload: expected an object")
    bad = sorted(set(payload) - PAYLOAD_FIELDS[kind])
    if bad:
        raise ConfigurationError(f"payload: unknown field(s) {bad} for {kind}")
    return TaskInstance(kind, payload, d["horizon"], d["n_agents"])


def task_to_dict(task: TaskInstance) -> dict:
    return {"env_kind": task.env_kind, "horizon": task.horizon, "n_agents": task.n_agents, "payload": task.payload}


def load_tasks(path) -> list:
    """Read a JSON task file holding one task object or a list of them."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: not valid JSON ({e})") from None
    items = data if isinstance(data, list) else [data]
    if not items:
        raise ConfigurationError(f"{path}: no tasks")
    return [task_from_dict(d) for d in items]


def save_tasks(tasks, path) -> None:
    Path(path).write_text(json.dumps([task_to_dict(t) for t in tasks], indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Registry of desk-scale environments
# ---------------------------------------------------------------------------

def make_env(name: str):
    """Desk-scale environment for a config ``env`` name."""
    builders = {
        "pairwrite": lambda: PairWriteEnv(),
        "coopcode": lambda: CoopCodeEnv(n_literals=2, n_logic=2, max_tests=3, max_action_len=5,
                                        role_tokens=True, implicit_headers=True),
        # two placements per agent and turn: a four-cell target splits evenly
        "gridbuild": lambda: GridBuildEnv(max_action_len=2),
        "gridbuild_hazard": lambda: GridBuildEnv(hazard=True),
    }
    if name not in builders:
        raise ConfigurationError(f"env: unknown environment {name!r}; expected one of {sorted(builders)}")
    return builders[name]()


def _pairwrite_suite(split, horizon):
    pairs = [(a, b) for a in range(4) for b in range(4) if a != b]
    chosen = pairs[::2] if split == "train" else pairs[1::2]
    return [TaskInstance("PairWrite", {"topics": [a, b]}, horizon, 2) for a, b in chosen]


def _coopcode_suite(split, horizon):
    # two constant-output programs; the desk check measures learning speed, so both splits
    # hold the same tasks (position-dependent outputs are out of reach for the desk policies)
    vals = [[0, 0], [1, 1]]
    return [TaskInstance("CoopCode", {"tests": [[p, v] for p, v in enumerate(vs)]}, horizon, 2) for vs in vals]


def _gridbuild_suite(split, horizon, hazard=False):
    # four-cell targets, each coverable in one turn without same-texture neighbours
    train = [["##.", ".##"], ["##.", "##."], [".##", "##."], ["#.#", "#.#"], [".#.", "###"]]
    test = [["###", "#.."], [".##", ".##"], ["..#", "###"]]
    grids = train if split == "train" else test
    extra = {"player_hp": 4.0, "spiders": 1} if hazard else {}
    return [TaskInstance("GridBuild", {"grid": g, **extra}, horizon, 2) for g in grids]


def builtin_suite(name: str, split: str, horizon: int) -> list:
    """Train or held-out test tasks for a desk environment."""
    if split not in ("train", "test"):
        raise ConfigurationError(f"split: expected 'train' or 'test', got {split!r}")
    if name == "pairwrite":
        return _pairwrite_suite(split, horizon)
    if name == "coopcode":
        return _coopcode_suite(split, horizon)
    if name == "gridbuild":
        return _gridbuild_suite(split, horizon)
    if name == "gridbuild_hazard":
        return _gridbuild_suite(split, horizon, hazard=True)
    raise ConfigurationError(f"env: unknown environment {name!r}")


def coopcode_micro(horizon: int = 2) -> tuple:
    """Enumerable CoopCode instance: two tests, one token per agent per turn.

    Headers are implicit. aux chooses ``END`` (no helper) or ``lit1``;
    main chooses ``lit0`` (passes test 0 of 2) or ``call_aux`` (a syntax
    error without a helper, no output with one). With H=2 this gives 13
    trajectories against the 16 of a gate-free instance.
    """
    env = CoopCodeEnv(n_literals=2, n_logic=1, max_tests=2, max_action_len=1, context_len=8, implicit_headers=True)
    v = env.vocab
    aux = [END, v.id("lit1")]
    main = [v.id("lit0"), v.id("call_aux")]
    task = TaskInstance("CoopCode", {"tests": [[0, 0], [1, 1]], "action_tokens": [aux, main]}, horizon, 2)
    return env, task


def table_micro(horizon: int = 2, reward_seed: int = 0, n_agents: int = 2) -> tuple:
    return TableEnv(vocab_size=2), TaskInstance("Table", {"reward_seed": reward_seed}, horizon, n_agents)


def noise_micro(horizon: int = 2, shared: bool = False, n_agents: int = 2) -> tuple:
    return NoiseEnv(shared=shared), TaskInstance("Noise", {}, horizon, n_agents)
