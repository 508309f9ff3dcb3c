"""Multi-turn building task: agents place textured blocks on a small grid.

Each agent owns a few texture slots. Token ``place{cell}.{slot}`` puts the
agent's ``slot``-th texture on ``cell`` (row-major index). The reward of a
turn is the score of every placement made so far, so early coverage earns
credit on every remaining turn. With ``hazard`` enabled, spiders in the
simulated-user state damage the player each turn until attacked.
"""
from __future__ import annotations

from ..errors import ConfigurationError
from .base import END, DecPOMDPEnv, TaskInstance, Vocab
from .rewards import gridbuild_score, hazard_penalty, parse_grid

DEFAULT_TEXTURES = (("wood", "stone"), ("stone", "brick"))


class GridBuildEnv(DecPOMDPEnv):
    kind = "GridBuild"
    has_early_termination = False

    def __init__(
        self,
        rows: int = 2,
        cols: int = 3,
        textures=DEFAULT_TEXTURES,
        max_action_len: int = 3,
        context_len: int = 16,
        max_feedback: int = 8,
        hazard: bool = False,
        spider_damage: float = 1.0,
    ):
        self.rows, self.cols = rows, cols
        self.textures = tuple(tuple(t) for t in textures)
        n_slots = max(len(t) for t in self.textures)
        cells = [f"cell{c}" for c in range(rows * cols)]
        place = [f"place{c}.{s}" for c in range(rows * cols) for s in range(n_slots)]
        roles = [f"role{i}" for i in range(len(self.textures))]
        extra = ["fb", "done", "spider", "attack"]
        vocab = Vocab.build(roles, extra, cells, place)
        super().__init__(vocab, max_action_len, context_len, reward_cap=2.0)
        self.n_slots = n_slots
        self.max_feedback = max_feedback
        self.hazard = hazard
        self.spider_damage = float(spider_damage)
        self.roles = vocab.ids(roles)
        self.fb, self.done, self.spider, self.attack = vocab.ids(extra)
        self.cell_tokens = vocab.ids(cells)
        self.place_tokens = vocab.ids(place)
        # token -> (cell index, slot)
        self.decode = {t: divmod(k, n_slots) for k, t in enumerate(self.place_tokens)}

    # -- task handling --------------------------------------------------
    def check_task(self, task: TaskInstance) -> None:
        super().check_task(task)
        if task.n_agents != len(self.textures):
            raise ConfigurationError(
                f"n_agents: this GridBuild instance has {len(self.textures)} texture sets, got {task.n_agents}"
            )
        grid = task.payload.get("grid")
        if not isinstance(grid, list) or not all(isinstance(r, str) for r in grid):
            raise ConfigurationError("payload.grid: expected a list of '#'/'.' row strings")
        try:
            parse_grid(grid)
        except ValueError as e:
            raise ConfigurationError(f"payload.grid: {e}") from None
        if len(grid) != self.rows or len(grid[0]) != self.cols:
            raise ConfigurationError(f"payload.grid: expected {self.rows}x{self.cols}, got {len(grid)}x{len(grid[0])}")
        if self.hazard:
            hp = task.payload.get("player_hp")
            sp = task.payload.get("spiders")
            if not isinstance(hp, (int, float)) or hp <= 0:
                raise ConfigurationError("payload.player_hp: expected a positive number")
            if not isinstance(sp, int) or sp < 0:
                raise ConfigurationError("payload.spiders: expected a non-negative integer")

    def target_of(self, task: TaskInstance) -> frozenset:
        return parse_grid(task.payload["grid"])

    def action_tokens(self, agent: int) -> tuple:
        k = len(self.textures[agent])
        place = tuple(t for t in self.place_tokens if self.decode[t][1] < k)
        return (END,) + place + ((self.attack,) if self.hazard else ())

    def placements(self, agent: int, action) -> list:
        out = []
        for t in action:
            if t in self.decode:
                c, s = self.decode[t]
                out.append((divmod(c, self.cols), self.textures[agent][s]))
        return out

    # -- dynamics -------------------------------------------------------
    def _initial(self, task, seed):
        target = self.target_of(task)
        tgt = tuple(self.cell_tokens[r * self.cols + c] for r, c in sorted(target))
        obs = tuple((self.roles[i],) + tgt for i in range(task.n_agents))
        sys_part = {"target": target, "placements": (), "damage": 0.0}
        usr = None
        if self.hazard:
            sys_part["player_hp"] = float(task.payload["player_hp"])
            usr = {"spiders": int(task.payload["spiders"])}
        return obs, sys_part, usr

    def _transition(self, state, joint_action, rng):
        sys_part = state.sys
        new = []
        for i, a in enumerate(joint_action):
            new.extend(self.placements(i, a))
        sys_part["placements"] = sys_part["placements"] + tuple(new)
        if self.hazard:
            attacks = sum(a.count(self.attack) for a in joint_action)
            state.usr["spiders"] = max(0, state.usr["spiders"] - attacks)
            sys_part["damage"] += self.spider_damage * state.usr["spiders"]
        reward, s = self.reward(sys_part)
        spiders = state.usr["spiders"] if self.hazard else 0
        obs = self._feedback(sys_part, spiders, state.task.n_agents)
        info = {"covered": s.covered, "extra": s.extra, "same_pairs": s.same_pairs}
        return reward, obs, s.covered / s.n_target, False, info

    def reward(self, sys_part):
        s = gridbuild_score(sys_part["placements"], sys_part["target"], (self.rows, self.cols))
        total = s.total
        if self.hazard:
            total -= hazard_penalty(sys_part["damage"], sys_part["player_hp"])
        return total, s

    def _feedback(self, sys_part, spiders, n):
        placed = {cell for cell, _ in sys_part["placements"]}
        missing = sorted(sys_part["target"] - placed)
        if missing:
            body = tuple(self.cell_tokens[r * self.cols + c] for r, c in missing[: self.max_feedback])
        else:
            body = (self.done,)
        if spiders:
            body = body + (self.spider,)
        return tuple((self.roles[i], self.fb) + body for i in range(n))

    # -- oracle support -------------------------------------------------
    def witness(self, task: TaskInstance):
        """Joint turn-0 action covering the target with no extra and no same-texture pair, or None."""
        target = sorted(self.target_of(task))
        # two distinct textures assigned by checkerboard parity
        all_tex = sorted({t for ts in self.textures for t in ts})
        if len(all_tex) < 2:
            return None
        acts = [[] for _ in self.textures]
        for r, c in target:
            want = all_tex[(r + c) % 2]
            choices = [i for i, ts in enumerate(self.textures) if want in ts]
            if not choices:
                return None
            i = min(choices, key=lambda j: len(acts[j]))
            s = self.textures[i].index(want)
            acts[i].append(self.place_tokens[(r * self.cols + c) * self.n_slots + s])
        if self.hazard:
            spiders = int(task.payload["spiders"])
            for k in range(spiders):
                acts[k % len(acts)].append(self.attack)
        out = []
        for a in acts:
            if len(a) > self.max_action_len:
                return None
            if len(a) < self.max_action_len:
                a = a + [END]
            out.append(tuple(a))
        return tuple(out)

    def optimal_return(self, task: TaskInstance, gamma: float = 1.0) -> float:
        w = self.witness(task)
        if w is None:
            raise ConfigurationError("no single-turn full-score witness for this task and action length")
        # 2.0 is the per-turn maximum; the witness reaches it at every turn
        return sum(2.0 * gamma**t for t in range(task.horizon))
