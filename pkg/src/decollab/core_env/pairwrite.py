"""Two-agent writing task: a short and a long completion that should read as one text."""
from __future__ import annotations

from ..errors import ConfigurationError
from .base import END, DecPOMDPEnv, TaskInstance, Vocab
from .rewards import pairwrite_reward


class PairWriteEnv(DecPOMDPEnv):
    kind = "PairWrite"

    def __init__(
        self,
        n_topics: int = 4,
        n_words: int = 6,
        max_action_len: int = 6,
        context_len: int = 16,
        weights=(0.4, 0.3, 0.3),
        n_categories: int = 12,
        category_size: int = 2,
        full_band=(1.6, 3.2),
        partial_band=(1.1, 5.0),
        style_cap: float = 0.03,
        coherence_scale: float = 0.6,
    ):
        roles = ["role0", "role1"]
        status = ["fb", "short", "inband", "long"]
        topics = [f"topic{k}" for k in range(n_topics)]
        trans = [f"tr{c}.{j}" for c in range(n_categories) for j in range(category_size)]
        words = [f"w{k}" for k in range(n_words)]
        vocab = Vocab.build(roles, status, topics, trans, words)
        super().__init__(vocab, max_action_len, context_len, reward_cap=float(sum(weights)))
        self.weights = tuple(float(w) for w in weights)
        self.full_band = tuple(full_band)
        self.partial_band = tuple(partial_band)
        self.style_cap = style_cap
        self.coherence_scale = coherence_scale
        self.n_topics = n_topics
        self.roles = vocab.ids(roles)
        self.fb, self.short, self.inband, self.long = vocab.ids(status)
        self.topics = vocab.ids(topics)
        self.transitions = vocab.ids(trans)
        self.words = vocab.ids(words)
        self.categories = {t: k // category_size for k, t in enumerate(self.transitions)}

    def check_task(self, task: TaskInstance) -> None:
        super().check_task(task)
        if task.n_agents != 2:
            raise ConfigurationError("n_agents: PairWrite needs exactly 2 agents")
        topics = task.payload.get("topics")
        if not isinstance(topics, list) or len(topics) != 2:
            raise ConfigurationError("payload.topics: expected a list of 2 topic indices")
        for t in topics:
            if not isinstance(t, int) or not 0 <= t < self.n_topics:
                raise ConfigurationError(f"payload.topics: index {t!r} outside [0, {self.n_topics})")

    def action_tokens(self, agent: int) -> tuple:
        return (END,) + self.transitions + self.words

    def score(self, a1, a2):
        return pairwrite_reward(
            a1, a2, self.weights,
            categories=self.categories,
            full_band=self.full_band,
            partial_band=self.partial_band,
            style_cap=self.style_cap,
            coherence_scale=self.coherence_scale,
        )

    def _initial(self, task, seed):
        obs = tuple((self.roles[i], self.topics[t]) for i, t in enumerate(task.payload["topics"]))
        return obs, {"topics": tuple(task.payload["topics"])}, None

    def _transition(self, state, joint_action, rng):
        s = self.score(*joint_action)
        n1 = sum(1 for t in joint_action[0] if t != END)
        n2 = sum(1 for t in joint_action[1] if t != END)
        ratio = n2 / n1 if n1 else float("inf")
        if ratio < self.full_band[0]:
            status = self.short
        elif ratio > self.full_band[1]:
            status = self.long
        else:
            status = self.inband
        obs = tuple((self.roles[i], self.fb, status) for i in range(2))
        info = {"structure": s.structure, "style": s.style, "coherence": s.coherence}
        return s.total, obs, s.total / self.reward_cap, s.terminate, info

    def witness(self):
        """A joint action scoring the maximum per-turn reward."""
        tr = self.transitions
        cs = len(tr) // len(set(self.categories.values()))
        a1 = (tr[0], tr[cs], END)
        a2 = (tr[0], tr[2 * cs], tr[3 * cs], tr[4 * cs], END)
        return a1, a2

    def optimal_return(self, task: TaskInstance, gamma: float = 1.0) -> float:
        a1, a2 = self.witness()
        if max(len(a1), len(a2)) > self.max_action_len:
            raise ConfigurationError("max_action_len too small for a full-score witness")
        per_turn = self.score(a1, a2).total
        return sum(per_turn * gamma**t for t in range(task.horizon))
