"""Two-agent coding task over a toy language: an auxiliary helper and a main function."""
from __future__ import annotations

from ..errors import ConfigurationError
from .base import END, DecPOMDPEnv, TaskInstance, Vocab
from .rewards import CodeLexicon, coopcode_reward

AUX, MAIN = 0, 1


class CoopCodeEnv(DecPOMDPEnv):
    """Agent 0 writes ``aux``, agent 1 writes ``main``; their concatenation is tested.

    The prompt lists the expected output values. Feedback after each turn
    reports the gate that failed or the pass count and first failing test.
    With ``role_tokens`` each agent may only emit the tokens of its role:
    aux writes literals, main writes the call, the result use and logic,
    so no test can pass without both agents.
    With ``implicit_headers`` the prompt carries both function headers, so
    actions are bodies only and the header gate cannot fail.
    When ``success_credit`` is set, a program that passes every test is
    credited for all remaining turns, so finishing early never lowers the
    return.
    """

    kind = "CoopCode"

    def __init__(
        self,
        n_literals: int = 3,
        n_logic: int = 2,
        max_tests: int = 5,
        max_action_len: int = 6,
        context_len: int = 16,
        test_weight: float = 0.7,
        coop_weight: float = 0.3,
        deduction: float = 0.15,
        success_credit: bool = True,
        role_tokens: bool = False,
        implicit_headers: bool = False,
    ):
        roles = ["role_aux", "role_main", "spec"]
        fb = ["fb", "noheader", "synerr", "allpass"]
        passed = [f"pass{k}" for k in range(max_tests + 1)]
        fail = [f"fail{j}" for j in range(max_tests)]
        code = ["def_aux", "def_main", "call_aux", "use_result"]
        lits = [f"lit{k}" for k in range(n_literals)]
        logic = [f"logic{k}" for k in range(n_logic)]
        vocab = Vocab.build(roles, fb, passed, fail, code, lits, logic)
        super().__init__(vocab, max_action_len, context_len, reward_cap=test_weight + coop_weight)
        self.n_literals = n_literals
        self.max_tests = max_tests
        self.weights = dict(test_weight=test_weight, coop_weight=coop_weight, deduction=deduction)
        self.success_credit = success_credit
        self.role_tokens = role_tokens
        self.implicit_headers = implicit_headers
        self.roles = vocab.ids(["role_aux", "role_main"])
        self.spec_token = vocab.id("spec")
        self.code_tokens = vocab.ids(code)
        self.literal_tokens = vocab.ids(lits)
        self.logic_tokens = vocab.ids(logic)
        self.lex = CodeLexicon(
            def_aux=vocab.id("def_aux"),
            def_main=vocab.id("def_main"),
            call=vocab.id("call_aux"),
            use=vocab.id("use_result"),
            literals={t: k for k, t in enumerate(self.literal_tokens)},
            logic=frozenset(self.logic_tokens),
            fb=vocab.id("fb"),
            no_header=vocab.id("noheader"),
            syntax_error=vocab.id("synerr"),
            all_pass=vocab.id("allpass"),
            passed=vocab.ids(passed),
            fail=vocab.ids(fail),
        )

    def check_task(self, task: TaskInstance) -> None:
        super().check_task(task)
        if task.n_agents != 2:
            raise ConfigurationError("n_agents: CoopCode needs exactly 2 agents (aux, main)")
        tests = task.payload.get("tests")
        if not isinstance(tests, list) or not tests:
            raise ConfigurationError("payload.tests: expected a non-empty list of [position, value]")
        if len(tests) > self.max_tests:
            raise ConfigurationError(f"payload.tests: at most {self.max_tests} tests supported")
        for t in tests:
            if (
                not isinstance(t, (list, tuple)) or len(t) != 2
                or not all(isinstance(x, int) for x in t)
                or t[0] < 0 or not 0 <= t[1] < self.n_literals
            ):
                raise ConfigurationError(f"payload.tests: malformed test {t!r}")

    def action_tokens(self, agent: int) -> tuple:
        if self.role_tokens:
            # aux owns the literals, main only the header and the glue around the helper call
            heads = () if self.implicit_headers else ((self.lex.def_aux,), (self.lex.def_main,))
            if agent == AUX:
                return (END,) + (heads[0] if heads else ()) + self.literal_tokens
            return (END,) + (heads[1] if heads else ()) + (self.lex.call, self.lex.use) + self.logic_tokens
        return (END,) + self.code_tokens + self.literal_tokens + self.logic_tokens

    def tests_of(self, task: TaskInstance) -> tuple:
        return tuple((int(p), int(v)) for p, v in task.payload["tests"])

    def with_headers(self, aux, main):
        """Programs as scored: with ``implicit_headers`` the prompt supplies both headers."""
        if not self.implicit_headers:
            return tuple(aux), tuple(main)
        body = [t for t in aux if t != END]
        return ((self.lex.def_aux,) + tuple(aux) if body else tuple(aux)), (self.lex.def_main,) + tuple(main)

    def score(self, aux, main, tests):
        return coopcode_reward(*self.with_headers(aux, main), tests, lex=self.lex, **self.weights)

    def _initial(self, task, seed):
        tests = self.tests_of(task)
        spec = tuple(self.literal_tokens[v] for _, v in sorted(tests))
        obs = tuple((self.roles[i], self.spec_token) + spec for i in range(2))
        return obs, {"tests": tests}, None

    def _transition(self, state, joint_action, rng):
        s = self.score(joint_action[AUX], joint_action[MAIN], state.sys["tests"])
        reward = s.reward
        if s.all_passed and self.success_credit:
            reward *= state.task.horizon - state.turn
        obs = tuple((self.roles[i],) + s.feedback for i in range(2))
        info = {"stage": s.stage, "pass_fraction": s.pass_fraction, "all_passed": s.all_passed}
        return reward, obs, s.pass_fraction, s.terminated, info

    def witness(self, task: TaskInstance):
        """A joint program passing every test with full cooperation credit, or None."""
        tests = dict(self.tests_of(task))
        n_out = max(tests) + 1
        values = [tests.get(p, 0) for p in range(n_out)]
        lx = self.lex
        head_aux, head_main = ((), ()) if self.implicit_headers else ((lx.def_aux,), (lx.def_main,))
        aux = head_aux + tuple(self.literal_tokens[v] for v in values)
        logic = tuple(sorted(lx.logic))[:2]
        main = head_main + (lx.call, lx.use) + logic
        if len(aux) > self.max_action_len or len(main) > self.max_action_len:
            return None
        if len(main) < self.max_action_len:
            main = main + (END,)
        if len(aux) < self.max_action_len:
            aux = aux + (END,)
        return aux, main

    def optimal_return(self, task: TaskInstance, gamma: float = 1.0) -> float:
        w = self.witness(task)
        if w is None:
            raise ConfigurationError("max_action_len too small for a full-score witness")
        tests = self.tests_of(task)
        best = self.score(*w, tests).reward
        if self.success_credit:
            # credited immediately at t=0
            return best * task.horizon
        # without credit the best plan fails exactly one test until the last turn
        t = len(tests)
        near = self.weights["test_weight"] * (t - 1) / t + self.weights["coop_weight"] if t > 1 else 0.0
        H = task.horizon
        return max(
            best,
            sum(near * gamma**k for k in range(H - 1)) + best * gamma ** (H - 1),
        )
