"""Multi-seed algorithm comparisons on eval-return-versus-calls curves.

Each run's eval curve is EMA-smoothed in call units, held piecewise
constant between points and averaged across seeds on a shared call grid.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core_env.tasks import builtin_suite, make_env
from ..trainers import TrainConfig, Trainer
from .stats import area_under_curve, bootstrap_ci, ema_smooth, first_crossing


@dataclass
class RunCurve:
    algorithm: str
    seed: int
    calls: np.ndarray
    eval_return: np.ndarray
    train_return: np.ndarray
    wall_time: float

    def smoothed(self, alpha: float) -> list:
        return ema_smooth(list(zip(self.calls.tolist(), self.eval_return.tolist())), alpha)

    def final_ci(self, tail: int = 10, level: float = 0.95, seed: int = 0) -> tuple:
        """Bootstrap interval of the mean eval return over the last ``tail`` episodes."""
        return bootstrap_ci(self.eval_return[-tail:], level=level, seed=seed)


def run_curve(cfg: TrainConfig, env=None, train_tasks=None, eval_tasks=None) -> RunCurve:
    env = env or make_env(cfg.env)
    train_tasks = train_tasks or builtin_suite(cfg.env, "train", cfg.turns)
    eval_tasks = eval_tasks or builtin_suite(cfg.env, "test", cfg.turns)
    tr = Trainer(cfg, env, train_tasks, eval_tasks)
    calls, ev, trn = [], [], []
    t0 = time.perf_counter()
    while not tr.done():
        p = tr.run_episode()
        calls.append(p.calls)
        ev.append(p.eval_return)
        trn.append(p.train_return)
    return RunCurve(cfg.algorithm, cfg.seed, np.array(calls), np.array(ev), np.array(trn), time.perf_counter() - t0)


def mean_curve(curves: Sequence[RunCurve], alpha: float, grid: np.ndarray) -> np.ndarray:
    """Seed-mean of the smoothed curves, each held constant to the right of its points.

    Grid points before a run's first point take that run's first value.
    """
    out = []
    for c in curves:
        xs, ys = zip(*c.smoothed(alpha))
        idx = np.searchsorted(np.asarray(xs), grid, side="right") - 1
        out.append(np.asarray(ys)[np.maximum(idx, 0)])
    return np.mean(out, axis=0)


@dataclass
class Comparison:
    curves: dict  # algorithm -> list of RunCurve
    best: float
    alpha: float
    budget: int = field(init=False)
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # common budget: the smallest total call count any run reached
        self.budget = int(min(c.calls[-1] for cs in self.curves.values() for c in cs))
        self.grid = np.unique(np.concatenate([c.calls for cs in self.curves.values() for c in cs]))
        self.grid = self.grid[self.grid <= self.budget]

    def mean(self, alg: str) -> np.ndarray:
        return mean_curve(self.curves[alg], self.alpha, self.grid)

    def series(self, alg: str) -> list:
        return list(zip(self.grid.tolist(), self.mean(alg).tolist()))

    def peak_fraction(self, alg: str) -> float:
        return float(self.mean(alg).max() / self.best)

    def calls_to(self, alg: str, fraction: float = 0.9):
        return first_crossing(self.series(alg), fraction * self.best)

    def auc(self, alg: str) -> float:
        return area_under_curve(self.series(alg), self.budget)

    def table(self, fraction: float = 0.9) -> str:
        lines = [f"best return {self.best:.4f}; call budget {self.budget}; threshold {fraction:.2f} x best",
                 "algorithm   peak/best  calls-to-threshold  auc      final(mean eval, last 10)"]
        for alg, cs in self.curves.items():
            fin = np.mean([c.eval_return[-10:].mean() for c in cs])
            ct = self.calls_to(alg, fraction)
            lines.append(f"{alg:<11} {self.peak_fraction(alg):<10.3f} {str(ct):<19} {self.auc(alg):<8.4f} {fin:.4f}")
        return "\n".join(lines)


def compare(configs: dict, seeds: Sequence[int], best: float, alpha: float = 0.01, env_factory=None,
            train_tasks=None, eval_tasks=None) -> Comparison:
    """Run every config (algorithm label -> TrainConfig) for every seed."""
    curves = {}
    for label, cfg in configs.items():
        curves[label] = [
            run_curve(dataclasses.replace(cfg, seed=s), env_factory() if env_factory else None, train_tasks, eval_tasks)
            for s in seeds
        ]
    return Comparison(curves, best, alpha)
