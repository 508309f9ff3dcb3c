"""Run orchestration: manifest, metrics CSV, checkpoints, cost table and resume."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..core_env.tasks import builtin_suite, make_env
from ..errors import ConfigurationError
from ..trainers import METRIC_FIELDS, TrainConfig, Trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_config, parse_config

OUT_ROOT_VAR = "DECOLLAB_OUT"
COST_FIELDS = ("algorithm", "epochs", "rollouts", "samples", "updates")


def output_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUT_ROOT_VAR, "."))


def run_dir(cfg: TrainConfig, root=None) -> Path:
    p = Path(cfg.out_dir)
    return p if p.is_absolute() else output_root(root) / p


@dataclass(frozen=True)
class RunManifest:
    config: str
    seed: int
    code_version: str
    start_time: str
    episodes: int
    max_calls: int | None
    resumed_from: int | None
    outputs: dict

    def write(self, path: Path) -> None:
        if path.exists():
            raise ConfigurationError(f"{path} already exists; manifests are never overwritten")
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def cost_row(cfg: TrainConfig, calls: int, n_agents: int, updates: int) -> dict:
    """Cost-table row; ``samples`` counts joint samples, i.e. generation calls / n."""
    if calls % n_agents:
        raise ConfigurationError(f"{calls} generation calls do not split evenly over {n_agents} agents")
    return {"algorithm": cfg.algorithm, "epochs": cfg.epochs, "rollouts": cfg.rollouts_per_update,
            "samples": calls // n_agents, "updates": updates}


def format_table(rows, fields) -> str:
    cells = [[str(r[f]) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[k]) for c in cells)) if cells else len(f) for k, f in enumerate(fields)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(fields), line(["-" * w for w in widths])] + [line(c) for c in cells])


def _latest_checkpoint(ckdir: Path):
    found = sorted(ckdir.glob("ckpt_*.bin"))
    return found[-1] if found else None


def _truncate_metrics(path: Path, next_episode: int) -> None:
    """Drop rows at or beyond ``next_episode`` (written after the last checkpoint)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < next_episode]
    path.write_text("".join(keep))


def run(config, *, episodes: int | None = None, max_calls: int | None = None, root=None, resume: bool = False,
        checkpoint_every: int = 10, log=None) -> int:
    """Train from a config path (or TrainConfig); return a process exit status."""
    log = log or (lambda msg: print(msg, file=sys.stderr))
    trainer = None
    try:
        over = {}
        if episodes is not None:
            over["episodes"] = episodes
        if max_calls is not None:
            over["max_calls"] = max_calls
        if isinstance(config, TrainConfig):
            cfg = dataclasses.replace(config, **over)
        else:
            cfg = parse_config(config, **over)
        if checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be >= 1, got {checkpoint_every}")
        out = run_dir(cfg, root)
        ckdir = out / "checkpoints"
        metrics_path, timings_path = out / "metrics.csv", out / "timings.csv"
        ckdir.mkdir(parents=True, exist_ok=True)

        if not resume and metrics_path.exists():
            raise ConfigurationError(f"{out} already holds a run; pass --resume or choose another out_dir")
        env = make_env(cfg.env)
        trainer = Trainer(cfg, env, builtin_suite(cfg.env, "train", cfg.turns), builtin_suite(cfg.env, "test", cfg.turns))
        updates = 0
        resumed_from = None
        if resume:
            ck = _latest_checkpoint(ckdir)
            if ck is None:
                raise ConfigurationError(f"--resume given but {ckdir} holds no checkpoint")
            state = load_checkpoint(ck, vocab_size=env.vocab.size)
            trainer.policies, trainer.critics = state.policies, state.critics
            trainer.episode, trainer.calls, trainer.tf_calls = (state.meta[k] for k in ("episode", "calls", "tf_calls"))
            updates = state.meta["updates"]
            resumed_from = trainer.episode
            _truncate_metrics(metrics_path, trainer.episode)
            _truncate_metrics(timings_path, trainer.episode)

        name = "manifest.json" if resumed_from is None else f"manifest.resume-{resumed_from:06d}.json"
        RunManifest(
            config=format_config(cfg), seed=cfg.seed, code_version=__version__, start_time=_stamp(),
            episodes=cfg.episodes, max_calls=cfg.max_calls, resumed_from=resumed_from,
            outputs={"metrics": str(metrics_path), "timings": str(timings_path), "checkpoints": str(ckdir),
                     "costs": str(out / "costs.csv"), "finished": str(out / "finished.json")},
        ).write(out / name)

        def checkpoint():
            meta = {"episode": trainer.episode, "calls": trainer.calls, "tf_calls": trainer.tf_calls, "updates": updates,
                    "env": cfg.env, "turns": cfg.turns, "algorithm": cfg.algorithm}
            save_checkpoint(ckdir / f"ckpt_{trainer.episode:06d}.bin", trainer.policies, trainer.critics, meta)

        if resumed_from is None:
            checkpoint()
        new_file = not metrics_path.exists()
        with open(metrics_path, "a", newline="") as mf, open(timings_path, "a", newline="") as tf:
            mw, tw = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
            if new_file:
                mw.writerow(METRIC_FIELDS)
                tw.writerow(("episode", "wall_time"))
            while not trainer.done():
                point = trainer.run_episode()
                updates += cfg.epochs
                mw.writerow([_fmt(v) for v in point.row()])
                tw.writerow((point.episode, f"{point.wall_time:.6f}"))
                mf.flush()
                tf.flush()
                if trainer.episode % checkpoint_every == 0:
                    checkpoint()
        checkpoint()

        row = cost_row(cfg, trainer.calls, trainer.n_agents, updates)
        with open(out / "costs.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COST_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerow(row)
        (out / "finished.json").write_text(json.dumps(
            {"end_time": _stamp(), "episodes": trainer.episode, "calls": trainer.calls, "status": "ok"}, indent=2) + "\n")
        return 0
    except Exception as e:  # noqa: BLE001 - every fault becomes a diagnostic and a nonzero status
        parts = [f"episode {trainer.episode}"] if trainer is not None else []
        if hasattr(e, "turn"):
            parts.append(f"turn {e.turn}")
        where = f" ({', '.join(parts)})" if parts else ""
        log(f"error: {type(e).__name__}{where}: {e}")
        if os.environ.get("DECOLLAB_TRACEBACK"):
            log(traceback.format_exc())
        return 2


def read_metrics(path) -> list:
    """Rows of a metrics CSV as dicts of floats (ints for counters)."""
    ints = {"episode", "calls", "joint_samples", "tf_calls"}
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ints else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def best_return(env_name: str, turns: int, gamma: float = 1.0, split: str = "test") -> float:
    """Mean optimal return over the evaluation tasks (the normalizer for thresholds)."""
    env = make_env(env_name)
    return float(np.mean([env.optimal_return(t, gamma) for t in builtin_suite(env_name, split, turns)]))
