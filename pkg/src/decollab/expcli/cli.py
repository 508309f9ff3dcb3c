"""Command line: ``train``, ``verify props``, ``eval`` and ``costs``."""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from ..core_env.tasks import builtin_suite, make_env
from ..errors import DecollabError
from ..rollout import predicted_calls, rollout_episode
from ..trainers import TREE_ALGORITHMS, episode_rng
from .checkpoint import load_checkpoint
from .config import parse_config
from .runner import COST_FIELDS, cost_row, format_table, run, run_dir


def _train(args) -> int:
    return run(args.config, episodes=args.episodes, max_calls=args.max_calls, resume=args.resume,
               checkpoint_every=args.checkpoint_every)


def _verify(args) -> int:
    from .. import estimator_lab as lab

    t0 = time.perf_counter()
    if args.which == 1:
        env, task, policies = lab.unbiasedness_instance(seed=args.seed)
        reps = args.replicates or 100_000
        rep, samples = lab.unbiasedness_test(env, task, policies, K=args.K, replicates=reps, seed=args.seed,
                                             return_samples=True)
        power = lab.power_check(samples, rep.exact, seed=args.seed)
        rows = [{"component": k, "exact": f"{e:.6g}", "mean": f"{m:.6g}", "stderr": f"{s:.3g}"}
                for k, (e, m, s) in enumerate(zip(rep.exact, rep.mean, rep.stderr))]
        print(format_table(rows, ("component", "exact", "mean", "stderr")))
        print(f"replicates={reps} K={args.K} inside 99% CI: {rep.n_inside}/{rep.n_components} "
              f"({rep.frac_inside:.3f}); power at 0.1 sd bias: {power:.2f}")
        ok = rep.passed and power >= 0.99
    elif args.which == 2:
        reps = args.replicates or 10_000
        ok = True
        for shared in (False, True):
            r = lab.variance_scaling_test(replicates=reps, seed=args.seed, shared=shared)
            print(f"{'shared' if shared else 'independent'} noise, {reps} replicates")
            print(r.table())
            if shared:
                worst = max(c.ratio / c.predicted for c in r.cells)
                print(f"largest ratio / prediction: {worst:.2f} (the law should break, > 1.5)")
                ok &= worst > 1.5
            else:
                ok &= r.passed
    else:
        rows = lab.call_count_sweep(seed=args.seed)
        print(format_table([r._asdict() for r in rows], ("n", "K", "H", "measured", "predicted")))
        ok = all(r.measured == r.predicted for r in rows)
    print(f"{'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f} s)")
    return 0 if ok else 1


def _eval(args) -> int:
    env = make_env(args.env)
    ck = load_checkpoint(args.checkpoint, vocab_size=env.vocab.size)
    turns = args.turns or ck.meta.get("turns")
    if turns is None:
        raise DecollabError("checkpoint does not record the number of turns; pass --turns")
    tasks = builtin_suite(args.env, args.split, turns)
    rng = episode_rng(args.seed, 0, stream=2)
    rets = []
    for j in range(args.episodes):
        _, ret, _ = rollout_episode(env, tasks[j % len(tasks)], ck.policies, rng, seed=int(rng.integers(2**31)))
        rets.append(ret)
    best = np.mean([env.optimal_return(t) for t in tasks])
    print(format_table([{"episodes": len(rets), "mean_return": f"{np.mean(rets):.4f}",
                         "std": f"{np.std(rets):.4f}", "best": f"{best:.4f}"}],
                       ("episodes", "mean_return", "std", "best")))
    return 0


def _costs(args) -> int:
    cfg = parse_config(args.config)
    out = run_dir(cfg)
    ck_dir = out / "checkpoints"
    found = sorted(ck_dir.glob("ckpt_*.bin")) if ck_dir.exists() else []
    n = builtin_suite(cfg.env, "train", cfg.turns)[0].n_agents
    if found:
        meta = load_checkpoint(found[-1]).meta
        row = cost_row(cfg, meta["calls"], n, meta["updates"])
        print(f"run in {out}, {meta['episode']} episodes")
    else:
        # per-episode accounting without early termination
        if cfg.algorithm in TREE_ALGORITHMS:
            calls = predicted_calls(n, cfg.generations, cfg.turns)
        else:
            calls = n * cfg.turns * cfg.rollouts_per_update
        row = cost_row(cfg, calls, n, cfg.epochs)
        print("no run found; per-episode figures assuming no early termination")
    print(format_table([row], COST_FIELDS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decollab", description="Train and verify cooperative sequence policies.")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.add_argument("--episodes", type=int, default=None, help="episode budget (default 100)")
    t.add_argument("--max-calls", type=int, default=None, help="stop once this many generation calls are used")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in out_dir")
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.set_defaults(fn=_train)

    v = sub.add_parser("verify", help="run an estimator property check")
    v.add_argument("what", choices=["props"])
    v.add_argument("--which", type=int, choices=[1, 2, 3], required=True,
                   help="1 unbiasedness, 2 variance law, 3 call counts")
    v.add_argument("--replicates", type=int, default=None)
    v.add_argument("--K", type=int, default=2)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=_verify)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out tasks")
    e.add_argument("checkpoint")
    e.add_argument("env")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--turns", type=int, default=None)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_eval)

    c = sub.add_parser("costs", help="print the cost table of a config (or of its finished run)")
    c.add_argument("config")
    c.set_defaults(fn=_costs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DecollabError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
