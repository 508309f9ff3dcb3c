import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decollab.critics import CriticParams
from decollab.errors import ChecksumError, ConfigurationError, ValidationError
from decollab.expcli.checkpoint import checkpoint_roundtrip, load_checkpoint, save_checkpoint
from decollab.expcli.cli import main
from decollab.expcli.config import parse_config, parse_config_text, preset_names, resolve_config, format_config
from decollab.expcli.runner import COST_FIELDS, read_metrics, run
from decollab.expcli.stats import area_under_curve, bootstrap_ci, ema_smooth, first_crossing
from decollab.seqpolicy import PolicyParams
from decollab.trainers import METRIC_FIELDS

VALID = """\
algorithm = collm_cc
env = pairwrite
turns = 1
generations = 4
epochs = 2
agent_lr = 0.05
critic_lr = 0.01
gamma = 1.0
advantage_clip = 0.2
minibatch = 4
buffer = 4
eval_samples = 2
seed = 0
out_dir = runs/test
"""


def preset(name):
    return parse_config(resolve_config(name))


# -- config --------------------------------------------------------------------------

def test_parse_valid_and_roundtrip():
    cfg = parse_config_text(VALID)
    assert cfg.algorithm == "collm_cc" and cfg.turns == 1 and cfg.agent_lr == 0.05
    assert parse_config_text(format_config(cfg)) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="learning_rate"):
        parse_config_text(VALID + "learning_rate = 0.1\n")


def test_missing_and_duplicate_keys():
    with pytest.raises(ConfigurationError, match="seed"):
        parse_config_text(VALID.replace("seed = 0\n", ""))
    with pytest.raises(ConfigurationError, match="seed"):
        parse_config_text(VALID + "seed = 1\n")


@pytest.mark.parametrize("line,key", [("turns = 0", "turns"), ("advantage_clip = 1.5", "advantage_clip"),
                                      ("gamma = x", "gamma"), ("algorithm = ppo", "algorithm")])
def test_out_of_domain_names_key(line, key):
    k = line.split()[0]
    text = "\n".join(line if ln.startswith(k + " ") else ln for ln in VALID.splitlines())
    with pytest.raises(ConfigurationError, match=key):
        parse_config_text(text)


def test_algorithm_aliases():
    assert parse_config_text(VALID.replace("collm_cc", "CoLLM-CC")).algorithm == "collm_cc"


def test_presets():
    names = preset_names()
    assert len([n for n in names if n.startswith("paper/")]) == 12
    coding = preset("paper/coding_magrpo")
    assert (coding.turns, coding.generations) == (2, 4)
    assert preset("paper/strbuild_collm_cc").advantage_clip == 0.05
    assert preset("paper/housebuild_magrpo").advantage_clip == 0.05
    assert preset("paper/coding_magrpo").agent_lr == 2e-5
    assert preset("paper/coding_collm_cc").agent_lr == 5e-6


def test_cost_rollouts_from_presets():
    assert preset("paper/coding_magrpo").rollouts_per_update == 16
    assert preset("paper/coding_collm_cc").rollouts_per_update == 2
    assert preset("paper/coding_collm_dc").rollouts_per_update == 2


# -- stats ------------------------------------------------------------------------------

def test_ema_hand_example():
    ys = [0, 1, 0, 1, 0]
    got = [y for _, y in ema_smooth(list(enumerate(ys)), 0.5)]
    assert got == [0.0, 0.5, 0.25, 0.625, 0.3125]


@given(st.floats(-10, 10), st.integers(2, 20), st.floats(0.01, 1.0))
def test_ema_constant_unchanged(c, n, alpha):
    out = ema_smooth([(k, c) for k in range(n)], alpha)
    assert all(y == pytest.approx(c, abs=1e-12) for _, y in out)


def test_ema_alpha_one_identity_and_gaps():
    pts = [(0, 1.0), (3, 5.0), (4, -2.0)]
    assert ema_smooth(pts, 1.0) == pts
    # a gap of 2 at alpha 0.5 weighs the new point by 0.75
    assert ema_smooth([(0, 0.0), (2, 1.0)], 0.5)[1][1] == pytest.approx(0.75)
    with pytest.raises(ValidationError):
        ema_smooth([(1, 0), (1, 1)], 0.5)
    with pytest.raises(ValidationError):
        ema_smooth(pts, 0.0)


def test_bootstrap_constant_and_errors():
    assert bootstrap_ci([2.5] * 10) == (2.5, 2.5)
    with pytest.raises(ValidationError):
        bootstrap_ci([1.0])
    with pytest.raises(ValidationError):
        bootstrap_ci([1.0, 2.0], level=1.0)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.floats(-100, 100))
def test_bootstrap_shift_equivariance(xs, c):
    lo, hi = bootstrap_ci(xs, resamples=500, seed=1)
    lo2, hi2 = bootstrap_ci([x + c for x in xs], resamples=500, seed=1)
    assert lo2 == pytest.approx(lo + c, abs=1e-9) and hi2 == pytest.approx(hi + c, abs=1e-9)


def test_bootstrap_coverage():
    rng = np.random.default_rng(7)
    hits = 0
    for k in range(1000):
        lo, hi = bootstrap_ci(rng.normal(size=100), 0.95, resamples=1000, seed=k)
        hits += lo <= 0.0 <= hi
    # percentile intervals undercover slightly at n=100; 1000 trials have sd ~0.007
    assert 0.92 <= hits / 1000 <= 0.975


def test_bootstrap_deterministic():
    xs = list(np.random.default_rng(0).normal(size=20))
    assert bootstrap_ci(xs, seed=3) == bootstrap_ci(xs, seed=3)


def test_crossing_and_auc():
    s = [(0, 0.0), (10, 0.5), (20, 1.0)]
    assert first_crossing(s, 0.4) == 10 and first_crossing(s, 2.0) is None
    assert area_under_curve(s, 30) == pytest.approx((0 * 10 + 0.5 * 10 + 1.0 * 10) / 30)


# -- checkpoints ---------------------------------------------------------------------------

def params(rng):
    pol = [PolicyParams(rng.normal(size=(5, 32)), 1 + i, 0.6, allowed=(0, 2, 3)) for i in range(2)]
    cc = CriticParams.zeros("cc", 2, 3, d_agent=16)
    cc = cc.with_weights(rng.normal(size=cc.dim))
    return pol, [cc]


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    pol, crit = params(rng)
    back = checkpoint_roundtrip(pol, crit, tmp_path / "a.bin")
    for a, b in zip(pol, back.policies):
        assert a.weights.tobytes() == b.weights.tobytes()
        assert (a.hash_seed, a.temperature, a.allowed) == (b.hash_seed, b.temperature, b.allowed)
    assert back.critics[0].weights.tobytes() == crit[0].weights.tobytes()
    assert back.critics[0].kind == "cc"


def test_checkpoint_corruption_named(tmp_path, rng):
    pol, crit = params(rng)
    path = save_checkpoint(tmp_path / "a.bin", pol, crit, {"episode": 3})
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="checksum|sha"):
        load_checkpoint(path)
    path.write_bytes(b"garbage\n")
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_vocab_mismatch(tmp_path, rng):
    pol, crit = params(rng)
    path = save_checkpoint(tmp_path / "a.bin", pol, crit)
    assert load_checkpoint(path, vocab_size=5).meta == {}
    with pytest.raises(ConfigurationError, match="vocab"):
        load_checkpoint(path, vocab_size=7)


# -- runs -------------------------------------------------------------------------------------

def write_cfg(tmp_path, **kw):
    text = VALID
    for k, v in kw.items():
        text = "\n".join(f"{k} = {v}" if ln.startswith(k + " ") else ln for ln in text.splitlines()) + "\n"
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_run_outputs(tmp_path):
    cfg = write_cfg(tmp_path, out_dir="out")
    assert run(cfg, episodes=4, root=tmp_path, log=lambda m: None) == 0
    out = tmp_path / "out"
    rows = read_metrics(out / "metrics.csv")
    assert [r["episode"] for r in rows] == [0, 1, 2, 3]
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_FIELDS)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "algorithm = collm_cc" in manifest["config"]
    with open(out / "costs.csv") as fh:
        cost = next(csv.DictReader(fh))
    assert tuple(cost) == COST_FIELDS
    # costs reconcile with the metric stream
    assert int(cost["samples"]) == rows[-1]["joint_samples"] and int(cost["updates"]) == 4 * 2
    assert int(cost["rollouts"]) == 4
    assert json.loads((out / "finished.json").read_text())["episodes"] == 4


def test_run_refuses_to_overwrite(tmp_path):
    cfg = write_cfg(tmp_path, out_dir="out")
    assert run(cfg, episodes=1, root=tmp_path, log=lambda m: None) == 0
    msgs = []
    assert run(cfg, episodes=1, root=tmp_path, log=msgs.append) == 2
    assert "already holds a run" in msgs[0]


def test_identical_runs_byte_identical(tmp_path):
    a = write_cfg(tmp_path, out_dir="a")
    assert run(a, episodes=5, root=tmp_path, log=lambda m: None) == 0
    b = write_cfg(tmp_path, out_dir="b")
    assert run(b, episodes=5, root=tmp_path, log=lambda m: None) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_continues_stream(tmp_path):
    full = write_cfg(tmp_path, out_dir="full")
    assert run(full, episodes=7, root=tmp_path, log=lambda m: None) == 0
    part = write_cfg(tmp_path, out_dir="part")
    assert run(part, episodes=3, root=tmp_path, checkpoint_every=2, log=lambda m: None) == 0
    assert run(part, episodes=7, root=tmp_path, resume=True, checkpoint_every=2, log=lambda m: None) == 0
    rows = read_metrics(tmp_path / "part" / "metrics.csv")
    assert [r["episode"] for r in rows] == list(range(7))
    assert (tmp_path / "part" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    assert (tmp_path / "part" / "manifest.resume-000003.json").exists()


def test_run_fault_is_structured(tmp_path):
    cfg = write_cfg(tmp_path, out_dir="bad", env="nowhere")
    msgs = []
    assert run(cfg, episodes=1, root=tmp_path, log=msgs.append) == 2
    assert msgs[0].startswith("error: ConfigurationError") and "nowhere" in msgs[0]


# -- command line -------------------------------------------------------------------------------

def test_cli_costs(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DECOLLAB_OUT", str(tmp_path))
    assert main(["costs", "paper/coding_magrpo"]) == 0
    out = capsys.readouterr().out
    header, _, row = out.strip().splitlines()[-3:]
    assert dict(zip(header.split(), row.split()))["rollouts"] == "16"
    assert main(["costs", "paper/coding_collm_cc"]) == 0
    header, _, row = capsys.readouterr().out.strip().splitlines()[-3:]
    assert dict(zip(header.split(), row.split()))["rollouts"] == "2"


def test_cli_train_eval_and_verify(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DECOLLAB_OUT", str(tmp_path))
    cfg = write_cfg(tmp_path, out_dir="cli")
    assert main(["train", str(cfg), "--episodes", "2"]) == 0
    ck = sorted((tmp_path / "cli" / "checkpoints").glob("*.bin"))[-1]
    assert main(["eval", str(ck), "pairwrite", "--episodes", "2"]) == 0
    assert "mean_return" in capsys.readouterr().out
    assert main(["verify", "props", "--which", "3"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_bad_config(capsys, tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text(VALID + "learning_rate = 1\n")
    assert main(["costs", str(p)]) == 2
    assert "learning_rate" in capsys.readouterr().err
