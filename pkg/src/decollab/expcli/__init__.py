"""Experiment front door: configs, runs, checkpoints, statistics and the command line."""
from .checkpoint import Checkpoint, checkpoint_roundtrip, load_checkpoint, save_checkpoint
from .config import CONFIG_KEYS, format_config, parse_config, parse_config_text, preset_names, resolve_config
from .runner import COST_FIELDS, OUT_ROOT_VAR, RunManifest, best_return, read_metrics, run, run_dir
from .stats import area_under_curve, bootstrap_ci, ema_smooth, first_crossing
from .compare import Comparison, RunCurve, compare, run_curve
