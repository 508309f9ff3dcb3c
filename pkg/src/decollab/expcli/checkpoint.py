"""Checkpoints: one JSON header line, then every block as little-endian float64.

The header lists one entry per parameter block (``kind`` is ``policy`` or
``critic``) with everything needed to rebuild it, plus the SHA-256 of the
payload and free-form run counters.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..critics import CriticParams
from ..errors import ChecksumError, ConfigurationError
from ..seqpolicy import PolicyParams

MAGIC = "decollab-checkpoint"
VERSION = 1
_LE = np.dtype("<f8")


class Checkpoint(NamedTuple):
    policies: list
    critics: list
    meta: dict


def _policy_header(p: PolicyParams) -> dict:
    return {
        "kind": "policy", "shape": list(p.weights.shape), "d": p.d, "vocab": p.vocab_size,
        "hash_seed": p.hash_seed, "temperature": p.temperature, "window": p.window,
        "turn_slots": p.turn_slots, "allowed": None if p.allowed is None else list(p.allowed),
    }


def _critic_header(c: CriticParams) -> dict:
    return {
        "kind": "critic", "shape": list(c.weights.shape), "critic_kind": c.kind, "agent": c.agent,
        "n_agents": c.n_agents, "horizon": c.horizon, "d": c.d_agent, "hash_seed": c.hash_seed,
        "window": c.window, "use_global": c.use_global,
    }


def save_checkpoint(path, policies, critics=(), meta=None) -> Path:
    blocks = [(_policy_header(p), p.weights) for p in policies] + [(_critic_header(c), c.weights) for c in critics]
    payload = b"".join(np.ascontiguousarray(w, dtype=_LE).tobytes() for _, w in blocks)
    header = {
        "format": MAGIC, "version": VERSION, "blocks": [h for h, _ in blocks],
        "sha256": hashlib.sha256(payload).hexdigest(), "meta": dict(meta or {}),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    tmp.replace(path)  # atomic, so a crash never leaves a half-written checkpoint
    return path


def load_checkpoint(path, vocab_size: int | None = None) -> Checkpoint:
    """Read a checkpoint; ``vocab_size`` (if given) must match every policy block."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
    except (ValueError, UnicodeDecodeError):
        raise ChecksumError(f"{path}: unreadable checkpoint header") from None
    if header.get("format") != MAGIC or header.get("version") != VERSION:
        raise ConfigurationError(f"{path}: not a version-{VERSION} {MAGIC} file")
    payload = raw[nl + 1:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise ChecksumError(f"{path}: payload sha256 {digest[:12]}… does not match header {header['sha256'][:12]}…")
    policies, critics = [], []
    off = 0
    for k, h in enumerate(header["blocks"]):
        n = int(np.prod(h["shape"]))
        w = np.frombuffer(payload, dtype=_LE, count=n, offset=off).reshape(h["shape"]).astype(np.float64)
        off += n * _LE.itemsize
        if h["kind"] == "policy":
            if vocab_size is not None and h["vocab"] != vocab_size:
                raise ConfigurationError(
                    f"{path}: block {k} was trained on a vocabulary of {h['vocab']} tokens, environment has {vocab_size}"
                )
            allowed = None if h["allowed"] is None else tuple(h["allowed"])
            policies.append(PolicyParams(w, h["hash_seed"], h["temperature"], h["window"], h["turn_slots"], allowed))
        elif h["kind"] == "critic":
            critics.append(CriticParams(w, h["hash_seed"], h["critic_kind"], h["agent"], h["n_agents"], h["horizon"],
                                        h["d"], h["window"], h["use_global"]))
        else:
            raise ConfigurationError(f"{path}: block {k} has unknown kind {h['kind']!r}")
    if off != len(payload):
        raise ChecksumError(f"{path}: {len(payload) - off} trailing payload bytes")
    return Checkpoint(policies, critics, header["meta"])


def checkpoint_roundtrip(policies, critics, path) -> Checkpoint:
    save_checkpoint(path, policies, critics)
    return load_checkpoint(path)
