"""Reward arithmetic for the writing, coding and building environments.

All functions here are pure: the same inputs give bit-identical outputs.
"""
from __future__ import annotations

import math
from typing import Iterable, Mapping, NamedTuple, Sequence

from ..errors import ValidationError
from .base import END, PAD

STOP_TOKENS = frozenset({END, PAD})


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

class PairWriteScore(NamedTuple):
    total: float
    structure: float
    style: float
    coherence: float
    terminate: bool


def band_credit(ratio: float, full: tuple, partial: tuple) -> float:
    """1 inside ``full``, linear ramp to 0 at the edges of ``partial``, 0 outside."""
    lo, hi = full
    plo, phi = partial
    if lo <= ratio <= hi:
        return 1.0
    if plo <= ratio < lo:
        return (ratio - plo) / (lo - plo)
    if hi < ratio <= phi:
        return (phi - ratio) / (phi - hi)
    return 0.0


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def pairwrite_reward(
    a1: Sequence[int],
    a2: Sequence[int],
    weights: Sequence[float] = (0.4, 0.3, 0.3),
    *,
    categories: Mapping[int, int],
    full_band: tuple = (1.6, 3.2),
    partial_band: tuple = (1.1, 5.0),
    style_cap: float = 0.03,
    coherence_scale: float = 0.6,
) -> PairWriteScore:
    """Weighted structure/style/coherence score of two completions.

    ``categories`` maps each transition token to its category index.
    Leaving the partial length band (or an empty completion) zeroes the
    structure term and requests early termination.
    """
    if len(weights) != 3:
        raise ValidationError("pairwrite_reward needs exactly 3 weights")
    c1 = [t for t in a1 if t not in STOP_TOKENS]
    c2 = [t for t in a2 if t not in STOP_TOKENS]
    terminate = False
    if not c1 or not c2:
        structure = 0.0
        terminate = True
    else:
        ratio = len(c2) / len(c1)
        structure = band_credit(ratio, full_band, partial_band)
        if not partial_band[0] <= ratio <= partial_band[1]:
            terminate = True
    style = min(jaccard(c1, c2), style_cap) / style_cap
    used = {categories[t] for t in c1 + c2 if t in categories}
    coherence = min(coherence_scale * math.log(len(used) + 1), 1.0)
    w1, w2, w3 = weights
    total = w1 * structure + w2 * style + w3 * coherence
    return PairWriteScore(total, structure, style, coherence, terminate)


# ---------------------------------------------------------------------------
# Coding
# ---------------------------------------------------------------------------

class CodeLexicon(NamedTuple):
    """Token ids of the toy programming language."""

    def_aux: int
    def_main: int
    call: int
    use: int
    literals: Mapping[int, int]  # token -> literal value
    logic: frozenset
    fb: int
    no_header: int
    syntax_error: int
    all_pass: int
    passed: tuple  # passed[k] = token meaning "k tests passed"
    fail: tuple  # fail[j] = token meaning "test j failed first"


class CoopCodeScore(NamedTuple):
    reward: float
    feedback: tuple
    all_passed: bool
    terminated: bool
    pass_fraction: float
    cooperation: float
    deduction: float
    stage: str  # "header", "syntax", "tests" or "ok"


def parse_program(aux: Sequence[int], main: Sequence[int], lex: CodeLexicon):
    """Check the toy grammar on the joint program.

    Returns ``(has_header, syntax_ok, output, calls_aux, uses_result, n_logic)``.
    """
    aux_c = [t for t in aux if t not in STOP_TOKENS]
    main_c = [t for t in main if t not in STOP_TOKENS]
    has_header = lex.def_main in main_c
    ok = True
    if PAD in aux or PAD in main:
        ok = False
    aux_defined = bool(aux_c)
    aux_values = []
    if aux_defined:
        if aux_c[0] != lex.def_aux:
            ok = False
        for t in aux_c[1:]:
            if t in lex.literals:
                aux_values.append(lex.literals[t])
            else:
                ok = False
    output = []
    calls = uses = False
    n_logic = 0
    if has_header:
        if main_c[0] != lex.def_main:
            ok = False
        for t in main_c[1:]:
            if t in lex.literals:
                output.append(lex.literals[t])
            elif t == lex.call:
                if not aux_defined:
                    ok = False
                calls = True
            elif t == lex.use:
                if not calls:
                    ok = False
                uses = True
                output.extend(aux_values)
            elif t in lex.logic:
                n_logic += 1
            else:
                ok = False
    return has_header, ok, output, calls, uses, n_logic


def run_tests(output: Sequence[int], tests: Sequence[tuple]) -> list:
    """Per-test pass flags; a test ``(pos, value)`` checks ``output[pos] == value``."""
    return [pos < len(output) and output[pos] == value for pos, value in tests]


def coopcode_reward(
    aux: Sequence[int],
    main: Sequence[int],
    tests: Sequence[tuple],
    *,
    lex: CodeLexicon,
    test_weight: float = 0.7,
    coop_weight: float = 0.3,
    deduction: float = 0.15,
    base_bonus: float = 0.5,
    logic_bonus: float = 0.5,
    min_logic: int = 2,
) -> CoopCodeScore:
    """Gated reward for an aux/main program pair.

    Missing main header or a syntax error gives reward 0 and terminates.
    With no passing test the evaluation stops at the test stage (reward 0,
    episode continues). All tests passing terminates with success.
    """
    if not tests:
        raise ValidationError("test set must be non-empty")
    has_header, syntax_ok, output, calls, uses, n_logic = parse_program(aux, main, lex)
    if not has_header:
        return CoopCodeScore(0.0, (lex.fb, lex.no_header), False, True, 0.0, 0.0, 0.0, "header")
    if not syntax_ok:
        return CoopCodeScore(0.0, (lex.fb, lex.syntax_error), False, True, 0.0, 0.0, 0.0, "syntax")
    flags = run_tests(output, tests)
    n_pass = sum(flags)
    frac = n_pass / len(flags)
    if n_pass == len(flags):
        feedback = (lex.fb, lex.passed[n_pass], lex.all_pass)
    else:
        feedback = (lex.fb, lex.passed[n_pass], lex.fail[flags.index(False)])
    if n_pass == 0:
        return CoopCodeScore(0.0, feedback, False, False, 0.0, 0.0, 0.0, "tests")
    coop = 0.0
    if calls:
        coop += base_bonus
        if n_logic >= min_logic:
            coop += logic_bonus
    ded = deduction if calls and not uses else 0.0
    reward = test_weight * frac + coop_weight * coop - ded
    all_passed = n_pass == len(flags)
    return CoopCodeScore(reward, feedback, all_passed, all_passed, frac, coop, ded, "ok")


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------

class GridScore(NamedTuple):
    total: float
    covered: int
    extra: int
    same_pairs: int
    pairs: int
    n_target: int


def parse_grid(rows: Sequence[str]) -> frozenset:
    """Target cells of a '#'/'.' grid as a set of (row, col)."""
    if not rows:
        raise ValidationError("grid must have at least one row")
    width = len(rows[0])
    cells = set()
    for r, line in enumerate(rows):
        if len(line) != width:
            raise ValidationError(f"grid row {r} has length {len(line)}, expected {width}")
        for c, ch in enumerate(line):
            if ch == "#":
                cells.add((r, c))
            elif ch != ".":
                raise ValidationError(f"grid row {r} has invalid character {ch!r}")
    if not cells:
        raise ValidationError("grid has no target cells")
    return frozenset(cells)


def gridbuild_score(placements, target, bounds: tuple, allowed_textures=None) -> GridScore:
    """Coverage, waste and same-texture adjacency of a list of placements.

    ``placements`` are ``((row, col), texture)`` in placement order; the first
    in-bounds placement on a cell wins. Out-of-bounds placements, placements
    outside the target and repeats on an occupied cell all count as extra.
    """
    n_rows, n_cols = bounds
    target = frozenset(target)
    placed = {}
    extra = 0
    for cell, tex in placements:
        if allowed_textures is not None and tex not in allowed_textures:
            raise ValidationError(f"texture {tex!r} not in allowed set")
        r, c = cell
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            extra += 1
            continue
        if cell in placed:
            extra += 1
            continue
        placed[cell] = tex
        if cell not in target:
            extra += 1
    covered = sum(1 for cell in placed if cell in target)
    pairs = same = 0
    for (r, c), tex in placed.items():
        for nb in ((r + 1, c), (r, c + 1)):
            if nb in placed:
                pairs += 1
                if placed[nb] == tex:
                    same += 1
    n_t = len(target)
    total = 2.0 * covered / n_t - 1.5 * min(1.0, extra / n_t)
    if pairs:
        total -= same / (2.0 * pairs)
    return GridScore(total, covered, extra, same, pairs, n_t)


def gridbuild_reward(placements, target, bounds: tuple, allowed_textures=None) -> float:
    return gridbuild_score(placements, target, bounds, allowed_textures).total


def hazard_penalty(total_damage: float, player_hp: float) -> float:
    if player_hp <= 0:
        raise ValidationError(f"player_hp must be positive, got {player_hp}")
    if total_damage < 0:
        raise ValidationError(f"total_damage must be non-negative, got {total_damage}")
    return min(1.0, total_damage / player_hp) * 0.2
