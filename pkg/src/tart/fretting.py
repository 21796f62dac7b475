"""String/fret assignment: optimum-path DP over chord voicings, plus post-processing.

The solver groups near-simultaneous notes into chords, enumerates playable
voicings for each chord and runs Viterbi over the voicing lattice. Costs:

* node: ``w_open * n_open + w_high_fret * sum(max(0, fret - 12)) + w_span * max(0, span - 3)``
* transition, on the centroid (mean string, mean fret) of fretted notes:
  ``w_fret * |dfret| + w_string * |dstring| + jump_lambda * hypot(dfret, dstring)``

A transition touching an all-open voicing costs nothing: open strings need no
fretting-hand position.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .score_model import (
    AnnotatedNote, FretPosition, InstrumentConfig, NoteEvent, candidates_for, note_sort_key, pitch_of,
)

log = logging.getLogger(__name__)

EPSILON_CHORD = 0.02
MAX_SPAN = 4
HIGH_FRET = 12
COMFORT_SPAN = 3
MIN_DURATION = 0.001


class UnplayableError(ValueError):
    """No valid assignment exists (unreachable pitch, too many simultaneous notes...)."""


@dataclass(frozen=True)
class CostModel:
    w_fret: float = 1.0
    w_string: float = 2.0
    w_open: float = -0.2
    w_high_fret: float = 1.0
    w_span: float = 1.0
    jump_lambda: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
            if f.name == "w_open" and v > 0:
                raise ValueError("w_open is a bonus and must be <= 0")
            if f.name != "w_open" and v < 0:
                raise ValueError(f"{f.name} must be >= 0")

    @classmethod
    def from_mapping(cls, values: Mapping[str, float]) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown cost weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    @classmethod
    def from_toml(cls, path: str | Path) -> "CostModel":
        """Weights at top level or under a ``[fretting]`` table."""
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        table = doc.get("fretting", doc)
        known = {f.name for f in fields(cls)}
        return cls.from_mapping({k: v for k, v in table.items() if k in known})


@dataclass(frozen=True)
class ChordGroup:
    onset: float
    indices: tuple[int, ...]  # positions in the caller's note list
    notes: tuple[NoteEvent, ...]


Voicing = tuple[FretPosition, ...]


# --- grouping and voicings -------------------------------------------------------


def _cluster(notes: Sequence[NoteEvent], epsilon: float) -> list[list[int]]:
    order = sorted(range(len(notes)), key=lambda i: (note_sort_key(notes[i]), i))
    clusters: list[list[int]] = []
    prev = None
    for i in order:
        if prev is None or notes[i].onset - prev > epsilon:
            clusters.append([])
        clusters[-1].append(i)
        prev = notes[i].onset
    return clusters


def group_chords(notes: Sequence[NoteEvent], epsilon_chord: float = EPSILON_CHORD,
                 max_notes: int = 6) -> list[ChordGroup]:
    """Chain notes whose onsets lie within ``epsilon_chord`` of the previous one."""
    groups = []
    for idx in _cluster(notes, epsilon_chord):
        if len(idx) > max_notes:
            raise UnplayableError(
                f"{len(idx)} simultaneous notes at {notes[idx[0]].onset:.3f}s; at most {max_notes} playable")
        groups.append(ChordGroup(notes[idx[0]].onset, tuple(idx), tuple(notes[i] for i in idx)))
    return groups


def fretted_span(voicing: Voicing) -> int:
    frets = [p.fret for p in voicing if p.fret > 0]
    return max(frets) - min(frets) if frets else 0


def node_cost(voicing: Voicing, cost: CostModel) -> float:
    n_open = sum(1 for p in voicing if p.fret == 0)
    high = sum(max(0, p.fret - HIGH_FRET) for p in voicing)
    return (cost.w_open * n_open + cost.w_high_fret * high
            + cost.w_span * max(0, fretted_span(voicing) - COMFORT_SPAN))


def centroid(voicing: Voicing) -> Optional[tuple[float, float]]:
    fretted = [p for p in voicing if p.fret > 0]
    if not fretted:
        return None
    return (sum(p.string for p in fretted) / len(fretted), sum(p.fret for p in fretted) / len(fretted))


def transition_cost(prev: Voicing, nxt: Voicing, cost: CostModel) -> float:
    a, b = centroid(prev), centroid(nxt)
    if a is None or b is None:
        return 0.0
    ds, df = abs(b[0] - a[0]), abs(b[1] - a[1])
    return cost.w_fret * df + cost.w_string * ds + cost.jump_lambda * math.sqrt(df * df + ds * ds)


def enumerate_voicings(group: ChordGroup, config: InstrumentConfig, cost: Optional[CostModel] = None,
                       max_span: Optional[int] = MAX_SPAN) -> list[Voicing]:
    """All distinct-string assignments of the group's notes, cheapest first.

    Positions are aligned with ``group.notes``. ``max_span=None`` drops the
    fretted-span limit.
    """
    cost = cost or CostModel()
    options = [candidates_for(n.pitch, config) for n in group.notes]
    if any(not o for o in options):
        return []
    out = []
    for combo in itertools.product(*options):
        strings = [p.string for p in combo]
        if len(set(strings)) != len(strings):
            continue
        if max_span is not None and fretted_span(combo) > max_span:
            continue
        out.append(tuple(combo))
    out.sort(key=lambda v: (node_cost(v, cost), _fret_sum(v), _string_sum(v)))
    return out


def _fret_sum(v: Voicing) -> int:
    return sum(p.fret for p in v)


def _string_sum(v: Voicing) -> int:
    return sum(p.string for p in v)


# --- optimum path ---------------------------------------------------------------------


@dataclass
class Assignment:
    positions: list[FretPosition]  # aligned with the input notes
    cost: float
    voicings: list[Voicing] = field(default_factory=list)  # one per chord group
    warnings: list[str] = field(default_factory=list)


def path_cost(voicings: Sequence[Voicing], cost: CostModel, extra=None) -> float:
    """Objective of a voicing path, accumulated left to right like the solver does."""
    total = 0.0
    for g, v in enumerate(voicings):
        if g:
            total = total + transition_cost(voicings[g - 1], v, cost)
        total = total + node_cost(v, cost) + (extra(g, v) if extra else 0.0)
    return total


def _viterbi(lattice: list[list[Voicing]], cost: CostModel, extra=None) -> tuple[list[int], float]:
    # keys compare lexicographically: (objective, total fret, total string index)
    def node(g, v):
        return node_cost(v, cost) + (extra(g, v) if extra else 0.0)

    keys = [(node(0, v), _fret_sum(v), _string_sum(v)) for v in lattice[0]]
    back: list[list[int]] = []
    for g in range(1, len(lattice)):
        new_keys, ptr = [], []
        for v in lattice[g]:
            best, arg = None, -1
            for u_i, u in enumerate(lattice[g - 1]):
                k = keys[u_i]
                cand = (k[0] + transition_cost(u, v, cost), k[1], k[2])
                if best is None or cand < best:
                    best, arg = cand, u_i
            new_keys.append((best[0] + node(g, v), best[1] + _fret_sum(v), best[2] + _string_sum(v)))
            ptr.append(arg)
        keys = new_keys
        back.append(ptr)
    last = min(range(len(keys)), key=lambda i: keys[i])
    path = [last]
    for ptr in reversed(back):
        path.append(ptr[path[-1]])
    path.reverse()
    return path, keys[last][0]


def _build_lattice(groups, config, cost, warnings, include=None):
    lattice = []
    for g, group in enumerate(groups):
        voicings = enumerate_voicings(group, config, cost)
        if not voicings:
            voicings = enumerate_voicings(group, config, cost, max_span=None)
            if voicings:
                msg = (f"chord at {group.onset:.3f}s has no voicing within a {MAX_SPAN}-fret span; "
                       f"span limit dropped")
                warnings.append(msg)
                log.warning(msg)
        if include is not None and include[g] is not None and include[g] not in voicings:
            voicings = voicings + [include[g]]
        if not voicings:
            pitches = ", ".join(str(n.pitch) for n in group.notes)
            raise UnplayableError(f"no voicing on distinct strings for chord {{{pitches}}} "
                                  f"at {group.onset:.3f}s")
        lattice.append(voicings)
    return lattice


def _check_reachable(notes: Sequence[NoteEvent], config: InstrumentConfig) -> None:
    bad = [(i, n) for i, n in enumerate(notes) if not candidates_for(n.pitch, config)]
    if bad:
        listed = ", ".join(f"#{i} pitch {n.pitch} at {n.onset:.3f}s" for i, n in bad)
        raise UnplayableError(f"unreachable notes under this instrument: {listed}")


def solve(notes: Sequence[NoteEvent], config: InstrumentConfig, cost: CostModel = CostModel(),
          epsilon_chord: float = EPSILON_CHORD) -> Assignment:
    """Globally optimal voicing path; ties go to lower total fret, then lower string index."""
    _check_reachable(notes, config)
    if not notes:
        return Assignment([], 0.0)
    groups = group_chords(notes, epsilon_chord)
    warnings: list[str] = []
    lattice = _build_lattice(groups, config, cost, warnings)
    path, total = _viterbi(lattice, cost)
    return _assemble(notes, groups, lattice, path, total, warnings)


def _assemble(notes, groups, lattice, path, total, warnings) -> Assignment:
    positions: list[Optional[FretPosition]] = [None] * len(notes)
    chosen = []
    for group, voicings, k in zip(groups, lattice, path):
        v = voicings[k]
        chosen.append(v)
        for i, p in zip(group.indices, v):
            positions[i] = p
    return Assignment(positions, total, chosen, warnings)


def dp_assign(notes: Sequence[NoteEvent], config: InstrumentConfig, cost: CostModel = CostModel(),
              epsilon_chord: float = EPSILON_CHORD) -> list[FretPosition]:
    return solve(notes, config, cost, epsilon_chord).positions


def simplify(notes: Sequence[NoteEvent], baseline: Sequence[FretPosition], config: InstrumentConfig,
             cost: CostModel = CostModel(), w_mse: float = 1.0,
             epsilon_chord: float = EPSILON_CHORD) -> Assignment:
    """Re-assign positions trading closeness to ``baseline`` against hand movement.

    Adds ``w_mse * ((s - s0)**2 + (f - f0)**2)`` per note to the solver's node
    cost. With every other weight at zero the baseline itself is optimal; with
    ``w_mse=0`` this is plain :func:`solve`.
    """
    if len(baseline) != len(notes):
        raise ValueError("baseline must align with notes")
    if w_mse < 0:
        raise ValueError("w_mse must be >= 0")
    _check_reachable(notes, config)
    if not notes:
        return Assignment([], 0.0)
    groups = group_chords(notes, epsilon_chord)
    base_voicings = []
    for group in groups:
        v = tuple(baseline[i] for i in group.indices)
        ok = (all(config.is_valid(p) and pitch_of(p, config) == n.pitch for p, n in zip(v, group.notes))
              and len({p.string for p in v}) == len(v))
        base_voicings.append(v if ok else None)

    def mse(g, v):
        if w_mse == 0:
            return 0.0
        ref = [baseline[i] for i in groups[g].indices]
        return w_mse * sum((p.string - b.string) ** 2 + (p.fret - b.fret) ** 2 for p, b in zip(v, ref))

    warnings: list[str] = []
    lattice = _build_lattice(groups, config, cost, warnings, include=base_voicings)
    path, total = _viterbi(lattice, cost, extra=mse if w_mse else None)
    return _assemble(notes, groups, lattice, path, total, warnings)


# --- post-processing of external predictions ------------------------------------------


def overlap_correct(notes: Sequence[AnnotatedNote]) -> tuple[list[AnnotatedNote], list[str]]:
    """Make each string sound one note at a time.

    A note overlapping the next note on its string is cut at that note's onset.
    If less than 1 ms would survive, the note keeps exactly 1 ms and a warning
    is recorded.
    """
    out = list(notes)
    warnings = []
    by_string: dict[int, list[int]] = {}
    for i, a in enumerate(out):
        if a.position is not None:
            by_string.setdefault(a.position.string, []).append(i)
    for string, idx in by_string.items():
        idx.sort(key=lambda i: (out[i].note.onset, i))
        for cur, nxt in zip(idx, idx[1:]):
            n, later = out[cur].note, out[nxt].note
            if n.offset <= later.onset:
                continue
            if later.onset - n.onset >= MIN_DURATION:
                new_off = later.onset
            else:
                new_off = n.onset + MIN_DURATION
                warnings.append(f"note #{cur} (pitch {n.pitch}) on string {string} starts with note #{nxt}; "
                                f"kept 1 ms")
            if new_off != n.offset:
                out[cur] = replace(out[cur], note=replace(n, offset=new_off))
    return out, warnings


@dataclass
class NeighborFix:
    positions: list[Optional[FretPosition]]
    repaired: int
    unrepaired: list[int]


def neighbor_cost(candidate: FretPosition, predicted: FretPosition) -> int:
    return abs(candidate.fret - predicted.fret) + 2 * abs(candidate.string - predicted.string)


def neighbor_search_fix(notes: Sequence[NoteEvent], predictions: Sequence, config: InstrumentConfig) -> NeighborFix:
    """Replace every pitch-incorrect predicted position by its nearest correct candidate.

    Distance is ``|dfret| + 2*|dstring|``, ties to the lower string index. Notes
    with no candidate keep their prediction (if it is a valid position) and are
    reported in ``unrepaired``.
    """
    if len(predictions) != len(notes):
        raise ValueError(f"{len(predictions)} predictions for {len(notes)} notes")
    positions: list[Optional[FretPosition]] = []
    repaired = 0
    unrepaired = []
    for i, (note, pred) in enumerate(zip(notes, predictions)):
        pred = pred if isinstance(pred, FretPosition) else FretPosition(*pred)
        if config.is_valid(pred) and pitch_of(pred, config) == note.pitch:
            positions.append(pred)
            continue
        cands = candidates_for(note.pitch, config)
        if not cands:
            unrepaired.append(i)
            positions.append(pred if config.is_valid(pred) else None)
            continue
        positions.append(min(cands, key=lambda c: (neighbor_cost(c, pred), c.string)))
        repaired += 1
    return NeighborFix(positions, repaired, unrepaired)
