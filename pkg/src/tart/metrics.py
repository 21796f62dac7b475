"""Note-level transcription metrics and string/fret assignment accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .score_model import FretPosition, InstrumentConfig, NoteEvent, PianoRoll, pitch_of

ONSET_TOLERANCE = 0.05
# absorbs float noise in onset differences such as 1.05 - 1.0
_TOL_SLACK = 1e-9


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[int, int]]  # (ref index, est index)
    unmatched_ref: list[int]
    unmatched_est: list[int]

    def __len__(self):
        return len(self.pairs)


def onsets_match(r: NoteEvent, e: NoteEvent, tol: float = ONSET_TOLERANCE) -> bool:
    return r.pitch == e.pitch and abs(r.onset - e.onset) <= tol + _TOL_SLACK


def match_notes(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], tol: float = ONSET_TOLERANCE) -> MatchResult:
    """Maximum-cardinality one-to-one matching on (same pitch, |onset diff| <= tol).

    Among maximum matchings the one with the smallest total onset deviation is
    returned. Solved per pitch as a rectangular assignment problem where every
    admissible pair earns a bonus larger than any achievable total deviation.
    """
    pairs = []
    pitches = {n.pitch for n in ref} & {n.pitch for n in est}
    for pitch in sorted(pitches):
        ri = [i for i, n in enumerate(ref) if n.pitch == pitch]
        ei = [j for j, n in enumerate(est) if n.pitch == pitch]
        diff = np.abs(np.array([ref[i].onset for i in ri])[:, None] - np.array([est[j].onset for j in ei])[None, :])
        ok = diff <= tol + _TOL_SLACK
        if not ok.any():
            continue
        bonus = 2.0 * (tol + 1.0) * min(len(ri), len(ei)) + 1.0
        cost = np.where(ok, diff - bonus, 0.0)
        rows, cols = linear_sum_assignment(cost)
        pairs += [(ri[r], ei[c]) for r, c in zip(rows, cols) if ok[r, c]]
    pairs.sort()
    mr = {r for r, _ in pairs}
    me = {e for _, e in pairs}
    return MatchResult(pairs, [i for i in range(len(ref)) if i not in mr],
                       [j for j in range(len(est)) if j not in me])


def prf50(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], tol: float = ONSET_TOLERANCE) -> tuple[float, float, float]:
    """Precision, recall, F1 at onset tolerance ``tol`` (two empty lists score 1, 1, 1)."""
    if not ref and not est:
        return 1.0, 1.0, 1.0
    n = len(match_notes(ref, est, tol))
    p = n / len(est) if est else 0.0
    r = n / len(ref) if ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def timing_mae(match: MatchResult, ref: Sequence[NoteEvent], est: Sequence[NoteEvent]) -> tuple[float, float]:
    if not match.pairs:
        raise MetricError("timing MAE undefined without matched notes")
    on = np.mean([abs(ref[i].onset - est[j].onset) for i, j in match.pairs])
    off = np.mean([abs(ref[i].offset - est[j].offset) for i, j in match.pairs])
    return float(on), float(off)


def velocity_mae(match: MatchResult, ref: Sequence[NoteEvent], est: Sequence[NoteEvent]) -> float:
    if not match.pairs:
        raise MetricError("velocity MAE undefined without matched notes")
    return float(np.mean([abs(ref[i].velocity - est[j].velocity) for i, j in match.pairs]))


def average_precision(labels, scores) -> float:
    """Area under the step PR curve; equal scores keep their input order."""
    labels = np.asarray(labels, dtype=bool).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if labels.shape != scores.shape:
        raise MetricError("labels and scores differ in size")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("no positive cells in reference")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision_at_hit = tp[hits] / (np.nonzero(hits)[0] + 1)
    return float(precision_at_hit.sum() / n_pos)


def frame_average_precision(ref_roll: PianoRoll, est_roll: PianoRoll) -> float:
    """Frame-level AP: reference cells >= 0.5 are positives, ranked by estimated activation."""
    if ref_roll.activations.shape != est_roll.activations.shape:
        raise MetricError(f"roll shapes differ: {ref_roll.activations.shape} vs {est_roll.activations.shape}")
    if not np.isclose(ref_roll.frame_hop, est_roll.frame_hop):
        raise MetricError("rolls use different frame hops")
    return average_precision(ref_roll.activations >= 0.5, est_roll.activations)


def pitch_accuracy(notes: Sequence[NoteEvent], positions: Sequence[Optional[FretPosition]],
                   config: InstrumentConfig) -> float:
    """Fraction of notes whose position sounds the note's pitch (missing/invalid counts as wrong)."""
    if len(notes) != len(positions):
        raise MetricError(f"{len(positions)} positions for {len(notes)} notes")
    if not notes:
        return 1.0
    ok = sum(1 for n, p in zip(notes, positions)
             if p is not None and config.is_valid(p) and pitch_of(p, config) == n.pitch)
    return ok / len(notes)


def tab_accuracy(positions: Sequence[Optional[FretPosition]],
                 reference_positions: Sequence[Optional[FretPosition]]) -> float:
    if len(positions) != len(reference_positions):
        raise MetricError(f"{len(positions)} positions vs {len(reference_positions)} references")
    if not positions:
        return 1.0
    ok = sum(1 for p, r in zip(positions, reference_positions) if p is not None and p == r)
    return ok / len(positions)
