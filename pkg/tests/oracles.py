"""Brute-force reference implementations used as test oracles."""

import functools
import itertools
import math

import numpy as np

from tart.score_model import FretPosition, NoteEvent


def positions_for(pitch, config):
    """Every (string, fret) on the board that sounds ``pitch``, by scanning all of it."""
    out = []
    for s, open_pitch in enumerate(config.open_pitches, start=1):
        for f in range(config.max_fret + 1):
            if open_pitch + config.capo + f == pitch:
                out.append(FretPosition(s, f))
    return out


def voicings_for(pitches, config, max_span=4):
    out = []
    for combo in itertools.product(*(positions_for(p, config) for p in pitches)):
        if len({p.string for p in combo}) != len(combo):
            continue
        fretted = [p.fret for p in combo if p.fret > 0]
        if fretted and max(fretted) - min(fretted) > max_span:
            continue
        out.append(combo)
    return out


def _node(v, c):
    n_open = sum(1 for p in v if p.fret == 0)
    high = sum(max(0, p.fret - 12) for p in v)
    fretted = [p.fret for p in v if p.fret > 0]
    span = max(fretted) - min(fretted) if fretted else 0
    return c.w_open * n_open + c.w_high_fret * high + c.w_span * max(0, span - 3)


def _trans(u, v, c):
    fu = [p for p in u if p.fret > 0]
    fv = [p for p in v if p.fret > 0]
    if not fu or not fv:
        return 0.0
    su, ku = sum(p.string for p in fu) / len(fu), sum(p.fret for p in fu) / len(fu)
    sv, kv = sum(p.string for p in fv) / len(fv), sum(p.fret for p in fv) / len(fv)
    ds, df = abs(sv - su), abs(kv - ku)
    return c.w_fret * df + c.w_string * ds + c.jump_lambda * math.sqrt(df * df + ds * ds)


def brute_force_path(lattice, cost, extra=None):
    """Exhaustive minimum over all voicing paths.

    Totals are built in the same left-to-right order as a sequential sum
    (previous total, plus transition, plus node term), vectorised over the full
    path tensor. Returns ``(cost, fret_sum, string_sum, path)`` for the
    lexicographically smallest path.
    """
    def node(g, v):
        return _node(v, cost) + (extra(g, v) if extra else 0.0)

    total = np.array([node(0, v) for v in lattice[0]])
    frets = np.array([sum(p.fret for p in v) for v in lattice[0]])
    strings = np.array([sum(p.string for p in v) for v in lattice[0]])
    for g in range(1, len(lattice)):
        prev, cur = lattice[g - 1], lattice[g]
        trans = np.array([[_trans(u, v, cost) for v in cur] for u in prev])
        nodes = np.array([node(g, v) for v in cur])
        shape_prev = total.shape
        total = (total[..., None] + trans.reshape((1,) * (len(shape_prev) - 1) + trans.shape)) + nodes
        frets = frets[..., None] + np.array([sum(p.fret for p in v) for v in cur])
        strings = strings[..., None] + np.array([sum(p.string for p in v) for v in cur])
    flat_cost, flat_f, flat_s = total.ravel(), frets.ravel(), strings.ravel()
    best = flat_cost.min()
    cand = np.nonzero(flat_cost == best)[0]
    order = np.lexsort((flat_s[cand], flat_f[cand]))
    k = cand[order[0]]
    path = np.unravel_index(k, total.shape)
    return float(best), int(flat_f[k]), int(flat_s[k]), [lattice[g][i] for g, i in enumerate(path)]


def brute_force_matching(ref, est, tol=0.05):
    """Maximum matching size: each ref either stays unmatched or takes any free admissible est.

    Exhaustive over all choices, memoised on (ref index, used-est bitmask).
    """
    ok = [[j for j, e in enumerate(est) if r.pitch == e.pitch and abs(r.onset - e.onset) <= tol + 1e-9]
          for r in ref]

    @functools.lru_cache(maxsize=None)
    def best(i, used):
        if i == len(ref):
            return 0
        out = best(i + 1, used)
        for j in ok[i]:
            if not used >> j & 1:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


def greedy_matching(ref, est, tol=0.05):
    """First-come greedy matching, the naive baseline."""
    used = set()
    n = 0
    for r in ref:
        for j, e in enumerate(est):
            if j not in used and r.pitch == e.pitch and abs(r.onset - e.onset) <= tol + 1e-9:
                used.add(j)
                n += 1
                break
    return n


def crossing_fixture():
    """Two refs and two ests on one pitch where greedy order pairs the wrong notes.

    ref0 (0.00) reaches both ests; ref1 (0.08) reaches only est0 (0.04). Greedy
    gives est0 to ref0 and strands ref1; the maximum matching uses both.
    """
    ref = [NoteEvent(60, 0.00, 0.5, 80), NoteEvent(60, 0.08, 0.6, 80)]
    est = [NoteEvent(60, 0.04, 0.5, 80), NoteEvent(60, 0.00, 0.5, 80)]
    return ref, est


def random_dp_instance(rng, max_groups=8, max_voicings=6):
    """Random notes, capo and cost weights with at most ``max_voicings`` voicings per chord group.

    Groups are 60 ms apart so chord clustering is unambiguous.
    """
    from tart.fretting import CostModel
    from tart.score_model import InstrumentConfig

    config = InstrumentConfig(capo=int(rng.integers(0, 8)))
    lo = config.open_pitches[-1] + config.capo
    hi = config.open_pitches[0] + config.capo + config.max_fret
    cost = CostModel(w_fret=rng.uniform(0, 3), w_string=rng.uniform(0, 3), w_open=-rng.uniform(0, 1),
                     w_high_fret=rng.uniform(0, 3), w_span=rng.uniform(0, 3), jump_lambda=rng.uniform(0, 3))
    notes, lattice = [], []
    for g in range(int(rng.integers(1, max_groups + 1))):
        while True:
            size = int(rng.choice([1, 1, 1, 2, 2, 3]))
            pitches = sorted({int(p) for p in rng.integers(lo, hi + 1, size)})
            v = voicings_for(pitches, config)
            if 0 < len(v) <= max_voicings:
                break
        t = 0.06 * g
        notes += [NoteEvent(p, t, t + 0.05, 90) for p in pitches]
        lattice.append(v)
    return notes, config, cost, lattice
