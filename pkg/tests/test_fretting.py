import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_path, positions_for, random_dp_instance, voicings_for
from tart.fretting import (
    ChordGroup, CostModel, UnplayableError, dp_assign, enumerate_voicings, group_chords, neighbor_search_fix,
    overlap_correct, path_cost, simplify, solve, transition_cost,
)
from tart.metrics import pitch_accuracy
from tart.score_model import AnnotatedNote, FretPosition, InstrumentConfig, NoteEvent, candidates_for, pitch_of

STD = InstrumentConfig()
P = FretPosition


def notes_at(pitches, gap=0.25):
    return [NoteEvent(p, i * gap, i * gap + 0.2, 90) for i, p in enumerate(pitches)]


# --- grouping ----------------------------------------------------------------------------


def test_group_chords_epsilon_rule():
    notes = [NoteEvent(60, 0.0, 1, 80), NoteEvent(64, 0.01, 1, 80), NoteEvent(67, 0.5, 1, 80)]
    groups = group_chords(notes)
    assert [g.indices for g in groups] == [(0, 1), (2,)]


def test_group_chords_chains_transitively():
    notes = [NoteEvent(60 + k, 0.015 * k, 1, 80) for k in range(4)]
    assert len(group_chords(notes)) == 1


def test_monophonic_and_too_many():
    assert len(group_chords(notes_at([60, 62, 64]))) == 3
    with pytest.raises(UnplayableError):
        group_chords([NoteEvent(50 + k, 0.0, 1, 80) for k in range(7)])


# --- voicings -------------------------------------------------------------------------------


def group_of(pitches):
    notes = tuple(NoteEvent(p, 0.0, 1.0, 80) for p in pitches)
    return ChordGroup(0.0, tuple(range(len(notes))), notes)


def test_single_note_voicings_are_candidates():
    voicings = enumerate_voicings(group_of([64]), STD)
    assert len(voicings) == 5
    assert {v[0] for v in voicings} == set(candidates_for(64, STD))


def test_power_chord_voicing():
    assert (P(6, 0), P(5, 2)) in enumerate_voicings(group_of([40, 47]), STD)


def test_distinct_strings():
    for v in enumerate_voicings(group_of([40, 41]), STD):
        assert v[0].string != v[1].string


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(40, 83), min_size=1, max_size=4, unique=True), st.integers(0, 7))
def test_voicings_match_oracle_set(pitches, capo):
    cfg = STD.with_capo(capo)
    got = enumerate_voicings(group_of(pitches), cfg)
    assert set(got) == set(voicings_for(pitches, cfg))


# --- dp_assign --------------------------------------------------------------------------------


def test_single_low_e():
    assert dp_assign([NoteEvent(40, 0, 1, 80)], STD) == [P(6, 0)]


def test_repeated_pitch_stays_put():
    out = dp_assign(notes_at([64] * 4), STD)
    assert len(set(out)) == 1


def test_unreachable_pitch_lists_notes():
    with pytest.raises(UnplayableError, match="#1 pitch 39"):
        dp_assign(notes_at([40, 39]), STD)


def test_empty_input():
    assert dp_assign([], STD) == []


@pytest.mark.parametrize("seed", range(60))
def test_dp_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    notes, cfg, cost, lattice = random_dp_instance(rng)
    result = solve(notes, cfg, cost)
    bf_cost, bf_frets, bf_strings, bf_path = brute_force_path(lattice, cost)
    assert result.cost == bf_cost
    assert sum(p.fret for p in result.positions) == bf_frets
    assert sum(p.string for p in result.positions) == bf_strings
    assert path_cost(result.voicings, cost) == bf_cost


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(40, 83), min_size=1, max_size=12), st.integers(0, 7))
def test_dp_pitch_exact(pitches, capo):
    cfg = STD.with_capo(capo)
    pitches = [p + capo for p in pitches]
    notes = notes_at(pitches)
    assert pitch_accuracy(notes, dp_assign(notes, cfg), cfg) == 1.0


def test_capo_shift_equivalence():
    for p in range(40, 90):
        for c in range(0, 7):
            for k in range(1, 8 - c):
                assert candidates_for(p, STD.with_capo(c)) == candidates_for(p + k, STD.with_capo(c + k))


def test_span_fallback_warns(caplog):
    # 41 only sounds at (6, 1) and 83 only at (1, 19): an 18-fret span
    notes = [NoteEvent(p, 0.0, 1.0, 80) for p in (41, 83)]
    with caplog.at_level(logging.WARNING):
        res = solve(notes, STD)
    assert res.warnings and "span" in res.warnings[0]
    assert pitch_accuracy(notes, res.positions, STD) == 1.0


def test_transition_cost_zero_for_open_voicings():
    assert transition_cost((P(1, 0),), (P(3, 7),), CostModel()) == 0.0
    assert transition_cost((P(2, 3),), (P(3, 7),), CostModel()) == pytest.approx(4 + 2 + 17 ** 0.5)


def test_cost_model_validation_and_toml(tmp_path):
    with pytest.raises(ValueError):
        CostModel(w_open=0.5)
    with pytest.raises(ValueError):
        CostModel(w_fret=-1)
    with pytest.raises(ValueError):
        CostModel.from_mapping({"w_bogus": 1})
    path = tmp_path / "c.toml"
    path.write_text("[fretting]\nw_fret = 3.0\njump_lambda = 0.5\n")
    assert CostModel.from_toml(path) == CostModel(w_fret=3.0, jump_lambda=0.5)


# --- simplify ------------------------------------------------------------------------------------


def zigzag():
    notes = notes_at([60] * 4)
    baseline = [P(2, 1), P(5, 15), P(2, 1), P(5, 15)]
    return notes, baseline


def test_simplify_keeps_baseline_without_movement_costs():
    notes, baseline = zigzag()
    zero = CostModel(w_fret=0, w_string=0, w_open=0, w_high_fret=0, w_span=0, jump_lambda=0)
    assert simplify(notes, baseline, STD, zero, w_mse=1.0).positions == baseline


def test_simplify_with_zero_mse_is_dp():
    notes, baseline = zigzag()
    assert simplify(notes, baseline, STD, CostModel(), w_mse=0.0).positions == dp_assign(notes, STD)


def test_simplify_zigzag_reduces_fret_variance():
    notes, baseline = zigzag()
    cost = CostModel(w_fret=0, w_string=0, w_open=0, w_high_fret=0, w_span=0, jump_lambda=10.0)
    out = simplify(notes, baseline, STD, cost, w_mse=0.1).positions
    assert np.var([p.fret for p in out]) < np.var([p.fret for p in baseline])
    # brute-force optimum of the same combined objective
    lattice = [[(c,) for c in positions_for(60, STD)] for _ in notes]

    def mse(g, v):
        return 0.1 * ((v[0].string - baseline[g].string) ** 2 + (v[0].fret - baseline[g].fret) ** 2)
    bf_cost, _, _, bf_path = brute_force_path(lattice, cost, extra=mse)
    res = simplify(notes, baseline, STD, cost, w_mse=0.1)
    assert res.cost == pytest.approx(bf_cost, abs=1e-12)
    assert [v[0] for v in bf_path] == res.positions


@pytest.mark.parametrize("seed", range(20))
def test_simplify_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    notes, cfg, cost, lattice = random_dp_instance(rng, max_groups=6)
    groups = group_chords(notes)
    baseline = [None] * len(notes)
    for g, lat in zip(groups, lattice):
        v = lat[int(rng.integers(0, len(lat)))]
        for i, p in zip(g.indices, v):
            baseline[i] = p
    w = float(rng.uniform(0, 2))

    def mse(g, v):
        return w * sum((p.string - baseline[i].string) ** 2 + (p.fret - baseline[i].fret) ** 2
                       for p, i in zip(v, groups[g].indices))
    bf_cost, *_ = brute_force_path(lattice, cost, extra=mse)
    assert simplify(notes, baseline, cfg, cost, w_mse=w).cost == pytest.approx(bf_cost, abs=1e-9)


# --- overlap correction -------------------------------------------------------------------------------


def ann(pitch, on, off, pos):
    return AnnotatedNote(NoteEvent(pitch, on, off, 80), position=pos)


def test_overlap_same_string_truncated():
    out, warn = overlap_correct([ann(60, 0, 2, P(2, 1)), ann(61, 1, 3, P(2, 2))])
    assert (out[0].note.onset, out[0].note.offset) == (0, 1)
    assert out[1].note.offset == 3 and not warn


def test_overlap_different_strings_untouched():
    notes = [ann(60, 0, 2, P(2, 1)), ann(64, 1, 3, P(1, 0))]
    assert overlap_correct(notes)[0] == notes


def test_overlap_identical_onsets():
    out, warn = overlap_correct([ann(60, 0.5, 2, P(2, 1)), ann(61, 0.5, 3, P(2, 2))])
    assert out[0].note.offset == pytest.approx(0.501)
    assert len(warn) == 1


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(1, 6), st.floats(0, 5), st.floats(0.01, 2)), max_size=10))
def test_overlap_idempotent_and_resolves(raw):
    notes = [ann(STD.open_pitches[s - 1] + 1, on, on + d, P(s, 1)) for s, on, d in raw]
    once, _ = overlap_correct(notes)
    twice, _ = overlap_correct(once)
    assert once == twice
    for s in range(1, 7):
        same = sorted((a.note for a in once if a.position.string == s), key=lambda n: n.onset)
        for a, b in zip(same, same[1:]):
            if b.onset - a.onset >= 0.001:
                assert a.offset <= b.onset


# --- neighbor search ----------------------------------------------------------------------------------


def test_neighbor_example():
    fix = neighbor_search_fix([NoteEvent(64, 0, 1, 80)], [P(2, 4)], STD)
    assert fix.positions == [P(2, 5)] and fix.repaired == 1


def test_neighbor_correct_prediction_kept():
    fix = neighbor_search_fix([NoteEvent(64, 0, 1, 80)], [P(3, 9)], STD)
    assert fix.positions == [P(3, 9)] and fix.repaired == 0


def test_neighbor_unreachable_flagged():
    fix = neighbor_search_fix([NoteEvent(39, 0, 1, 80)], [P(6, 0)], STD)
    assert fix.positions == [P(6, 0)] and fix.unrepaired == [0]


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(40, 83), st.integers(1, 6), st.integers(0, 19)), min_size=1, max_size=10))
def test_neighbor_repairs_to_nearest(raw):
    notes = [NoteEvent(p, i * 0.1, i * 0.1 + 0.1, 80) for i, (p, _, _) in enumerate(raw)]
    preds = [P(s, f) for _, s, f in raw]
    fix = neighbor_search_fix(notes, preds, STD)
    assert pitch_accuracy(notes, fix.positions, STD) == 1.0
    assert pitch_accuracy(notes, fix.positions, STD) >= pitch_accuracy(notes, preds, STD)
    for n, pred, got in zip(notes, preds, fix.positions):
        if pitch_of(pred, STD) == n.pitch:
            assert got == pred
            continue
        cands = positions_for(n.pitch, STD)
        best = min(cands, key=lambda c: (abs(c.fret - pred.fret) + 2 * abs(c.string - pred.string), c.string))
        assert got == best
