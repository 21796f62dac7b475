"""ASCII tablature rendering and parsing.

Columns follow chord-group order, not real time. A cell holds a fret number with
an optional technique mark::

    e|--0--3h--<12>--|
    B|--1--------5/--|

Symbols: ``h``/``p`` hammer-on/pull-off (legato, by pitch direction against the
previous note on the same string), ``/`` slide, ``b`` bend, ``~`` vibrato,
``*`` palm mute, ``s`` sweep picking, ``<n>`` harmonic. Picking, alternate
picking and ``other`` render unmarked.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .fretting import EPSILON_CHORD, _cluster
from .score_model import TechniqueLabel, TrackAnnotation

BLOCK_COLUMNS = 16
NOTE_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

SUFFIX = {
    TechniqueLabel.SLIDE: "/",
    TechniqueLabel.BEND: "b",
    TechniqueLabel.VIBRATO: "~",
    TechniqueLabel.PALM_MUTE: "*",
    TechniqueLabel.SWEEP_PICKING: "s",
}
LEGEND = {
    "h": "hammer-on",
    "p": "pull-off",
    "/": "slide",
    "b": "bend",
    "~": "vibrato",
    "*": "palm mute",
    "s": "sweep picking",
    "<>": "harmonic",
}
_SUFFIX_TO_LABEL = {v: k for k, v in SUFFIX.items()} | {"h": TechniqueLabel.LEGATO, "p": TechniqueLabel.LEGATO}
_TOKEN = re.compile(r"^(?:<(\d+)>|(\d+)([^\d-]?))$")
_LINE = re.compile(r"^(\S{1,3})\|(.*)$")


class TabError(ValueError):
    pass


@dataclass(frozen=True)
class TabEvent:
    string: int
    fret: int
    column: int
    technique: Optional[TechniqueLabel]


@dataclass
class TabDocument:
    labels: list[str]
    columns: list[dict[int, str]] = field(default_factory=list)  # string -> token
    capo: int = 0
    block_columns: int = BLOCK_COLUMNS
    symbols: set[str] = field(default_factory=set)

    def to_text(self) -> str:
        lines = []
        if self.capo:
            lines.append(f"Capo: {self.capo}")
        blocks = [self.columns[i:i + self.block_columns]
                  for i in range(0, len(self.columns), self.block_columns)] or [[]]
        for b, block in enumerate(blocks):
            if b:
                lines.append("")
            widths = [max(len(t) for t in col.values()) for col in block]
            for s, label in enumerate(self.labels, start=1):
                if not block:
                    lines.append(f"{label}|")
                    continue
                cells = "".join(col.get(s, "").ljust(w, "-") + "--" for col, w in zip(block, widths))
                lines.append(f"{label}|--{cells}|")
        if self.symbols:
            used = [k for k in LEGEND if k in self.symbols]
            lines.append("")
            lines.append("-- legend: " + ", ".join(f"{k} {LEGEND[k]}" for k in used))
        return "\n".join(lines) + "\n"


def string_labels(open_pitches) -> list[str]:
    names = [NOTE_NAMES[p % 12] for p in open_pitches]
    if len(names) > 1 and names[0] == names[-1]:
        names[0] = names[0].lower()
    return names


def visible_technique(label: Optional[TechniqueLabel]) -> Optional[TechniqueLabel]:
    """The technique a rendered tab can show (unmarked classes collapse to None)."""
    if label is None or label in SUFFIX or label in (TechniqueLabel.LEGATO, TechniqueLabel.HARMONIC):
        return label
    return None


def build_document(track: TrackAnnotation, epsilon_chord: float = EPSILON_CHORD,
                   block_columns: int = BLOCK_COLUMNS) -> TabDocument:
    notes = track.notes
    for i, a in enumerate(notes):
        if a.position is None:
            raise TabError(f"note #{i} (pitch {a.note.pitch} at {a.note.onset:.3f}s) has no string/fret")
    doc = TabDocument(string_labels(track.config.open_pitches), capo=track.config.capo,
                      block_columns=block_columns)
    last_pitch: dict[int, int] = {}
    for cluster in _cluster([a.note for a in notes], epsilon_chord):
        col: dict[int, str] = {}
        for i in cluster:
            a = notes[i]
            s = a.position.string
            if s in col:  # same string twice in one chord: next column
                doc.columns.append(col)
                col = {}
            token, sym = _token(a.position.fret, a.technique, last_pitch.get(s), a.note.pitch)
            if sym:
                doc.symbols.add(sym)
            col[s] = token
            last_pitch[s] = a.note.pitch
        doc.columns.append(col)
    return doc


def _token(fret: int, technique: Optional[TechniqueLabel], prev_pitch: Optional[int], pitch: int):
    if technique == TechniqueLabel.HARMONIC:
        return f"<{fret}>", "<>"
    if technique == TechniqueLabel.LEGATO:
        mark = "p" if prev_pitch is not None and pitch < prev_pitch else "h"
        return f"{fret}{mark}", mark
    mark = SUFFIX.get(technique, "") if technique else ""
    return f"{fret}{mark}", mark


def render_ascii(track: TrackAnnotation, epsilon_chord: float = EPSILON_CHORD,
                 block_columns: int = BLOCK_COLUMNS) -> str:
    return build_document(track, epsilon_chord, block_columns).to_text()


def parse_ascii(text: str) -> list[TabEvent]:
    """Recover (string, fret, column, technique) from rendered tab, sorted by column then string."""
    events: list[TabEvent] = []
    column_base = 0
    block: list[tuple[int, str]] = []

    def flush():
        nonlocal column_base
        if block:
            column_base += _parse_block(block, column_base, events)
            block.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        m = _LINE.match(raw)
        if m is None:
            flush()
            continue
        block.append((lineno, m.group(2)))
    flush()
    return events


def _parse_block(block: list[tuple[int, str]], column_base: int, events: list[TabEvent]) -> int:
    first_line, first = block[0]
    for lineno, body in block[1:]:
        if len(body) != len(first):
            raise TabError(f"line {lineno}: length {len(body)} differs from line {first_line} ({len(first)})")
    if not first:
        return 0
    for lineno, body in block:
        if not (body.startswith("--") and body.endswith("|")):
            raise TabError(f"line {lineno}: expected '--' after the label and a closing '|'")
    bodies = [body[:-1] for _, body in block]
    width = len(bodies[0])
    occupied = [any(b[k] != "-" for b in bodies) for k in range(width)]
    spans = []
    k = 0
    while k < width:
        if occupied[k]:
            start = k
            while k < width and occupied[k]:
                k += 1
            spans.append((start, k))
        else:
            k += 1
    for c, (a, b) in enumerate(spans):
        for s, ((lineno, _), body) in enumerate(zip(block, bodies), start=1):
            token = body[a:b].rstrip("-")
            if not token:
                continue
            m = _TOKEN.match(token)
            if m is None:
                raise TabError(f"line {lineno}: cannot read cell {token!r}")
            if m.group(1) is not None:
                events.append(TabEvent(s, int(m.group(1)), column_base + c, TechniqueLabel.HARMONIC))
                continue
            suffix = m.group(3)
            if suffix and suffix not in _SUFFIX_TO_LABEL:
                raise TabError(f"line {lineno}: unknown technique mark {suffix!r} in {token!r}")
            events.append(TabEvent(s, int(m.group(2)), column_base + c,
                                   _SUFFIX_TO_LABEL[suffix] if suffix else None))
    return len(spans)
