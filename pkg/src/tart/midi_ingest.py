"""Standard MIDI File decoding and dataset preparation (segmenting, augmentation)."""

from __future__ import annotations

import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .rng import SplitMix64
from .score_model import NoteEvent, note_sort_key

DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 BPM)
MIN_DURATION = 0.001
MAX_PITCH_SHIFT = 2


class MidiError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class PitchRangeError(ValueError):
    def __init__(self, offending: list[NoteEvent], semitones: int):
        pitches = ", ".join(f"{n.pitch}@{n.onset:.3f}s" for n in offending)
        super().__init__(f"shift {semitones:+d} leaves 0-127 for notes: {pitches}")
        self.notes = offending


@dataclass(frozen=True)
class MidiFile:
    notes: list[NoteEvent]
    duration: float
    ticks_per_beat: int


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: Optional[int] = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MidiError(self.pos, "unexpected end of track data")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MidiError(self.pos, f"need {n} bytes, only {self.end - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def vlq(self) -> int:
        start = self.pos
        value = 0
        for _ in range(4):
            if self.pos >= self.end:
                raise MidiError(start, "truncated variable-length quantity")
            b = self.data[self.pos]
            self.pos += 1
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError(start, "variable-length quantity longer than 4 bytes")


class _TempoMap:
    def __init__(self, changes: Iterable[tuple[int, int]], ticks_per_beat: int):
        points = {0: DEFAULT_TEMPO}
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            points[tick] = tempo  # last change at a tick wins
        self.ticks = sorted(points)
        self.tempos = [points[t] for t in self.ticks]
        self.tpb = ticks_per_beat
        self.seconds = [0.0]
        for i in range(1, len(self.ticks)):
            dt = self.ticks[i] - self.ticks[i - 1]
            self.seconds.append(self.seconds[-1] + dt * self.tempos[i - 1] / 1e6 / self.tpb)

    def to_seconds(self, tick: int) -> float:
        # index of last tempo point <= tick
        lo, hi = 0, len(self.ticks) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.ticks[mid] <= tick:
                lo = mid
            else:
                hi = mid - 1
        return self.seconds[lo] + (tick - self.ticks[lo]) * self.tempos[lo] / 1e6 / self.tpb


def _read_track(r: _Reader):
    """Yield (abs_tick, kind, payload, byte_offset) for note and tempo events."""
    tick = 0
    status = None
    events = []
    while r.pos < r.end:
        tick += r.vlq()
        at = r.pos
        b = r.byte()
        if b == 0xFF:
            meta = r.byte()
            data = r.take(r.vlq())
            if meta == 0x51:
                if len(data) != 3:
                    raise MidiError(at, "tempo event must carry 3 bytes")
                events.append((tick, "tempo", int.from_bytes(data, "big"), at))
            elif meta == 0x2F:
                events.append((tick, "end", None, at))
                break
            continue
        if b in (0xF0, 0xF7):
            r.take(r.vlq())
            continue
        if b >= 0xF0:
            raise MidiError(at, f"unsupported system message 0x{b:02X}")
        if b & 0x80:
            status = b
            d1 = r.byte()
        else:
            if status is None:
                raise MidiError(at, "data byte without running status")
            d1 = b
        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0xC0, 0xD0):
            continue
        d2 = r.byte()
        if kind == 0x90 and d2 > 0:
            events.append((tick, "on", (channel, d1, d2), at))
        elif kind == 0x80 or kind == 0x90:
            events.append((tick, "off", (channel, d1), at))
    events.append((tick, "end", None, r.pos))
    return events


def read_smf(data: bytes) -> MidiFile:
    """Decode a format 0/1 SMF into a merged, onset-sorted note list.

    Note-on with velocity 0 counts as note-off. Notes still sounding when their
    track ends are closed at the track end. Zero-length notes are widened to 1 ms.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiError(0, "missing MThd header chunk")
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiError(4, f"bad header length {hlen}")
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiError(8, f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiError(12, "SMPTE time division not supported")
    if division == 0:
        raise MidiError(12, "zero ticks per beat")

    tracks = []
    pos = 8 + hlen
    while len(tracks) < ntrks:
        if pos + 8 > len(data):
            raise MidiError(pos, f"expected {ntrks} tracks, found {len(tracks)}")
        cid = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + clen > len(data):
            raise MidiError(pos, f"chunk length {clen} runs past end of file")
        if cid == b"MTrk":
            tracks.append(_read_track(_Reader(data, body, body + clen)))
        pos = body + clen

    tempo_map = _TempoMap(
        ((t, v) for trk in tracks for t, kind, v, _ in trk if kind == "tempo"), division)

    notes = []
    end_tick = 0
    for trk in tracks:
        pending: dict[tuple[int, int], deque] = defaultdict(deque)
        last_tick = 0
        for tick, kind, payload, at in trk:
            last_tick = max(last_tick, tick)
            if kind == "on":
                ch, pitch, vel = payload
                pending[(ch, pitch)].append((tick, vel))
            elif kind == "off":
                key = payload
                if not pending[key]:
                    raise MidiError(at, f"note-off for pitch {key[1]} on channel {key[0] + 1} without note-on")
                start, vel = pending[key].popleft()
                notes.append(_make_note(key[1], start, tick, vel, tempo_map))
        for (ch, pitch), queue in pending.items():
            for start, vel in queue:
                notes.append(_make_note(pitch, start, last_tick, vel, tempo_map))
        end_tick = max(end_tick, last_tick)

    notes.sort(key=note_sort_key)
    duration = max([tempo_map.to_seconds(end_tick)] + [n.offset for n in notes])
    return MidiFile(notes, duration, division)


def _make_note(pitch, start_tick, end_tick, velocity, tempo_map) -> NoteEvent:
    onset = tempo_map.to_seconds(start_tick)
    offset = tempo_map.to_seconds(end_tick)
    return NoteEvent(pitch, onset, max(offset, onset + MIN_DURATION), velocity)


def parse_smf(data: bytes) -> list[NoteEvent]:
    return read_smf(data).notes


def _vlq_bytes(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_smf(notes: Sequence[NoteEvent], ticks_per_beat: int = 480, bpm: float = 120.0,
              channels: Optional[Sequence[int]] = None, end_time: Optional[float] = None) -> bytes:
    """Encode notes as a format-0 file at a constant tempo (used for fixtures)."""
    tempo = int(round(60e6 / bpm))
    to_tick = lambda sec: int(round(sec * 1e6 / tempo * ticks_per_beat))  # noqa: E731
    events = []
    for i, n in enumerate(notes):
        ch = channels[i] if channels is not None else 0
        events.append((to_tick(n.offset), 0, bytes([0x80 | ch, n.pitch, 0])))
        events.append((to_tick(n.onset), 1, bytes([0x90 | ch, n.pitch, n.velocity])))
    events.sort(key=lambda e: (e[0], e[1]))
    body = bytearray(b"\x00\xFF\x51\x03" + tempo.to_bytes(3, "big"))
    last = 0
    for tick, _, msg in events:
        body += _vlq_bytes(tick - last) + msg
        last = tick
    final = max(last, to_tick(end_time)) if end_time is not None else last
    body += _vlq_bytes(final - last) + b"\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_beat)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# --- dataset preparation ---------------------------------------------------


@dataclass(frozen=True)
class Segment:
    start: float
    duration: float
    notes: tuple[NoteEvent, ...]


def segment_starts(total_dur: float, window: float = 10.0, hop: float = 1.0) -> list[float]:
    if window <= 0 or hop <= 0:
        raise ValueError("window and hop must be positive")
    if total_dur < window:
        return [0.0]
    count = math.floor((total_dur - window) / hop + 1e-9) + 1
    return [k * hop for k in range(count)]


def segment(notes: Sequence[NoteEvent], total_dur: float, window: float = 10.0,
            hop: float = 1.0) -> list[Segment]:
    """Cut a note list into fixed windows on a regular hop grid.

    A note belongs to each window containing its onset; times are re-based to the
    window start and offsets clipped to the window end. Recordings shorter than
    one window give a single (implicitly zero-padded) segment.
    """
    out = []
    for start in segment_starts(total_dur, window, hop):
        end = start + window
        inside = []
        for n in notes:
            if start <= n.onset < end:
                inside.append(NoteEvent(n.pitch, n.onset - start,
                                        min(n.offset, end) - start, n.velocity))
        out.append(Segment(start, window, tuple(inside)))
    return out


def pitch_shift_notes(notes: Sequence[NoteEvent], semitones: int) -> list[NoteEvent]:
    if semitones != int(semitones) or abs(semitones) > MAX_PITCH_SHIFT:
        raise ValueError(f"pitch shift must be an integer in [-{MAX_PITCH_SHIFT}, {MAX_PITCH_SHIFT}]")
    semitones = int(semitones)
    bad = [n for n in notes if not 0 <= n.pitch + semitones <= 127]
    if bad:
        raise PitchRangeError(bad, semitones)
    return [NoteEvent(n.pitch + semitones, n.onset, n.offset, n.velocity) for n in notes]


def onset_jitter(notes: Sequence[NoteEvent], max_shift: float, seed: int) -> list[NoteEvent]:
    """Shift every onset and offset by independent uniform draws in [-max_shift, max_shift].

    Draws come from :class:`~tart.rng.SplitMix64` seeded with ``seed``, two per
    note (onset, then offset) in input order. Onsets are clamped at 0 and offsets
    kept at least 1 ms after their onset. The result is re-sorted by onset.
    """
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    if max_shift == 0:
        return sorted(notes, key=note_sort_key)
    g = SplitMix64(seed)
    out = []
    for n in notes:
        onset = max(0.0, n.onset + g.uniform(-max_shift, max_shift))
        offset = max(n.offset + g.uniform(-max_shift, max_shift), onset + MIN_DURATION)
        out.append(NoteEvent(n.pitch, onset, offset, n.velocity))
    out.sort(key=note_sort_key)
    return out
