"""Core note/instrument types and the JAMS-style ``note_tab`` file store."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np

STANDARD_TUNING = (64, 59, 55, 50, 45, 40)
DEFAULT_MAX_FRET = 19
MAX_CAPO = 7
NAMESPACE = "note_tab"


class ValidationError(ValueError):
    pass


class JamsError(ValueError):
    """Raised for unreadable annotation files. ``path`` points at the bad node."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TechniqueLabel(str, enum.Enum):
    PICKING = "picking"
    SWEEP_PICKING = "sweep_picking"
    ALTERNATE_PICKING = "alternate_picking"
    LEGATO = "legato"
    SLIDE = "slide"
    BEND = "bend"
    VIBRATO = "vibrato"
    PALM_MUTE = "palm_mute"
    HARMONIC = "harmonic"
    OTHER = "other"

    @property
    def index(self) -> int:
        return list(TechniqueLabel).index(self)

    @classmethod
    def from_index(cls, i: int) -> "TechniqueLabel":
        return list(cls)[i]


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int = 100

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValidationError(f"pitch {self.pitch} outside 0-127")
        if not 1 <= self.velocity <= 127:
            raise ValidationError(f"velocity {self.velocity} outside 1-127")
        if not self.onset >= 0:
            raise ValidationError(f"negative onset {self.onset}")
        if not self.offset > self.onset:
            raise ValidationError(f"offset {self.offset} not after onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class FretPosition:
    string: int
    fret: int


@dataclass(frozen=True)
class InstrumentConfig:
    """Tuning (open-string pitches, highest string first), fret count and capo.

    Frets are counted from the capo, so ``fret=0`` on a capo'd guitar sounds
    ``open_pitch + capo``.
    """

    open_pitches: tuple[int, ...] = STANDARD_TUNING
    max_fret: int = DEFAULT_MAX_FRET
    capo: int = 0

    def __post_init__(self):
        object.__setattr__(self, "open_pitches", tuple(int(p) for p in self.open_pitches))
        if not self.open_pitches:
            raise ValidationError("instrument needs at least one string")
        if not 0 <= self.capo <= MAX_CAPO:
            raise ValidationError(f"capo {self.capo} outside 0-{MAX_CAPO}")
        if self.max_fret < 1:
            raise ValidationError(f"max_fret must be >= 1, got {self.max_fret}")

    @property
    def num_strings(self) -> int:
        return len(self.open_pitches)

    def is_valid(self, position: FretPosition) -> bool:
        return 1 <= position.string <= self.num_strings and 0 <= position.fret <= self.max_fret

    def with_capo(self, capo: int) -> "InstrumentConfig":
        return InstrumentConfig(self.open_pitches, self.max_fret, capo)


def pitch_of(position: FretPosition, config: InstrumentConfig) -> int:
    if not config.is_valid(position):
        raise ValidationError(
            f"position (string={position.string}, fret={position.fret}) invalid for "
            f"{config.num_strings} strings / max_fret {config.max_fret}"
        )
    return config.open_pitches[position.string - 1] + config.capo + position.fret


def candidates_for(pitch: int, config: InstrumentConfig) -> list[FretPosition]:
    """Every position sounding ``pitch``, sorted by string (highest string first)."""
    out = []
    for s, open_pitch in enumerate(config.open_pitches, start=1):
        fret = pitch - open_pitch - config.capo
        if 0 <= fret <= config.max_fret:
            out.append(FretPosition(s, fret))
    return out


@dataclass(frozen=True)
class AnnotatedNote:
    note: NoteEvent
    technique: Optional[TechniqueLabel] = None
    position: Optional[FretPosition] = None
    confidence: Optional[float] = None
    # set by post-processing when a predicted position could not be repaired
    unrepaired: bool = False

    def __post_init__(self):
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")


def note_sort_key(note: NoteEvent):
    return (note.onset, note.pitch)


@dataclass(frozen=True)
class TrackAnnotation:
    """One instrument track. Notes are kept sorted by (onset, pitch) on construction."""

    config: InstrumentConfig = field(default_factory=InstrumentConfig)
    notes: tuple[AnnotatedNote, ...] = ()
    title: str = ""
    duration: Optional[float] = None
    sample_rate: Optional[int] = None

    def __post_init__(self):
        notes = tuple(sorted(self.notes, key=lambda a: note_sort_key(a.note)))
        object.__setattr__(self, "notes", notes)
        for i, a in enumerate(notes):
            if a.position is None:
                continue
            if not self.config.is_valid(a.position):
                raise ValidationError(f"note {i}: position {a.position} invalid under instrument")
            if not a.unrepaired and pitch_of(a.position, self.config) != a.note.pitch:
                raise ValidationError(
                    f"note {i}: position {a.position} sounds "
                    f"{pitch_of(a.position, self.config)}, expected {a.note.pitch}"
                )

    @property
    def events(self) -> list[NoteEvent]:
        return [a.note for a in self.notes]

    def end_time(self) -> float:
        if self.duration is not None:
            return self.duration
        return max((a.note.offset for a in self.notes), default=0.0)

    @classmethod
    def from_events(cls, events: Iterable[NoteEvent], config: Optional[InstrumentConfig] = None, **kw):
        return cls(config or InstrumentConfig(), tuple(AnnotatedNote(e) for e in events), **kw)


@dataclass
class PianoRoll:
    """Frame activations, shape (128, n_frames), values in [0, 1]."""

    activations: np.ndarray
    frame_hop: float

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=float)
        if self.activations.ndim != 2 or self.activations.shape[0] != 128:
            raise ValidationError(f"piano roll must be (128, frames), got {self.activations.shape}")
        if self.frame_hop <= 0:
            raise ValidationError("frame_hop must be positive")
        if self.activations.size and (self.activations.min() < 0 or self.activations.max() > 1):
            raise ValidationError("piano roll values must lie in [0, 1]")

    @classmethod
    def from_notes(cls, notes: Sequence[NoteEvent], frame_hop: float = 0.01, n_frames: Optional[int] = None):
        end = max((n.offset for n in notes), default=0.0)
        if n_frames is None:
            n_frames = int(np.ceil(end / frame_hop))
        roll = np.zeros((128, n_frames))
        for n in notes:
            a = int(round(n.onset / frame_hop))
            b = max(a + 1, int(round(n.offset / frame_hop)))
            roll[n.pitch, a:min(b, n_frames)] = 1.0
        return cls(roll, frame_hop)


# --- JAMS subset -----------------------------------------------------------


def _fmt_float(x: float) -> str:
    # '%.6f' rounds the exact binary value, i.e. half-even on true ties
    s = format(float(x), ".6f")
    return "0.000000" if s == "-0.000000" else s


def _dump(obj: Any, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_dump(v) for v in obj) + "]"
        items = [pad + _dump(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def to_jams_dict(track: TrackAnnotation) -> dict:
    data = []
    # order by the written (6-decimal) onset so that reading back reproduces the same order
    for a in sorted(track.notes, key=lambda a: (float(_fmt_float(a.note.onset)), a.note.pitch)):
        value = {
            "pitch": a.note.pitch,
            "velocity": a.note.velocity,
            "string": a.position.string if a.position else None,
            "fret": a.position.fret if a.position else None,
            "technique": a.technique.value if a.technique else None,
        }
        if a.unrepaired:
            value["unrepaired"] = True
        data.append({
            "time": float(a.note.onset),
            "duration": float(a.note.offset - a.note.onset),
            "value": value,
            "confidence": None if a.confidence is None else float(a.confidence),
        })
    meta = {"title": track.title, "duration": float(track.end_time())}
    if track.sample_rate is not None:
        meta["sample_rate"] = int(track.sample_rate)
    cfg = track.config
    return {
        "file_metadata": meta,
        "annotations": [{
            "namespace": NAMESPACE,
            "instrument": {
                "open_pitches": list(cfg.open_pitches),
                "max_fret": cfg.max_fret,
                "capo": cfg.capo,
            },
            "data": data,
        }],
    }


def write_jams(track: TrackAnnotation) -> bytes:
    return (_dump(to_jams_dict(track)) + "\n").encode("utf-8")


def _get(node: Any, key: str, path: str, kind, optional: bool = False):
    if not isinstance(node, dict):
        raise JamsError(path, "expected an object")
    if key not in node:
        if optional:
            return None
        raise JamsError(f"{path}.{key}", "missing")
    value = node[key]
    if value is None and optional:
        return None
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if isinstance(value, bool) and bool not in kinds:
        raise JamsError(f"{path}.{key}", f"expected {kinds[0].__name__}, got bool")
    if not isinstance(value, kinds):
        raise JamsError(f"{path}.{key}", f"expected {kinds[0].__name__}, got {type(value).__name__}")
    return value


def _int_value(node, key, path, optional=False):
    v = _get(node, key, path, (int, float), optional)
    if v is None:
        return None
    if float(v) != int(v):
        raise JamsError(f"{path}.{key}", f"expected integer, got {v}")
    return int(v)


def from_jams_dict(doc: Any) -> TrackAnnotation:
    if not isinstance(doc, dict):
        raise JamsError("$", "top level must be an object")
    meta = _get(doc, "file_metadata", "$", dict, optional=True) or {}
    title = _get(meta, "title", "$.file_metadata", str, optional=True) or ""
    duration = _get(meta, "duration", "$.file_metadata", (int, float), optional=True)
    sample_rate = _int_value(meta, "sample_rate", "$.file_metadata", optional=True)
    anns = _get(doc, "annotations", "$", list)
    if not anns:
        return TrackAnnotation(title=title, duration=None if duration is None else float(duration),
                               sample_rate=sample_rate)
    if len(anns) > 1:
        raise JamsError("$.annotations", f"expected exactly one {NAMESPACE} annotation, got {len(anns)}")
    path = "$.annotations[0]"
    ann = anns[0]
    ns = _get(ann, "namespace", path, str)
    if ns != NAMESPACE:
        raise JamsError(f"{path}.namespace", f"unknown namespace {ns!r}")
    inst = _get(ann, "instrument", path, dict)
    ipath = f"{path}.instrument"
    pitches = _get(inst, "open_pitches", ipath, list)
    for j, p in enumerate(pitches):
        if isinstance(p, bool) or not isinstance(p, int):
            raise JamsError(f"{ipath}.open_pitches[{j}]", "expected integer")
    try:
        config = InstrumentConfig(tuple(pitches), _int_value(inst, "max_fret", ipath),
                                  _int_value(inst, "capo", ipath))
    except ValidationError as e:
        raise JamsError(ipath, str(e)) from None

    notes = []
    for i, item in enumerate(_get(ann, "data", path, list)):
        p = f"{path}.data[{i}]"
        onset = float(_get(item, "time", p, (int, float)))
        dur = float(_get(item, "duration", p, (int, float)))
        value = _get(item, "value", p, dict)
        vp = f"{p}.value"
        conf = _get(item, "confidence", p, (int, float), optional=True)
        string = _int_value(value, "string", vp, optional=True)
        fret = _int_value(value, "fret", vp, optional=True)
        if (string is None) != (fret is None):
            raise JamsError(vp, "string and fret must both be set or both be null")
        tech = _get(value, "technique", vp, str, optional=True)
        try:
            technique = TechniqueLabel(tech) if tech is not None else None
        except ValueError:
            raise JamsError(f"{vp}.technique", f"unknown technique {tech!r}") from None
        unrepaired = _get(value, "unrepaired", vp, bool, optional=True) or False
        try:
            ev = NoteEvent(_int_value(value, "pitch", vp), onset, onset + dur,
                           _int_value(value, "velocity", vp))
            notes.append(AnnotatedNote(
                ev, technique,
                None if string is None else FretPosition(string, fret),
                None if conf is None else float(conf),
                unrepaired,
            ))
        except ValidationError as e:
            raise JamsError(p, str(e)) from None
    try:
        return TrackAnnotation(config, tuple(notes), title,
                               None if duration is None else float(duration), sample_rate)
    except ValidationError as e:
        raise JamsError(f"{path}.data", str(e)) from None


def read_jams(data: bytes | str) -> TrackAnnotation:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise JamsError("$", f"malformed JSON: {e}") from None
    return from_jams_dict(doc)
