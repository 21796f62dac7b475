"""Symbolic and signal-processing core of a technique-aware guitar tab pipeline."""

from .score_model import (
    AnnotatedNote, FretPosition, InstrumentConfig, NoteEvent, TechniqueLabel, TrackAnnotation,
    candidates_for, pitch_of, read_jams, write_jams,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedNote", "FretPosition", "InstrumentConfig", "NoteEvent", "TechniqueLabel", "TrackAnnotation",
    "candidates_for", "pitch_of", "read_jams", "write_jams",
]
