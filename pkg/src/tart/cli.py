"""``tart`` command line: run the pipeline stages over files.

Exit codes: 0 ok, 1 usage, 2 parse/IO error, 3 domain error (unplayable or
unreachable notes).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import fretting, metrics
from .midi_ingest import MidiError, PitchRangeError, onset_jitter, pitch_shift_notes, read_smf, segment
from .rng import derive_seed
from .score_model import (
    InstrumentConfig, JamsError, TechniqueLabel, TrackAnnotation, ValidationError,
    read_jams, write_jams,
)

log = logging.getLogger("tart")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DOMAIN = 0, 1, 2, 3


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int = EXIT_IO):
        super().__init__(f"{stage}: {message}")
        self.code = code


@dataclass
class PipelineConfig:
    instrument: InstrumentConfig = field(default_factory=InstrumentConfig)
    costs: fretting.CostModel = field(default_factory=fretting.CostModel)
    epsilon_chord: float = fretting.EPSILON_CHORD
    model: Optional[Path] = None
    feature_window: float = 0.4
    window: float = 10.0
    hop: float = 1.0
    pitch_shift: int = 0
    onset_jitter_ms: float = 0.0
    block_columns: int = 16
    seed: int = 0

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        cfg = cls()
        if not path:
            return cfg
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise StageError("config", str(e)) from None
        try:
            sm = doc.get("score_model", {})
            cfg.instrument = InstrumentConfig(
                tuple(sm.get("open_pitches", cfg.instrument.open_pitches)),
                int(sm.get("max_fret", cfg.instrument.max_fret)),
                int(sm.get("capo", cfg.instrument.capo)))
            fr = dict(doc.get("fretting", {}))
            cfg.epsilon_chord = float(fr.pop("epsilon_chord", cfg.epsilon_chord))
            if fr:
                cfg.costs = fretting.CostModel.from_mapping(fr)
            tm = doc.get("technique_mlp", {})
            if "model" in tm:
                cfg.model = Path(tm["model"])
            cfg.feature_window = float(doc.get("audio_features", {}).get("window", cfg.feature_window))
            mi = doc.get("midi_ingest", {})
            cfg.window = float(mi.get("window", cfg.window))
            cfg.hop = float(mi.get("hop", cfg.hop))
            cfg.pitch_shift = int(mi.get("pitch_shift", cfg.pitch_shift))
            cfg.onset_jitter_ms = float(mi.get("onset_jitter_ms", cfg.onset_jitter_ms))
            cfg.block_columns = int(doc.get("tab_render", {}).get("block_columns", cfg.block_columns))
            cfg.seed = int(doc.get("seed", cfg.seed))
        except (ValueError, TypeError) as e:
            raise StageError("config", f"{path}: {e}") from None
        return cfg


def _read_bytes(path, stage: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise StageError(stage, str(e)) from None


def _write(path: Optional[str], data: str | bytes) -> None:
    if path is None or path == "-":
        sys.stdout.write(data.decode() if isinstance(data, bytes) else data)
        return
    p = Path(path)
    if isinstance(data, bytes):
        p.write_bytes(data)
    else:
        p.write_text(data)


def load_track(path: str, config: InstrumentConfig) -> TrackAnnotation:
    """MIDI or JAMS input as a track; MIDI notes get ``config``."""
    data = _read_bytes(path, "ingest")
    try:
        if Path(path).suffix.lower() in (".jams", ".json"):
            return read_jams(data)
        mf = read_smf(data)
        return TrackAnnotation.from_events(mf.notes, config, title=Path(path).stem, duration=mf.duration)
    except (MidiError, JamsError, ValidationError) as e:
        raise StageError("ingest", f"{path}: {e}") from None


# --- stages ------------------------------------------------------------------------


def classify_track(track: TrackAnnotation, audio_path: str, model_path: str,
                   window: float = 0.4) -> TrackAnnotation:
    from .audio_features import SAMPLE_RATE, WavError, extract_onset_features, read_wav, resample
    from .technique_mlp import ModelFormatError, forward, load_model

    try:
        clip = resample(read_wav(_read_bytes(audio_path, "classify")), SAMPLE_RATE)
        model = load_model(_read_bytes(model_path, "classify"))
    except (WavError, ModelFormatError) as e:
        raise StageError("classify", str(e)) from None
    notes = []
    for a in track.notes:
        if a.note.onset >= clip.duration:
            log.warning("note at %.3fs lies past the audio end; left unclassified", a.note.onset)
            notes.append(a)
            continue
        probs = forward(model, extract_onset_features(clip, a.note.onset, window))
        k = int(probs.argmax())
        notes.append(replace(a, technique=TechniqueLabel.from_index(k), confidence=float(probs[k])))
    return replace(track, notes=tuple(notes), sample_rate=int(clip.sample_rate))


def assign_track(track: TrackAnnotation, costs: fretting.CostModel, epsilon_chord: float,
                 predictions=None) -> tuple[TrackAnnotation, dict]:
    events = track.events
    report: dict = {"notes": len(events)}
    if predictions is None:
        try:
            result = fretting.solve(events, track.config, costs, epsilon_chord)
        except fretting.UnplayableError as e:
            raise StageError("assign", str(e), EXIT_DOMAIN) from None
        notes = [replace(a, position=p, unrepaired=False) for a, p in zip(track.notes, result.positions)]
        report.update(cost=result.cost, warnings=result.warnings)
    else:
        fix = fretting.neighbor_search_fix(events, predictions, track.config)
        flagged = set(fix.unrepaired)
        notes = [replace(a, position=p, unrepaired=i in flagged)
                 for i, (a, p) in enumerate(zip(track.notes, fix.positions))]
        notes, warnings = fretting.overlap_correct(notes)
        report.update(repaired=fix.repaired, unrepaired=fix.unrepaired, warnings=warnings)
    out = replace(track, notes=tuple(notes))
    positions = [a.position for a in out.notes]
    report["pitch_accuracy"] = metrics.pitch_accuracy(out.events, positions, out.config)
    return out, report


def render_track(track: TrackAnnotation, epsilon_chord: float, block_columns: int) -> str:
    from .tab_render import TabError, render_ascii

    try:
        return render_ascii(track, epsilon_chord, block_columns)
    except TabError as e:
        raise StageError("render", str(e), EXIT_DOMAIN) from None


def _load_predictions(path: str) -> list:
    try:
        doc = json.loads(_read_bytes(path, "assign"))
        return [(int(p["string"]), int(p["fret"])) for p in doc]
    except (ValueError, KeyError, TypeError) as e:
        raise StageError("assign", f"{path}: bad prediction file ({e})") from None


# --- subcommands ---------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    capo = getattr(args, "capo", None)
    if capo is not None:
        try:
            cfg.instrument = cfg.instrument.with_capo(capo)
        except ValidationError as e:
            raise StageError("config", str(e), EXIT_USAGE) from None
    costs = getattr(args, "costs", None)
    if costs:
        try:
            cfg.costs = fretting.CostModel.from_toml(costs)
        except (OSError, ValueError) as e:
            raise StageError("config", f"{costs}: {e}") from None
    return cfg


def _with_instrument(track: TrackAnnotation, cfg: PipelineConfig, args) -> TrackAnnotation:
    # an explicit --capo re-fits the track; stored positions no longer apply
    if getattr(args, "capo", None) is not None and track.config != cfg.instrument:
        notes = tuple(replace(a, position=None, unrepaired=False) for a in track.notes)
        return replace(track, config=cfg.instrument, notes=notes)
    return track


def cmd_transcribe(args) -> int:
    cfg = _config(args)
    track = _with_instrument(load_track(args.input, cfg.instrument), cfg, args)
    model = args.model or cfg.model
    if args.audio and model:
        track = classify_track(track, args.audio, str(model), cfg.feature_window)
    elif args.audio:
        log.warning("--audio given without --model; skipping technique classification")
    track, report = assign_track(track, cfg.costs, cfg.epsilon_chord)
    tab = render_track(track, cfg.epsilon_chord, cfg.block_columns)
    out = Path(args.out)
    _write(str(out), write_jams(track))
    _write(args.tab or str(out.with_suffix(".txt")), tab)
    for w in report.get("warnings", []):
        log.warning(w)
    return EXIT_OK


def _prep_file(path: Path, index: int, cfg: PipelineConfig) -> dict:
    data = _read_bytes(path, "ingest")
    try:
        mf = read_smf(data)
    except MidiError as e:
        raise StageError("ingest", f"{path}: {e}") from None
    duration = mf.duration
    wav = path.with_suffix(".wav")
    if wav.exists():
        from .audio_features import read_wav
        duration = read_wav(wav.read_bytes()).duration
    variants = {}
    for k in range(-cfg.pitch_shift, cfg.pitch_shift + 1):
        try:
            notes = pitch_shift_notes(mf.notes, k)
        except PitchRangeError as e:
            raise StageError("prep", f"{path}: {e}", EXIT_DOMAIN) from None
        seed = None
        if cfg.onset_jitter_ms > 0:
            seed = derive_seed(cfg.seed, index, k)
            notes = onset_jitter(notes, cfg.onset_jitter_ms / 1000.0, seed)
        variants[k] = (seed, segment(notes, duration, cfg.window, cfg.hop))
    n_segments = len(next(iter(variants.values()))[1])
    segments = []
    for s in range(n_segments):
        start = variants[0][1][s].start
        segments.append({
            "start": round(start, 6),
            "duration": cfg.window,
            "variants": [{
                "pitch_shift": k,
                "jitter_seed": seed,
                "notes": [[n.pitch, round(n.onset, 6), round(n.offset, 6), n.velocity] for n in segs[s].notes],
            } for k, (seed, segs) in variants.items()],
        })
    return {"file": path.name, "duration": round(duration, 6), "segments": segments}


def cmd_prep(args) -> int:
    cfg = _config(args)
    for name in ("window", "hop", "pitch_shift", "onset_jitter"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, "onset_jitter_ms" if name == "onset_jitter" else name, value)
    if cfg.window <= 0 or cfg.hop <= 0:
        raise StageError("prep", "window and hop must be positive", EXIT_USAGE)
    if not 0 <= cfg.pitch_shift <= 2:
        raise StageError("prep", "--pitch-shift must lie in 0-2", EXIT_USAGE)
    root = Path(args.dataset)
    if not root.is_dir():
        raise StageError("prep", f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not files:
        raise StageError("prep", f"no MIDI files in {root}")
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        entries = list(pool.map(lambda item: _prep_file(item[1], item[0], cfg), enumerate(files)))
    manifest = {
        "window": cfg.window, "hop": cfg.hop, "pitch_shift": cfg.pitch_shift,
        "onset_jitter_ms": cfg.onset_jitter_ms, "seed": cfg.seed,
        "note_fields": ["pitch", "onset", "offset", "velocity"],
        "files": entries,
    }
    _write(args.out, json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _config(args)
    track = load_track(args.jams, cfg.instrument)
    model = args.model or cfg.model
    if model is None:
        raise StageError("classify", "no --model given", EXIT_USAGE)
    track = classify_track(track, args.audio, str(model), cfg.feature_window)
    _write(args.out, write_jams(track))
    return EXIT_OK


def cmd_assign(args) -> int:
    cfg = _config(args)
    track = _with_instrument(load_track(args.jams, cfg.instrument), cfg, args)
    preds = _load_predictions(args.predictions) if args.predictions else None
    if preds is not None and len(preds) != len(track.notes):
        raise StageError("assign", f"{len(preds)} predictions for {len(track.notes)} notes")
    track, report = assign_track(track, cfg.costs, cfg.epsilon_chord, preds)
    _write(args.out, write_jams(track))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    track = load_track(args.jams, cfg.instrument)
    _write(args.out, render_track(track, cfg.epsilon_chord, cfg.block_columns))
    return EXIT_OK


def evaluate_pair(ref: TrackAnnotation, est: TrackAnnotation, tol: float = metrics.ONSET_TOLERANCE) -> dict:
    r, e = ref.events, est.events
    p, rec, f = metrics.prf50(r, e, tol)
    match = metrics.match_notes(r, e, tol)
    row = {"P50": p, "R50": rec, "F50": f, "n_ref": len(r), "n_est": len(e), "n_match": len(match),
           "onset_mae": None, "offset_mae": None, "velocity_mae": None}
    if match.pairs:
        row["onset_mae"], row["offset_mae"] = metrics.timing_mae(match, r, e)
        row["velocity_mae"] = metrics.velocity_mae(match, r, e)
    est_pos = [a.position for a in est.notes]
    row["pitch_acc"] = metrics.pitch_accuracy(e, est_pos, est.config) if any(est_pos) else None
    pairs = [(i, j) for i, j in match.pairs if ref.notes[i].position is not None]
    row["tab_acc"] = (metrics.tab_accuracy([est.notes[j].position for _, j in pairs],
                                           [ref.notes[i].position for i, _ in pairs]) if pairs else None)
    return row


def _pairs(ref: Path, est: Path) -> list[tuple[Path, Path]]:
    if ref.is_dir() != est.is_dir():
        raise StageError("eval", "--ref and --est must both be files or both directories", EXIT_USAGE)
    if not ref.is_dir():
        return [(ref, est)]
    out = []
    for r in sorted(ref.glob("*.jams")):
        e = est / r.name
        if not e.exists():
            raise StageError("eval", f"no estimate for {r.name} in {est}")
        out.append((r, e))
    if not out:
        raise StageError("eval", f"no .jams files in {ref}")
    return out


def cmd_eval(args) -> int:
    cfg = _config(args)
    pairs = _pairs(Path(args.ref), Path(args.est))

    def one(pair):
        r, e = pair
        row = evaluate_pair(load_track(str(r), cfg.instrument), load_track(str(e), cfg.instrument), args.tol)
        return {"file": r.name, **row}

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(one, pairs))
    keys = ["P50", "R50", "F50", "onset_mae", "offset_mae", "velocity_mae", "pitch_acc", "tab_acc"]
    summary = {}
    for k in keys:
        vals = [row[k] for row in rows if row[k] is not None]
        summary[k] = sum(vals) / len(vals) if vals else None
    report = {**summary, "files": rows}
    _write(args.report, json.dumps(report, indent=2) + "\n")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["file", "n_ref", "n_est", "n_match"] + keys)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in writer.fieldnames})
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="TOML file with per-module sections")
    common.add_argument("--jobs", type=int, default=1, help="files processed in parallel")

    parser = _Parser(prog="tart", description="Technique-aware guitar tablature tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("transcribe", parents=[common], help="MIDI/JAMS (+ audio) to JAMS and ASCII tab")
    p.add_argument("input", help=".mid or .jams file")
    p.add_argument("--audio", help="WAV recording for technique classification")
    p.add_argument("--model", help=".tartmlp classifier weights")
    p.add_argument("--out", required=True, help="output .jams")
    p.add_argument("--tab", help="output tab text (default: --out with .txt)")
    p.add_argument("--capo", type=int)
    p.add_argument("--costs", help="TOML cost weights")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("prep", parents=[common], help="segment/augment a MIDI directory into a manifest")
    p.add_argument("dataset")
    p.add_argument("--window", type=float)
    p.add_argument("--hop", type=float)
    p.add_argument("--pitch-shift", dest="pitch_shift", type=int, help="variants from -N to +N semitones")
    p.add_argument("--onset-jitter", dest="onset_jitter", type=float, help="max onset/offset shift in ms")
    p.add_argument("--out", help="manifest path (default stdout)")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("classify", parents=[common], help="label note techniques from audio")
    p.add_argument("--model")
    p.add_argument("--audio", required=True)
    p.add_argument("--jams", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("assign", parents=[common], help="string/fret assignment")
    p.add_argument("--jams", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--capo", type=int)
    p.add_argument("--costs")
    p.add_argument("--predictions", help="JSON list of {string, fret} to repair instead of solving")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("render", parents=[common], help="JAMS to ASCII tab")
    p.add_argument("--jams", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="note-level and tab metrics")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--report", help="JSON report path (default stdout)")
    p.add_argument("--csv", help="per-file rows")
    p.add_argument("--tol", type=float, default=metrics.ONSET_TOLERANCE)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
