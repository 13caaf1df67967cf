"""Original/Variation pair records: augmentation, song-level splits, manifests.

A manifest is JSONL: a header line with the schema version, then one record
per pair. MIDI payloads live as sibling .mid files referenced by relative
path, so manifests stay diffable and the corpus stays playable.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .midi_io import MidiScore, load_midi, save_midi, transpose

SCHEMA_VERSION = 1
STATUSES = ("accepted", "needs_review", "rejected")
SPLITS = ("train", "val", "test", "unassigned")
TRANSPOSITIONS = tuple(range(-5, 7))  # 12 semitone shifts including identity


class ManifestError(ValueError):
    """Unreadable, version-mismatched, or incomplete manifest."""


@dataclass
class PairRecord:
    pair_id: str
    song_id: str
    original: MidiScore
    variation: MidiScore
    transposition: int = 0
    confidence: float = 1.0
    status: str = "accepted"
    split: str = "unassigned"
    window_start_bar: int | None = None
    key: tuple[int, str] | None = None

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"bad status: {self.status}")
        if self.split not in SPLITS:
            raise ValueError(f"bad split: {self.split}")
        if not -5 <= self.transposition <= 6:
            raise ValueError(f"transposition out of range: {self.transposition}")


def augment(pairs) -> list[PairRecord]:
    """Expand each untransposed pair into 12 transposed copies (-5..+6).

    Every output pair_id encodes its base pair and shift; out-of-range pitches
    fold back by octaves inside transpose().
    """
    out = []
    for pair in pairs:
        if pair.transposition != 0:
            raise ValueError(f"pair {pair.pair_id} is already transposed")
        for t in TRANSPOSITIONS:
            out.append(
                replace(
                    pair,
                    pair_id=f"{pair.pair_id}_t{t:+d}",
                    original=transpose(pair.original, t),
                    variation=transpose(pair.variation, t),
                    transposition=t,
                    key=None if pair.key is None else ((pair.key[0] + t) % 12, pair.key[1]),
                )
            )
    return out


def split_by_song(pairs, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list[PairRecord]:
    """Assign train/val/test by song so no song straddles splits.

    Deterministic in (song set, ratios, seed); input order is irrelevant.
    Requires at least 3 songs so every split is non-empty.
    """
    import random

    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"bad ratios: {ratios}")
    songs = sorted({p.song_id for p in pairs})
    n = len(songs)
    if n < 3:
        raise ValueError(f"need at least 3 songs to populate every split, got {n}")

    # Largest-remainder allocation, then make sure no split is empty.
    ideal = [r * n for r in ratios]
    counts = [int(x) for x in ideal]
    order_by_frac = sorted(range(3), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[order_by_frac[i % 3]] += 1
    for i in range(3):
        while counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1

    shuffled = songs[:]
    random.Random(seed).shuffle(shuffled)
    assignment: dict[str, str] = {}
    cursor = 0
    for split, count in zip(("train", "val", "test"), counts):
        for song in shuffled[cursor : cursor + count]:
            assignment[song] = split
        cursor += count

    for p in pairs:
        p.split = assignment[p.song_id]
    return list(pairs)


def _safe_name(pair_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_+-]", "_", pair_id)


def save_manifest(pairs, path, midi_dir=None) -> None:
    """Write the JSONL manifest plus one .mid per score under `midi_dir`
    (default: '<stem>_midi' next to the manifest)."""
    path = Path(path)
    midi_dir = Path(midi_dir) if midi_dir else path.parent / f"{path.stem}_midi"
    midi_dir.mkdir(parents=True, exist_ok=True)
    rel = midi_dir.name if midi_dir.parent == path.parent else str(midi_dir)

    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "midi_dir": rel}, sort_keys=True)]
    for p in pairs:
        base = _safe_name(p.pair_id)
        orig_name = f"{base}.orig.mid"
        var_name = f"{base}.var.mid"
        save_midi(p.original, midi_dir / orig_name)
        save_midi(p.variation, midi_dir / var_name)
        lines.append(
            json.dumps(
                {
                    "pair_id": p.pair_id,
                    "song_id": p.song_id,
                    "original": orig_name,
                    "variation": var_name,
                    "transposition": p.transposition,
                    "confidence": p.confidence,
                    "status": p.status,
                    "split": p.split,
                    "window_start_bar": p.window_start_bar,
                    "key": None if p.key is None else [p.key[0], p.key[1]],
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> list[PairRecord]:
    """Load a manifest and its MIDI payloads. Wrong version or any missing
    file fails the whole load (no partial results)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ManifestError(f"empty manifest {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"bad manifest header: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"unsupported schema_version {header.get('schema_version')!r} "
            f"(expected {SCHEMA_VERSION})"
        )
    midi_dir = path.parent / header.get("midi_dir", f"{path.stem}_midi")

    pairs = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {i}: bad JSON: {exc}") from exc
        try:
            original = load_midi(midi_dir / rec["original"])
            variation = load_midi(midi_dir / rec["variation"])
        except (OSError, KeyError) as exc:
            raise ManifestError(
                f"pair {rec.get('pair_id', '?')!r}: missing MIDI payload ({exc})"
            ) from exc
        key = rec.get("key")
        pairs.append(
            PairRecord(
                pair_id=rec["pair_id"],
                song_id=rec["song_id"],
                original=original,
                variation=variation,
                transposition=rec.get("transposition", 0),
                confidence=rec.get("confidence", 1.0),
                status=rec.get("status", "accepted"),
                split=rec.get("split", "unassigned"),
                window_start_bar=rec.get("window_start_bar"),
                key=None if key is None else (int(key[0]), str(key[1])),
            )
        )
    return pairs


def export_csv(pairs, path) -> None:
    """Flat CSV view of the manifest (no MIDI payloads)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pair_id", "song_id", "transposition", "confidence", "status", "split"]
        )
        for p in pairs:
            writer.writerow(
                [p.pair_id, p.song_id, p.transposition, f"{p.confidence!r}", p.status, p.split]
            )
