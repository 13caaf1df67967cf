"""REMI-style token vocabulary and score <-> token conversion.

Grammar, per bar: Bar [TimeSig if changed] [Tempo if changed by >= one bin],
then Position / (Pitch Velocity Duration)+ groups in ascending position order.
Training sequences are BOS + original + SEP + variation + EOS.

The vocabulary is static (no data dependence): ids are contiguous by family
and the serialized form carries a hash that downstream artifacts pin.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .midi_io import (
    MidiScore,
    NoteEvent,
    bar_length,
    make_score,
    note_sort_key,
    signature_at_bar,
    tempo_at,
)

GRID = 12  # subdivisions per quarter note
PAD, BOS, EOS, SEP = 0, 1, 2, 3

TEMPO_BINS = 32
TEMPO_MIN, TEMPO_MAX = 30.0, 300.0
VELOCITY_BINS = 32
VELOCITY_BIN_WIDTH = 4
DURATION_MAX_STEPS = 96
MAX_LEN = 1024

_NUMERATORS = tuple(range(1, 13))
_DENOMINATORS = (1, 2, 4, 8, 16)
# Largest bar over the supported signature set fixes the Position family size.
MAX_POSITIONS = max(n * 4 * GRID // d for n in _NUMERATORS for d in _DENOMINATORS)

VOCAB_VERSION = 1


class TokenizeError(ValueError):
    """Score not representable (off-grid timing, bad vocabulary pairing)."""


class VocabularyMismatchError(TokenizeError):
    """Stored vocabulary hash or version disagrees with this build."""


def steps_per_bar(numerator: int, denominator: int) -> int:
    return numerator * 4 * GRID // denominator


def velocity_bin(velocity: int) -> int:
    return min(velocity // VELOCITY_BIN_WIDTH, VELOCITY_BINS - 1)


def velocity_center(bin_index: int) -> int:
    return bin_index * VELOCITY_BIN_WIDTH + 2


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...]
    index: dict[str, int]
    family_start: dict[str, int]
    tempo_centers: tuple[float, ...]
    digest: str

    def __len__(self) -> int:
        return len(self.names)

    # -- family encoders

    @property
    def bar(self) -> int:
        return self.family_start["Bar"]

    def timesig(self, numerator: int, denominator: int) -> int:
        try:
            return self.index[f"TimeSig_{numerator}/{denominator}"]
        except KeyError:
            raise TokenizeError(
                f"unsupported time signature {numerator}/{denominator}"
            ) from None

    def tempo(self, bin_index: int) -> int:
        return self.family_start["Tempo"] + bin_index

    def tempo_bin(self, bpm: float) -> int:
        bpm = min(max(bpm, TEMPO_MIN), TEMPO_MAX)
        logs = np.log(np.asarray(self.tempo_centers))
        return int(np.argmin(np.abs(logs - np.log(bpm))))

    def position(self, step: int) -> int:
        if not 0 <= step < MAX_POSITIONS:
            raise TokenizeError(f"position {step} outside vocabulary")
        return self.family_start["Position"] + step

    def pitch(self, pitch: int) -> int:
        return self.family_start["Pitch"] + pitch

    def velocity(self, bin_index: int) -> int:
        return self.family_start["Velocity"] + bin_index

    def duration(self, steps: int) -> int:
        steps = min(max(steps, 1), DURATION_MAX_STEPS)
        return self.family_start["Duration"] + steps - 1

    def decode(self, token: int) -> tuple[str, object]:
        """(family, value) for a token id; value depends on the family."""
        if not 0 <= token < len(self.names):
            raise TokenizeError(f"token id {token} outside vocabulary")
        name = self.names[token]
        family, _, payload = name.partition("_")
        if family in ("PAD", "BOS", "EOS", "SEP", "Bar"):
            return name, None
        if family == "TimeSig":
            num, den = payload.split("/")
            return "TimeSig", (int(num), int(den))
        if family == "Tempo":
            return "Tempo", int(payload)
        return family, int(payload)

    # -- serialization

    def to_json(self) -> dict:
        body = _vocab_body(self.names, self.tempo_centers)
        body["hash"] = self.digest
        return body

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")


def _vocab_body(names, tempo_centers) -> dict:
    return {
        "version": VOCAB_VERSION,
        "grid": GRID,
        "velocity_bin_width": VELOCITY_BIN_WIDTH,
        "duration_max_steps": DURATION_MAX_STEPS,
        "tokens": list(names),
        "tempo_centers": [repr(c) for c in tempo_centers],
    }


def _vocab_digest(names, tempo_centers) -> str:
    blob = json.dumps(_vocab_body(names, tempo_centers), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocabulary:
    names: list[str] = ["PAD", "BOS", "EOS", "SEP", "Bar"]
    family_start: dict[str, int] = {"Bar": 4}
    for num in _NUMERATORS:
        for den in _DENOMINATORS:
            names.append(f"TimeSig_{num}/{den}")
    family_start["TimeSig"] = 5

    tempo_centers = tuple(float(x) for x in np.geomspace(TEMPO_MIN, TEMPO_MAX, TEMPO_BINS))
    family_start["Tempo"] = len(names)
    names += [f"Tempo_{i}" for i in range(TEMPO_BINS)]
    family_start["Position"] = len(names)
    names += [f"Position_{p}" for p in range(MAX_POSITIONS)]
    family_start["Pitch"] = len(names)
    names += [f"Pitch_{p}" for p in range(128)]
    family_start["Velocity"] = len(names)
    names += [f"Velocity_{b}" for b in range(VELOCITY_BINS)]
    family_start["Duration"] = len(names)
    names += [f"Duration_{s}" for s in range(1, DURATION_MAX_STEPS + 1)]

    names_t = tuple(names)
    return Vocabulary(
        names=names_t,
        index={name: i for i, name in enumerate(names_t)},
        family_start=family_start,
        tempo_centers=tempo_centers,
        digest=_vocab_digest(names_t, tempo_centers),
    )


def load_vocabulary(path) -> Vocabulary:
    """Rebuild the static vocabulary and verify it matches the stored copy."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    vocab = build_vocabulary()
    if data.get("version") != VOCAB_VERSION:
        raise VocabularyMismatchError(
            f"unsupported vocabulary version {data.get('version')!r}"
        )
    if data.get("hash") != vocab.digest:
        raise VocabularyMismatchError("vocabulary hash mismatch")
    return vocab


# --- encoding -----------------------------------------------------------------


def _as_grid_steps(value: Fraction, what: str, context: str) -> int:
    scaled = value * GRID
    if scaled.denominator != 1:
        raise TokenizeError(f"{what} {value} of {context} is off the 1/{GRID} grid")
    return int(scaled)


def tokenize(score: MidiScore, vocab: Vocabulary | None = None) -> list[int]:
    """Encode a grid-quantized score. Raises TokenizeError on off-grid notes."""
    vocab = vocab or build_vocabulary()
    notes = sorted(score.notes, key=note_sort_key)

    last_onset = notes[-1].onset if notes else Fraction(0)
    tokens: list[int] = []
    prev_sig: tuple[int, int] | None = None
    prev_tempo_bin: int | None = None
    note_i = 0
    bar = 0
    bar_start = Fraction(0)
    while bar_start <= last_onset or bar == 0:
        sig = signature_at_bar(score, bar)
        length = bar_length(*sig)
        tokens.append(vocab.bar)
        if sig != prev_sig:
            tokens.append(vocab.timesig(*sig))
            prev_sig = sig
        tempo_bin = vocab.tempo_bin(tempo_at(score, bar_start))
        if tempo_bin != prev_tempo_bin:
            tokens.append(vocab.tempo(tempo_bin))
            prev_tempo_bin = tempo_bin

        bar_end = bar_start + length
        current_position = None
        while note_i < len(notes) and notes[note_i].onset < bar_end:
            n = notes[note_i]
            step = _as_grid_steps(n.onset - bar_start, "onset", f"note {note_i}")
            if step != current_position:
                tokens.append(vocab.position(step))
                current_position = step
            dur_steps = _as_grid_steps(n.duration, "duration", f"note {note_i}")
            tokens.append(vocab.pitch(n.pitch))
            tokens.append(vocab.velocity(velocity_bin(n.velocity)))
            tokens.append(vocab.duration(dur_steps))
            note_i += 1
        bar_start = bar_end
        bar += 1
    return tokens


# --- decoding with repair -----------------------------------------------------


def detokenize_with_report(tokens, vocab: Vocabulary | None = None) -> tuple[MidiScore, list[str]]:
    """Decode any token id sequence into a score, repairing where needed.

    Repairs (each logged in the report): implicit Bar before a stray Position,
    dropped incomplete note triples, dropped out-of-range positions, dropped
    out-of-context Velocity/Duration tokens. Never raises on ids inside the
    vocabulary.
    """
    vocab = vocab or build_vocabulary()
    repairs: list[str] = []
    notes: list[NoteEvent] = []
    tempo_map: list[tuple[Fraction, float]] = []
    signatures: list[tuple[int, int, int]] = []

    bar = -1
    bar_start = Fraction(0)
    sig = (4, 4)
    position: int | None = None
    pending_pitch: int | None = None
    pending_velocity: int | None = None

    def drop_pending(reason: str) -> None:
        nonlocal pending_pitch, pending_velocity
        if pending_pitch is not None:
            repairs.append(reason)
        pending_pitch = pending_velocity = None

    def open_bar() -> None:
        nonlocal bar, bar_start, position
        if bar >= 0:
            bar_start += bar_length(*sig)
        bar += 1
        position = None

    for i, token in enumerate(tokens):
        family, value = vocab.decode(int(token))
        if family == "EOS":
            break
        if family in ("PAD", "BOS", "SEP"):
            drop_pending(f"token {i}: {family} interrupts a note triple")
            continue
        if family == "Bar":
            drop_pending(f"token {i}: Bar interrupts a note triple")
            open_bar()
        elif family == "TimeSig":
            drop_pending(f"token {i}: TimeSig interrupts a note triple")
            sig = value
            signatures.append((max(bar, 0), *sig))
        elif family == "Tempo":
            drop_pending(f"token {i}: Tempo interrupts a note triple")
            tempo_map.append((bar_start, vocab.tempo_centers[value]))
        elif family == "Position":
            drop_pending(f"token {i}: Position interrupts a note triple")
            if bar < 0:
                repairs.append(f"token {i}: Position before any Bar, Bar inserted")
                open_bar()
            if value >= steps_per_bar(*sig):
                repairs.append(f"token {i}: Position_{value} outside a {sig[0]}/{sig[1]} bar")
                position = None
            else:
                position = value
        elif family == "Pitch":
            drop_pending(f"token {i}: Pitch interrupts a note triple")
            if position is None:
                repairs.append(f"token {i}: Pitch with no active Position")
            else:
                pending_pitch = value
        elif family == "Velocity":
            if pending_pitch is None or pending_velocity is not None:
                repairs.append(f"token {i}: Velocity out of order")
                drop_pending(f"token {i}: Velocity out of order")
            else:
                pending_velocity = value
        elif family == "Duration":
            if pending_pitch is None or pending_velocity is None:
                repairs.append(f"token {i}: Duration out of order")
                drop_pending(f"token {i}: Duration out of order")
            else:
                notes.append(
                    NoteEvent(
                        pitch=pending_pitch,
                        onset=bar_start + Fraction(position, GRID),
                        duration=Fraction(value, GRID),
                        velocity=velocity_center(pending_velocity),
                    )
                )
                pending_pitch = pending_velocity = None
    drop_pending("sequence ended inside a note triple")

    return make_score(notes, tempo_map, signatures), repairs


def detokenize(tokens, vocab: Vocabulary | None = None) -> MidiScore:
    score, _ = detokenize_with_report(tokens, vocab)
    return score


# --- pair assembly ------------------------------------------------------------


def assemble_pair(
    original_tokens, variation_tokens, max_len: int = MAX_LEN
) -> list[int]:
    """BOS + original + SEP + variation + EOS, truncating only the variation
    tail when over budget. The original must always fit."""
    budget = max_len - 3
    if len(original_tokens) > budget:
        raise TokenizeError(
            f"original of {len(original_tokens)} tokens cannot fit max_len {max_len}"
        )
    keep = min(len(variation_tokens), budget - len(original_tokens))
    return (
        [BOS]
        + list(original_tokens)
        + [SEP]
        + list(variation_tokens[:keep])
        + [EOS]
    )


# --- token files ----------------------------------------------------------------

_TOKEN_MAGIC = b"OVTK"
_TOKEN_VERSION = 1


def write_token_file(path, sequences, vocab: Vocabulary | None = None) -> None:
    """Length-prefixed uint32 records, header pins the vocabulary hash."""
    vocab = vocab or build_vocabulary()
    out = bytearray()
    out += _TOKEN_MAGIC
    out += struct.pack("<I", _TOKEN_VERSION)
    out += bytes.fromhex(vocab.digest)
    out += struct.pack("<I", len(sequences))
    for seq in sequences:
        arr = np.asarray(seq, dtype=np.uint32)
        out += struct.pack("<I", arr.size)
        out += arr.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_token_file(path, vocab: Vocabulary | None = None) -> list[np.ndarray]:
    """Read back token records, verifying the stored vocabulary hash."""
    vocab = vocab or build_vocabulary()
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != _TOKEN_MAGIC:
        raise TokenizeError(f"not a token file: {path}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != _TOKEN_VERSION:
        raise VocabularyMismatchError(f"unsupported token file version {version}")
    digest = data[8:40].hex()
    if digest != vocab.digest:
        raise VocabularyMismatchError(
            "token file was built with a different vocabulary"
        )
    (count,) = struct.unpack("<I", data[40:44])
    pos = 44
    sequences = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise TokenizeError("truncated token file")
        (length,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        end = pos + 4 * length
        if end > len(data):
            raise TokenizeError("truncated token record")
        sequences.append(np.frombuffer(data[pos:end], dtype="<u4").astype(np.int64))
        pos = end
    return sequences
