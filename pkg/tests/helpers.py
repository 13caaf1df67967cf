"""Shared builders for synthetic test data: scores, lead sheets, performances."""

from fractions import Fraction

from overpaint.leadsheet import original_segments, parse_leadsheet
from overpaint.midi_io import MidiScore, NoteEvent, make_score

# Offsets into a major scale (semitones above the tonic) used to lay melodies.
_MELODY_PATTERN = (0, 4, 7, 2, 5, 9, 4, 12)

# (title, sheet file stem, key line, one chord bar per entry, melody base pitch)
SONG_SPECS = [
    (
        "Blue Garden",
        "blue_garden",
        "C major",
        ["C . . .", "Am . . .", "F . . .", "G7 . . .",
         "Em . . .", "Dm7 . G7 .", "C . . .", "C . . ."],
        72,
    ),
    (
        "Red Harbor",
        "red_harbor",
        "Eb major",
        ["Eb . . .", "Cm . . .", "Ab . . .", "Bb7 . . .",
         "Gm . . .", "Fm7 . Bb7 .", "Eb . . .", "Eb . . ."],
        75,
    ),
    (
        "Green Lantern",
        "green_lantern",
        "G major",
        ["G . . .", "Em . . .", "C . . .", "D7 . . .",
         "Bm . . .", "Am7 . D7 .", "G . . .", "G . . ."],
        67,
    ),
]


def song_text(title: str, key: str, bars: list[str], base_pitch: int) -> str:
    lines = [f"title: {title}", f"key: {key}", "time: 4/4"]
    lines += [f"| {bar} |" for bar in bars]
    lines.append("melody:")
    for bar in range(len(bars)):
        for beat in range(4):
            offset = _MELODY_PATTERN[(bar * 4 + beat) % len(_MELODY_PATTERN)]
            lines.append(f"{bar}.{beat} {base_pitch + offset} 1")
    return "\n".join(lines) + "\n"


def corpus_texts() -> dict[str, str]:
    """Sheet stem -> lead sheet text, for the three-song test corpus."""
    return {
        stem: song_text(title, key, bars, base)
        for title, stem, key, bars, base in SONG_SPECS
    }


def realize_performance(sheet_text: str) -> MidiScore:
    """Verbatim block-chord realization of a whole sheet, as the 'performance'."""
    sheet = parse_leadsheet(sheet_text)
    segments = original_segments(sheet, window=sheet.n_bars)
    assert len(segments) == 1
    return segments[0].score


def write_corpus(root):
    """Lay out leadsheets/ and performances/ dirs; returns (sheets_dir, perf_dir).

    Performance file names differ from sheet stems in case and separators so
    song matching has to normalize.
    """
    sheets_dir = root / "leadsheets"
    perf_dir = root / "performances"
    sheets_dir.mkdir(parents=True, exist_ok=True)
    perf_dir.mkdir(parents=True, exist_ok=True)
    from overpaint.midi_io import save_midi

    for title, stem, key, bars, base in SONG_SPECS:
        text = song_text(title, key, bars, base)
        (sheets_dir / f"{stem}.txt").write_text(text, encoding="utf-8")
        save_midi(realize_performance(text), perf_dir / f"{title}.mid")
    return sheets_dir, perf_dir


def simple_score(pitches, onset_step: Fraction = Fraction(1), duration=Fraction(1),
                 velocity: int = 80) -> MidiScore:
    """One note per grid step at the given pitches; quick metric fodder."""
    notes = [
        NoteEvent(p, i * onset_step, Fraction(duration), velocity)
        for i, p in enumerate(pitches)
    ]
    return make_score(notes=notes)


def score_from_tuples(rows) -> MidiScore:
    """Rows of (pitch, onset, duration, velocity) with Fraction-friendly values."""
    notes = [
        NoteEvent(p, Fraction(o), Fraction(d), v)
        for p, o, d, v in rows
    ]
    return make_score(notes=notes)
