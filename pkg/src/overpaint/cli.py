"""Command line pipeline from performances and lead sheets to a trained model.

Subcommands cover the whole workflow in order: extract-pairs, review, augment,
tokenize, train, generate, evaluate, report. Every command that writes an
artifact drops a `<output>.run.json` sidecar recording the command, parameters,
input/output content hashes, seed, and wall-clock time; reruns with the same
inputs and seed reproduce the primary artifacts byte for byte (the sidecar's
timing field is the one exception).

Exit codes: 0 success, 2 unreadable or invalid input, 3 configuration or
hash mismatch, 4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import (
    DEFAULT_HOP_SECONDS,
    DEFAULT_MIN_CONFIDENCE,
    DEFAULT_SELF_LOOP,
    AlignmentError,
    apply_review,
    extract_pairs,
    read_review_manifest,
    write_review_manifest,
)
from .autodiff import NonFiniteError
from .dataset import (
    ManifestError,
    augment,
    export_csv,
    load_manifest,
    save_manifest,
    split_by_song,
)
from .leadsheet import LeadSheetError, load_leadsheet
from .metrics import render_table, report, write_report_csv
from .midi_io import MidiParseError, load_midi, quantize, save_midi
from .model import (
    CheckpointError,
    TrainConfig,
    generate,
    load_checkpoint,
    preset,
    save_checkpoint,
    train,
)
from .tokenizer import (
    GRID,
    SEP,
    TokenizeError,
    VocabularyMismatchError,
    assemble_pair,
    build_vocabulary,
    detokenize_with_report,
    load_vocabulary,
    read_token_file,
    tokenize,
    write_token_file,
)

log = logging.getLogger("overpaint")

_MIDI_SUFFIXES = (".mid", ".midi")


def _normalize_stem(name: str) -> str:
    """Case/punctuation-insensitive key used to pair files by song."""
    return "".join(ch for ch in name.lower() if ch.isalnum())


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_path(path: Path) -> str:
    """Content hash of a file, or of a directory's files by relative name.

    Sidecars (*.run.json) are excluded so the hash tracks primary content.
    """
    path = Path(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(path.rglob("*")):
            if child.is_dir() or child.name.endswith(".run.json"):
                continue
            rel = child.relative_to(path).as_posix()
            digest.update(rel.encode())
            digest.update(bytes.fromhex(_hash_file(child)))
        return digest.hexdigest()
    return _hash_file(path)


def _write_run_manifest(primary, command: str, args: argparse.Namespace,
                        inputs, outputs, t0: float) -> None:
    skip = {"func", "command"}
    params = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in skip and not callable(v)
    }
    body = {
        "command": command,
        "parameters": params,
        "inputs": {str(p): _hash_path(Path(p)) for p in inputs},
        "outputs": {str(p): _hash_path(Path(p)) for p in outputs},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_clock_seconds": round(time.monotonic() - t0, 3),
    }
    Path(str(primary) + ".run.json").write_text(
        json.dumps(body, indent=1, sort_keys=True), encoding="utf-8"
    )


def _scan_midi_dir(path: Path):
    files = sorted(
        p for p in path.iterdir()
        if p.is_file() and p.suffix.lower() in _MIDI_SUFFIXES
    )
    if not files:
        raise FileNotFoundError(f"no MIDI files in {path}")
    return files


def _load_midi_dir(path: Path, strict: bool):
    """(scores, consumed files), skipping unparseable MIDI unless strict."""
    scores = []
    used = []
    for file in _scan_midi_dir(path):
        try:
            scores.append(load_midi(file))
        except MidiParseError as exc:
            if strict:
                raise
            log.warning("skipping unreadable MIDI %s: %s", file, exc)
            continue
        used.append(file)
    return scores, used


# --- extract-pairs ----------------------------------------------------------------


def _cmd_extract_pairs(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    sheets = sorted(Path(args.leadsheets).glob("*.txt"))
    if not sheets:
        raise FileNotFoundError(f"no lead sheets (*.txt) in {args.leadsheets}")
    performances = {}
    for file in _scan_midi_dir(Path(args.performances)):
        stem = _normalize_stem(file.stem)
        if stem in performances:
            log.warning("duplicate performance for %s: %s ignored", stem, file)
            continue
        performances[stem] = file

    pairs = []
    dropped = []
    skipped = []
    consumed = []
    matched = set()
    for sheet_file in sheets:
        song_id = _normalize_stem(sheet_file.stem)
        midi_file = performances.get(song_id)
        if midi_file is None:
            log.warning("no performance matches lead sheet %s", sheet_file.name)
            continue
        matched.add(song_id)
        sheet = load_leadsheet(sheet_file)
        try:
            performance = load_midi(midi_file)
        except MidiParseError as exc:
            skipped.append(midi_file.name)
            log.warning("skipping unreadable MIDI %s: %s", midi_file, exc)
            continue
        song_pairs, song_dropped = extract_pairs(
            performance,
            sheet,
            song_id,
            window=args.window,
            hop=args.hop,
            self_loop=args.self_loop,
            min_confidence=args.min_confidence,
        )
        pairs.extend(song_pairs)
        dropped.extend(song_dropped)
        consumed.extend([sheet_file, midi_file])
    for stem, file in performances.items():
        if stem not in matched:
            log.warning("no lead sheet matches performance %s", file.name)

    if skipped and args.strict:
        raise MidiParseError(f"unreadable MIDI files: {', '.join(skipped)}")
    if not pairs:
        raise ManifestError("no pairs extracted; nothing to write")

    out = Path(args.out)
    save_manifest(pairs, out)
    review_out = Path(args.review_out) if args.review_out else Path(str(out) + ".review.jsonl")
    write_review_manifest(pairs, review_out)

    accepted = sum(1 for p in pairs if p.status == "accepted")
    print(
        f"extracted {len(pairs)} pairs from {len(matched) - len(skipped)} songs: "
        f"{accepted} accepted, {len(pairs) - accepted} flagged for review, "
        f"{len(dropped)} windows dropped, {len(skipped)} files skipped"
    )
    print(f"wrote {out} and review sheet {review_out}")
    _write_run_manifest(out, "extract-pairs", args, consumed, [out, review_out], t0)
    return 0


# --- review -----------------------------------------------------------------------


def _cmd_review(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    pairs = load_manifest(args.pairs)
    decisions = read_review_manifest(args.decisions)
    unknown = sorted(set(decisions) - {p.pair_id for p in pairs})
    if unknown:
        raise ManifestError(f"review decisions for unknown pairs: {', '.join(unknown)}")
    pairs = apply_review(pairs, decisions)
    out = Path(args.out)
    save_manifest(pairs, out)
    counts = {}
    for p in pairs:
        counts[p.status] = counts.get(p.status, 0) + 1
    summary = ", ".join(f"{v} {k}" for k, v in sorted(counts.items()))
    print(f"wrote {out} ({summary})")
    _write_run_manifest(out, "review", args, [args.pairs, args.decisions], [out], t0)
    return 0


# --- augment ----------------------------------------------------------------------


def _cmd_augment(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    pairs = load_manifest(args.pairs)
    accepted = [p for p in pairs if p.status == "accepted"]
    if not accepted:
        raise ManifestError("no accepted pairs to augment")
    split_by_song(accepted, ratios=tuple(args.ratios), seed=args.seed)
    expanded = augment(accepted)
    out = Path(args.out)
    save_manifest(expanded, out)
    if args.csv:
        export_csv(expanded, args.csv)

    by_split = {}
    for p in expanded:
        by_split[p.split] = by_split.get(p.split, 0) + 1
    summary = ", ".join(f"{by_split.get(s, 0)} {s}" for s in ("train", "val", "test"))
    print(f"augmented {len(accepted)} pairs to {len(expanded)} ({summary})")
    print(f"wrote {out}")
    outputs = [out] + ([Path(args.csv)] if args.csv else [])
    _write_run_manifest(out, "augment", args, [args.pairs], outputs, t0)
    return 0


# --- tokenize ---------------------------------------------------------------------


def _cmd_tokenize(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    pairs = load_manifest(args.pairs)
    accepted = [p for p in pairs if p.status == "accepted"]
    if not accepted:
        raise ManifestError("no accepted pairs to tokenize")
    unassigned = [p.pair_id for p in accepted if p.split == "unassigned"]
    if unassigned:
        raise ManifestError(
            f"{len(unassigned)} pairs have no split (run augment first), "
            f"e.g. {unassigned[0]}"
        )

    vocab = build_vocabulary()
    sequences = {"train": [], "val": [], "test": []}
    for pair in accepted:
        original = tokenize(quantize(pair.original, GRID), vocab)
        variation = tokenize(quantize(pair.variation, GRID), vocab)
        sequences[pair.split].append(assemble_pair(original, variation))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.json")
    for split, seqs in sequences.items():
        write_token_file(out_dir / f"tokens_{split}.bin", seqs, vocab)
        lengths = [len(s) for s in seqs] or [0]
        print(f"{split}: {len(seqs)} sequences, longest {max(lengths)} tokens")
    print(f"wrote vocabulary and token files to {out_dir}")
    _write_run_manifest(out_dir, "tokenize", args, [args.pairs], [out_dir], t0)
    return 0


# --- train ------------------------------------------------------------------------


def _cmd_train(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    tokens_dir = Path(args.tokens)
    vocab = build_vocabulary()
    stored = tokens_dir / "vocab.json"
    if stored.exists():
        vocab = load_vocabulary(stored)
    train_seqs = read_token_file(tokens_dir / "tokens_train.bin", vocab)
    val_seqs = read_token_file(tokens_dir / "tokens_val.bin", vocab)

    model_config = preset(args.model, vocab_size=len(vocab), dropout=args.dropout)
    train_config = TrainConfig(
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    out = Path(args.out)
    log_path = Path(args.log) if args.log else Path(str(out) + ".log.csv")

    def progress(entry):
        if not args.quiet:
            print(
                f"epoch {entry.epoch:4d}  lr {entry.lr:.2e}  "
                f"train {entry.train_loss:.4f}  val {entry.val_loss:.4f}",
                flush=True,
            )

    result = train(
        train_seqs,
        val_seqs,
        model_config,
        train_config,
        log_path=log_path,
        stop_at_train_loss=args.stop_at_train_loss,
        progress=progress,
    )
    save_checkpoint(out, result.model, vocab.digest, result.best_epoch, result.best_val_loss)
    print(
        f"trained {args.model} ({result.model.param_count()} parameters) for "
        f"{len(result.logs)} epochs; best val loss {result.best_val_loss:.4f} "
        f"at epoch {result.best_epoch}"
    )
    print(f"wrote {out} and {log_path}")
    inputs = [p for p in (stored, tokens_dir / "tokens_train.bin", tokens_dir / "tokens_val.bin") if Path(p).exists()]
    _write_run_manifest(out, "train", args, inputs, [out], t0)
    return 0


# --- generate ---------------------------------------------------------------------


def _cmd_generate(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    model, meta = load_checkpoint(args.checkpoint)
    vocab = build_vocabulary()
    if meta.get("vocab_hash") != vocab.digest:
        raise VocabularyMismatchError(
            "checkpoint was trained against a different vocabulary"
        )
    primers = read_token_file(args.tokens, vocab)
    if args.limit is not None:
        primers = primers[: args.limit]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    generated = []
    repaired = 0
    written = 0
    for i, seq in enumerate(primers):
        sep_hits = np.nonzero(seq == SEP)[0]
        if sep_hits.size == 0:
            log.warning("sequence %d has no separator; skipped", i)
            continue
        primer = [int(t) for t in seq[: int(sep_hits[0]) + 1]]
        if len(primer) >= model.config.max_len:
            log.warning("sequence %d primer fills the context window; skipped", i)
            continue
        continuation = generate(
            model,
            primer,
            p=args.p,
            temperature=args.temperature,
            max_new=args.max_new,
            rng=rng,
        )
        score, repairs = detokenize_with_report(continuation, vocab)
        if repairs:
            repaired += 1
            log.info("sequence %d needed %d grammar repairs", i, len(repairs))
        save_midi(score, out_dir / f"{i:04d}.mid")
        generated.append(continuation)
        written += 1
    if not written:
        raise ManifestError("no sequences could be generated")
    write_token_file(out_dir / "generated_tokens.bin", generated, vocab)
    print(
        f"generated {written} continuations into {out_dir} "
        f"({repaired} needed grammar repairs)"
    )
    _write_run_manifest(out_dir, "generate", args, [args.checkpoint, args.tokens], [out_dir], t0)
    return 0


# --- evaluate / report ------------------------------------------------------------


def _cmd_evaluate(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    scores, used = _load_midi_dir(Path(args.dir), args.strict)
    rep = report(scores, args.label)
    print(render_table([rep]))
    outputs = []
    if args.csv:
        write_report_csv([rep], args.csv)
        outputs.append(Path(args.csv))
        print(f"wrote {args.csv}")
        _write_run_manifest(Path(args.csv), "evaluate", args, used, outputs, t0)
    return 0


def _parse_corpus_spec(text: str):
    label, eq, spec = text.partition("=")
    if not eq or not label or not spec:
        raise ValueError(
            f"bad corpus {text!r}; expected LABEL=DIR or LABEL=MANIFEST:originals|variations"
        )
    side = None
    for candidate in ("originals", "variations"):
        suffix = ":" + candidate
        if spec.endswith(suffix):
            side = candidate
            spec = spec[: -len(suffix)]
    return label, Path(spec), side


def _cmd_report(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    reports = []
    inputs = []
    for raw in args.corpus:
        label, path, side = _parse_corpus_spec(raw)
        if path.is_dir():
            if side is not None:
                raise ValueError(f"corpus {label}: side selector requires a manifest")
            scores, used = _load_midi_dir(path, args.strict)
            inputs.extend(used)
            reports.append(report(scores, label))
        else:
            records = [p for p in load_manifest(path) if p.status == "accepted"]
            side = side or "variations"
            scores = [p.original if side == "originals" else p.variation for p in records]
            keys = [tuple(p.key) if p.key else None for p in records]
            inputs.append(path)
            reports.append(report(scores, label, keys=keys))
    print(render_table(reports))
    if args.csv:
        write_report_csv(reports, args.csv)
        print(f"wrote {args.csv}")
        _write_run_manifest(Path(args.csv), "report", args, inputs, [Path(args.csv)], t0)
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overpaint",
        description="Build aligned original/variation piano pairs, train a "
        "small transformer on them, and evaluate what it generates.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-pairs", help="align performances to lead sheets and cut pairs")
    p.add_argument("--performances", required=True, help="directory of performance MIDI files")
    p.add_argument("--leadsheets", required=True, help="directory of lead sheet *.txt files")
    p.add_argument("--out", required=True, help="output pair manifest (.jsonl)")
    p.add_argument("--window", type=int, default=4, help="window length in bars")
    p.add_argument("--hop", type=float, default=DEFAULT_HOP_SECONDS, help="chroma hop seconds")
    p.add_argument("--self-loop", type=float, default=DEFAULT_SELF_LOOP,
                   help="alignment stay probability")
    p.add_argument("--min-confidence", type=float, default=DEFAULT_MIN_CONFIDENCE,
                   help="pairs below this cosine go to review")
    p.add_argument("--review-out", default=None, help="review sheet path (default <out>.review.jsonl)")
    p.add_argument("--strict", action="store_true", help="fail instead of skipping bad MIDI")
    p.set_defaults(func=_cmd_extract_pairs)

    p = sub.add_parser("review", help="apply an edited review sheet to a manifest")
    p.add_argument("--pairs", required=True, help="input pair manifest")
    p.add_argument("--decisions", required=True, help="edited review sheet (.jsonl)")
    p.add_argument("--out", required=True, help="output pair manifest")
    p.set_defaults(func=_cmd_review)

    p = sub.add_parser("augment", help="assign song-level splits and transpose 12 ways")
    p.add_argument("--pairs", required=True, help="input pair manifest")
    p.add_argument("--out", required=True, help="output pair manifest")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1],
                   metavar=("TRAIN", "VAL", "TEST"), help="split fractions by song")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed")
    p.add_argument("--csv", default=None, help="also export pair metadata as CSV")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("tokenize", help="encode a split manifest into token files")
    p.add_argument("--pairs", required=True, help="augmented pair manifest")
    p.add_argument("--out-dir", required=True, help="directory for vocab.json and tokens_*.bin")
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("train", help="train a model on tokenized pairs")
    p.add_argument("--tokens", required=True, help="directory from tokenize")
    p.add_argument("--model", default="model1", choices=("model1", "model2"),
                   help="published architecture preset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=500, help="maximum epochs")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0, help="init/shuffle/dropout seed")
    p.add_argument("--stop-at-train-loss", type=float, default=None,
                   help="stop once training loss falls below this")
    p.add_argument("--log", default=None, help="epoch log CSV (default <out>.log.csv)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="continue test primers from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True, help="token file supplying primers")
    p.add_argument("--out-dir", required=True, help="directory for generated MIDI")
    p.add_argument("--p", type=float, default=0.9,
                   help="nucleus mass; 0 or less decodes greedily")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new", type=int, default=512, help="generation budget in tokens")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--limit", type=int, default=None, help="use only the first N primers")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="feature statistics for a directory of MIDI")
    p.add_argument("--dir", required=True)
    p.add_argument("--label", default="corpus", help="column label")
    p.add_argument("--csv", default=None, help="write the table as CSV")
    p.add_argument("--strict", action="store_true", help="fail instead of skipping bad MIDI")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="side-by-side feature statistics for several corpora")
    p.add_argument("--corpus", action="append", required=True, metavar="LABEL=SPEC",
                   help="LABEL=DIR of MIDI, or LABEL=MANIFEST:originals|:variations "
                   "(accepted pairs only); repeatable")
    p.add_argument("--csv", default=None, help="write the table as CSV")
    p.add_argument("--strict", action="store_true", help="fail instead of skipping bad MIDI")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (VocabularyMismatchError, CheckpointError) as exc:
        log.error("%s", exc)
        return 3
    except NonFiniteError as exc:
        log.error("%s", exc)
        return 4
    except (
        MidiParseError,
        LeadSheetError,
        ManifestError,
        AlignmentError,
        TokenizeError,
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        json.JSONDecodeError,
        ValueError,
    ) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
