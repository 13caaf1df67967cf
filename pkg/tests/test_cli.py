import csv
import json

import numpy as np
import pytest

from helpers import write_corpus
from overpaint.autodiff import NonFiniteError
from overpaint.cli import main
from overpaint.dataset import load_manifest
from overpaint.midi_io import load_midi
from overpaint.model import ModelConfig, TransformerLM, load_checkpoint, save_checkpoint
from overpaint.tokenizer import BOS, EOS, SEP, build_vocabulary, read_token_file

# song ids come from lead sheet stems normalized to alphanumerics
REJECTED_PAIR = "bluegarden_w004"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full command pipeline over the three-song corpus, run once per module."""
    root = tmp_path_factory.mktemp("pipeline")
    sheets, perfs = write_corpus(root)
    paths = {
        "root": root,
        "sheets": sheets,
        "perfs": perfs,
        "pairs": root / "pairs.jsonl",
        "review": root / "pairs.jsonl.review.jsonl",
        "reviewed": root / "reviewed.jsonl",
        "aug": root / "aug.jsonl",
        "tokens": root / "tokens",
        "model": root / "model.ovpt",
        "gen": root / "gen",
    }
    assert main(["--quiet", "extract-pairs",
                 "--performances", str(perfs), "--leadsheets", str(sheets),
                 "--out", str(paths["pairs"])]) == 0

    # reject one window on the edited review sheet
    lines = [json.loads(l) for l in paths["review"].read_text().splitlines()]
    for line in lines:
        if line["pair_id"] == REJECTED_PAIR:
            line["status"] = "rejected"
    paths["review"].write_text("".join(json.dumps(l) + "\n" for l in lines))
    assert main(["--quiet", "review", "--pairs", str(paths["pairs"]),
                 "--decisions", str(paths["review"]),
                 "--out", str(paths["reviewed"])]) == 0

    assert main(["--quiet", "augment", "--pairs", str(paths["reviewed"]),
                 "--out", str(paths["aug"]), "--seed", "0"]) == 0
    assert main(["--quiet", "tokenize", "--pairs", str(paths["aug"]),
                 "--out-dir", str(paths["tokens"])]) == 0
    assert main(["--quiet", "train", "--tokens", str(paths["tokens"]),
                 "--out", str(paths["model"]), "--epochs", "1",
                 "--batch-size", "8", "--dropout", "0.0", "--seed", "0"]) == 0
    assert main(["--quiet", "generate", "--checkpoint", str(paths["model"]),
                 "--tokens", str(paths["tokens"] / "tokens_test.bin"),
                 "--out-dir", str(paths["gen"]), "--limit", "2",
                 "--max-new", "24", "--seed", "1"]) == 0
    return paths


def test_extract_and_review_stage(pipeline):
    pairs = load_manifest(pipeline["pairs"])
    assert len(pairs) == 6
    assert all(p.status == "accepted" for p in pairs)

    reviewed = load_manifest(pipeline["reviewed"])
    statuses = {p.pair_id: p.status for p in reviewed}
    assert statuses.pop(REJECTED_PAIR) == "rejected"
    assert set(statuses.values()) == {"accepted"}


def test_augment_stage(pipeline):
    pairs = load_manifest(pipeline["aug"])
    assert len(pairs) == 5 * 12
    song_splits = {}
    for p in pairs:
        song_splits.setdefault(p.song_id, set()).add(p.split)
    assert all(len(s) == 1 for s in song_splits.values())  # songs stay whole
    assert {next(iter(s)) for s in song_splits.values()} == {"train", "val", "test"}

    sidecar = json.loads((pipeline["root"] / "aug.jsonl.run.json").read_text())
    assert sidecar["command"] == "augment"
    assert sidecar["seed"] == 0
    assert str(pipeline["reviewed"]) in sidecar["inputs"]
    assert str(pipeline["aug"]) in sidecar["outputs"]
    assert sidecar["wall_clock_seconds"] >= 0


def test_tokenize_stage(pipeline):
    tokens = pipeline["tokens"]
    assert (tokens / "vocab.json").exists()
    vocab = build_vocabulary()
    total = 0
    for split in ("train", "val", "test"):
        seqs = read_token_file(tokens / f"tokens_{split}.bin", vocab)
        total += len(seqs)
        for seq in seqs:
            assert seq[0] == BOS and seq[-1] == EOS
            assert np.count_nonzero(seq == SEP) == 1
    assert total == 60


def test_train_stage(pipeline):
    model, meta = load_checkpoint(pipeline["model"])
    assert meta["vocab_hash"] == build_vocabulary().digest
    assert meta["epoch"] == 1
    with open(str(pipeline["model"]) + ".log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["epoch", "lr", "train_loss", "val_loss"]
    assert len(rows) == 2


def test_generate_stage(pipeline):
    gen = pipeline["gen"]
    names = sorted(p.name for p in gen.iterdir() if not p.name.endswith(".run.json"))
    assert names == ["0000.mid", "0001.mid", "generated_tokens.bin"]
    for name in ("0000.mid", "0001.mid"):
        load_midi(gen / name)  # parses back
    seqs = read_token_file(gen / "generated_tokens.bin", build_vocabulary())
    assert len(seqs) == 2 and all(len(s) <= 24 for s in seqs)


def test_evaluate_prints_table(pipeline, capsys, tmp_path):
    csv_out = tmp_path / "eval.csv"
    rc = main(["--quiet", "evaluate", "--dir", str(pipeline["gen"]),
               "--label", "generated", "--csv", str(csv_out)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Pitch Class Entropy" in out and "generated" in out
    with open(csv_out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Feature", "generated"]


def test_report_compares_corpora(pipeline, capsys, tmp_path):
    csv_out = tmp_path / "report.csv"
    rc = main([
        "--quiet", "report",
        "--corpus", f"originals={pipeline['aug']}:originals",
        "--corpus", f"variations={pipeline['aug']}:variations",
        "--corpus", f"generated={pipeline['gen']}",
        "--csv", str(csv_out),
    ])
    assert rc == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["Feature", "originals", "variations", "generated"]
    with open(csv_out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Feature", "originals", "variations", "generated"]
    assert rows[-1][0] == "Skipped"


def test_report_rejects_bad_corpus_spec(pipeline):
    assert main(["--quiet", "report", "--corpus", "nodirhere"]) == 2
    assert main(["--quiet", "report",
                 "--corpus", f"g={pipeline['gen']}:originals"]) == 2


def test_input_errors_exit_2(pipeline, tmp_path):
    assert main(["--quiet", "extract-pairs",
                 "--performances", str(tmp_path / "nope"),
                 "--leadsheets", str(pipeline["sheets"]),
                 "--out", str(tmp_path / "p.jsonl")]) == 2

    bad_review = tmp_path / "bad.jsonl"
    bad_review.write_text('{"pair_id": "ghost_w000", "status": "accepted"}\n')
    assert main(["--quiet", "review", "--pairs", str(pipeline["pairs"]),
                 "--decisions", str(bad_review),
                 "--out", str(tmp_path / "o.jsonl")]) == 2

    # tokenize refuses a manifest that never went through augment
    assert main(["--quiet", "tokenize", "--pairs", str(pipeline["pairs"]),
                 "--out-dir", str(tmp_path / "t")]) == 2

    # augment refuses a manifest with nothing accepted
    lines = [json.loads(l) for l in pipeline["review"].read_text().splitlines()]
    for line in lines:
        line["status"] = "rejected"
    all_bad = tmp_path / "all_bad.jsonl"
    all_bad.write_text("".join(json.dumps(l) + "\n" for l in lines))
    rejected = tmp_path / "rejected.jsonl"
    assert main(["--quiet", "review", "--pairs", str(pipeline["pairs"]),
                 "--decisions", str(all_bad), "--out", str(rejected)]) == 0
    assert main(["--quiet", "augment", "--pairs", str(rejected),
                 "--out", str(tmp_path / "a.jsonl")]) == 2


def test_checkpoint_errors_exit_3(pipeline, tmp_path):
    junk = tmp_path / "junk.ovpt"
    junk.write_bytes(b"not a checkpoint at all")
    assert main(["--quiet", "generate", "--checkpoint", str(junk),
                 "--tokens", str(pipeline["tokens"] / "tokens_test.bin"),
                 "--out-dir", str(tmp_path / "g")]) == 3

    # valid checkpoint built against some other vocabulary
    stale = tmp_path / "stale.ovpt"
    tiny = TransformerLM(ModelConfig(vocab_size=50, n_layers=1, d_model=16,
                                     n_heads=4, d_ff=32, max_len=32))
    save_checkpoint(stale, tiny, vocab_hash="00" * 32, epoch=1, val_loss=1.0)
    assert main(["--quiet", "generate", "--checkpoint", str(stale),
                 "--tokens", str(pipeline["tokens"] / "tokens_test.bin"),
                 "--out-dir", str(tmp_path / "g2")]) == 3


def test_non_finite_training_exits_4(pipeline, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise NonFiniteError("loss diverged")

    monkeypatch.setattr("overpaint.cli.train", explode)
    assert main(["--quiet", "train", "--tokens", str(pipeline["tokens"]),
                 "--out", str(tmp_path / "m.ovpt"), "--epochs", "1"]) == 4


def test_argparse_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    capsys.readouterr()


def test_strict_skips_or_fails_on_bad_midi(pipeline, tmp_path, capsys):
    mixed = tmp_path / "mixed"
    mixed.mkdir()
    good = next(p for p in pipeline["gen"].iterdir() if p.suffix == ".mid")
    (mixed / "good.mid").write_bytes(good.read_bytes())
    (mixed / "broken.mid").write_bytes(b"MThd garbage")
    assert main(["--quiet", "evaluate", "--dir", str(mixed)]) == 0
    capsys.readouterr()
    assert main(["--quiet", "evaluate", "--dir", str(mixed), "--strict"]) == 2


def test_reruns_reproduce_primary_artifacts(pipeline, tmp_path):
    # same file name so the manifest's relative midi_dir matches byte for byte
    aug2 = tmp_path / "aug.jsonl"
    assert main(["--quiet", "augment", "--pairs", str(pipeline["reviewed"]),
                 "--out", str(aug2), "--seed", "0"]) == 0
    assert aug2.read_bytes() == pipeline["aug"].read_bytes()

    tokens2 = tmp_path / "tokens2"
    assert main(["--quiet", "tokenize", "--pairs", str(aug2),
                 "--out-dir", str(tokens2)]) == 0
    for name in ("vocab.json", "tokens_train.bin", "tokens_val.bin", "tokens_test.bin"):
        assert (tokens2 / name).read_bytes() == (pipeline["tokens"] / name).read_bytes()

    gen2 = tmp_path / "gen2"
    assert main(["--quiet", "generate", "--checkpoint", str(pipeline["model"]),
                 "--tokens", str(pipeline["tokens"] / "tokens_test.bin"),
                 "--out-dir", str(gen2), "--limit", "2",
                 "--max-new", "24", "--seed", "1"]) == 0
    for name in ("0000.mid", "0001.mid", "generated_tokens.bin"):
        assert (gen2 / name).read_bytes() == (pipeline["gen"] / name).read_bytes()
