"""Decoder-only transformer for token-pair continuation, plus training loop,
checkpoint format, and nucleus sampling.

The model is pre-norm: token + learned absolute position embeddings, then
blocks of causal multi-head self-attention and a gelu feed-forward, each with
residual connections, a final layer norm, and a tied-embedding output
projection. All math runs on the in-package autodiff engine.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Tensor
from .tokenizer import BOS, EOS, MAX_LEN, PAD, SEP

CHECKPOINT_MAGIC = b"OVPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or configuration mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 8
    d_ff: int = 256
    max_len: int = MAX_LEN
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"bad dtype {self.dtype}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"bad dropout {self.dropout}")


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    """The two published model sizes."""
    presets = {
        "model1": dict(n_layers=2, d_model=64, n_heads=8, d_ff=256),
        "model2": dict(n_layers=4, d_model=128, n_heads=8, d_ff=512),
    }
    if name not in presets:
        raise ValueError(f"unknown preset {name!r} (expected model1 or model2)")
    return ModelConfig(vocab_size=vocab_size, **{**presets[name], **overrides})


_INIT_STD = 0.02


class TransformerLM:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = np.float32 if config.dtype == "float32" else np.float64
        rng = np.random.default_rng(seed)

        def normal(*shape) -> Tensor:
            return Tensor(
                rng.normal(0.0, _INIT_STD, size=shape).astype(dtype), requires_grad=True
            )

        def zeros(*shape) -> Tensor:
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(*shape) -> Tensor:
            return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        d, f = config.d_model, config.d_ff
        self.params: dict[str, Tensor] = {}
        p = self.params
        p["tok_emb"] = normal(config.vocab_size, d)
        p["pos_emb"] = normal(config.max_len, d)
        for i in range(config.n_layers):
            p[f"layer{i}.ln1.gain"] = ones(d)
            p[f"layer{i}.ln1.bias"] = zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"layer{i}.attn.{name}"] = normal(d, d)
            for name in ("bq", "bk", "bv", "bo"):
                p[f"layer{i}.attn.{name}"] = zeros(d)
            p[f"layer{i}.ln2.gain"] = ones(d)
            p[f"layer{i}.ln2.bias"] = zeros(d)
            p[f"layer{i}.ff.w1"] = normal(d, f)
            p[f"layer{i}.ff.b1"] = zeros(f)
            p[f"layer{i}.ff.w2"] = normal(f, d)
            p[f"layer{i}.ff.b2"] = zeros(d)
        p["final_ln.gain"] = ones(d)
        p["final_ln.bias"] = zeros(d)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @staticmethod
    def expected_param_count(config: ModelConfig) -> int:
        """Closed form for the parameter total (tied output adds nothing)."""
        d, f = config.d_model, config.d_ff
        per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
        return (
            config.vocab_size * d
            + config.max_len * d
            + config.n_layers * per_layer
            + 2 * d
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(
        self,
        ids: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        last_only: bool = False,
    ) -> Tensor:
        """Logits over the vocabulary: (B, L, V), or (B, 1, V) for last_only.

        `ids` is (B, L) int; positions beyond max_len are rejected. Dropout
        runs only when training with a generator supplied.
        """
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("ids must be (batch, length)")
        batch, length = ids.shape
        if length < 1 or length > cfg.max_len:
            raise ValueError(f"sequence length {length} outside 1..{cfg.max_len}")
        use_dropout = training and cfg.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        p = self.params

        tok = ad.embedding_lookup(p["tok_emb"], ids)
        pos = ad.narrow(p["pos_emb"], 0, 0, length)
        x = ad.add(tok, pos)
        if use_dropout:
            x = ad.dropout(x, cfg.dropout, rng)

        d_head = cfg.d_model // cfg.n_heads
        inv_sqrt = 1.0 / math.sqrt(d_head)
        for i in range(cfg.n_layers):
            a = ad.layer_norm(x, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])
            q = ad.add(ad.matmul(a, p[f"layer{i}.attn.wq"]), p[f"layer{i}.attn.bq"])
            k = ad.add(ad.matmul(a, p[f"layer{i}.attn.wk"]), p[f"layer{i}.attn.bk"])
            v = ad.add(ad.matmul(a, p[f"layer{i}.attn.wv"]), p[f"layer{i}.attn.bv"])
            heads = []
            for h in range(cfg.n_heads):
                q_h = ad.narrow(q, 2, h * d_head, d_head)
                k_h = ad.narrow(k, 2, h * d_head, d_head)
                v_h = ad.narrow(v, 2, h * d_head, d_head)
                scores = ad.scale(ad.matmul(q_h, ad.swap_last2(k_h)), inv_sqrt)
                weights = ad.softmax(ad.causal_mask_add(scores))
                if use_dropout:
                    weights = ad.dropout(weights, cfg.dropout, rng)
                heads.append(ad.matmul(weights, v_h))
            attn = ad.concat_last(heads)
            attn = ad.add(ad.matmul(attn, p[f"layer{i}.attn.wo"]), p[f"layer{i}.attn.bo"])
            if use_dropout:
                attn = ad.dropout(attn, cfg.dropout, rng)
            x = ad.add(x, attn)

            fin = ad.layer_norm(x, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])
            hidden = ad.gelu(ad.add(ad.matmul(fin, p[f"layer{i}.ff.w1"]), p[f"layer{i}.ff.b1"]))
            ff = ad.add(ad.matmul(hidden, p[f"layer{i}.ff.w2"]), p[f"layer{i}.ff.b2"])
            if use_dropout:
                ff = ad.dropout(ff, cfg.dropout, rng)
            x = ad.add(x, ff)

        x = ad.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
        if last_only:
            x = ad.narrow(x, 1, x.shape[1] - 1, 1)
        return ad.matmul(x, ad.transpose2d(p["tok_emb"]))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.copy()


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(
    path, model: TransformerLM, vocab_hash: str, epoch: int, val_loss: float
) -> None:
    """OVPT container: magic, version, JSON metadata, little-endian f32 blobs."""
    meta = {
        "config": asdict(model.config),
        "vocab_hash": vocab_hash,
        "epoch": epoch,
        "val_loss": val_loss,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(meta_blob))
    out += meta_blob
    items = sorted(model.params.items())
    out += struct.pack("<I", len(items))
    for name, p in items:
        encoded = name.encode()
        out += struct.pack("<H", len(encoded))
        out += encoded
        arr = p.data.astype("<f4")
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[TransformerLM, dict]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", data[8:12])
    try:
        meta = json.loads(data[12 : 12 + meta_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc
    pos = 12 + meta_len
    arrays: dict[str, np.ndarray] = {}
    try:
        (n_blobs,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        for _ in range(n_blobs):
            (name_len,) = struct.unpack("<H", data[pos : pos + 2])
            pos += 2
            name = data[pos : pos + name_len].decode()
            pos += name_len
            ndim = data[pos]
            pos += 1
            shape = struct.unpack(f"<{ndim}I", data[pos : pos + 4 * ndim])
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            blob = data[pos : pos + 4 * count]
            if len(blob) != 4 * count:
                raise CheckpointError(f"truncated blob for {name}")
            arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape)
            pos += 4 * count
        config = ModelConfig(**meta["config"])
    except (struct.error, IndexError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    model = TransformerLM(config, seed=0)
    model.load_state_arrays(arrays)
    return model, meta


# --- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    lr_floor: float = 1e-5
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.early_stop_patience <= self.scheduler_patience:
            raise ValueError("early_stop_patience must exceed scheduler_patience")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr <= 0:
            raise ValueError("bad training configuration")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    pre_sep_loss: float
    post_sep_loss: float
    seconds: float


@dataclass
class TrainResult:
    model: TransformerLM
    best_epoch: int
    best_val_loss: float
    logs: list[EpochLog] = field(default_factory=list)


def _pad_batch(seqs: list[np.ndarray]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    batch = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s
    return batch


def _sep_split_masks(targets: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masks over target positions: predicting tokens up to and including SEP
    versus after it. Sequences with no SEP count entirely as pre."""
    batch, width = targets.shape
    pre = np.zeros_like(targets, dtype=bool)
    post = np.zeros_like(targets, dtype=bool)
    valid = targets != PAD
    for row in range(batch):
        hits = np.nonzero(ids[row] == SEP)[0]
        sep_at = hits[0] if hits.size else ids.shape[1]
        cols = np.arange(width)
        pre[row] = valid[row] & (cols + 1 <= sep_at)
        post[row] = valid[row] & (cols + 1 > sep_at)
    return pre, post


def _masked_mean(per_position: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
    count = int(mask.sum())
    if count == 0:
        return math.nan, 0
    return float(per_position[mask].sum() / count), count


def _epoch_pass(
    model: TransformerLM,
    sequences: list[np.ndarray],
    order: np.ndarray,
    batch_size: int,
    train: bool,
    rng: np.random.Generator | None,
    optimizer: AdamState | None,
    lr: float,
) -> tuple[float, float, float]:
    """One pass over `sequences`; returns (loss, pre_sep_loss, post_sep_loss)."""
    total = np.zeros(3)
    counts = np.zeros(3)
    for lo in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[lo : lo + batch_size]]
        ids = _pad_batch(chunk)
        inputs, targets = ids[:, :-1], ids[:, 1:]
        if train:
            logits = model.forward(inputs, training=True, rng=rng)
            loss, per_position = ad.cross_entropy(
                logits, targets, ignore_index=PAD, return_elementwise=True
            )
            model.zero_grad()
            loss.backward()
            ad.adam_step(model.parameters(), optimizer, lr)
        else:
            with ad.no_grad():
                logits = model.forward(inputs)
                loss, per_position = ad.cross_entropy(
                    logits, targets, ignore_index=PAD, return_elementwise=True
                )
        if not math.isfinite(loss.item()):
            raise NonFiniteError("training loss diverged")
        pre_mask, post_mask = _sep_split_masks(targets, inputs)
        for j, mask in enumerate((targets != PAD, pre_mask, post_mask)):
            total[j] += float(per_position[mask].sum())
            counts[j] += int(mask.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, total / np.maximum(counts, 1), math.nan)
    return float(means[0]), float(means[1]), float(means[2])


def train(
    train_sequences: list[np.ndarray],
    val_sequences: list[np.ndarray],
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    log_path=None,
    stop_at_train_loss: float | None = None,
    progress=None,
) -> TrainResult:
    """Train from scratch with Adam, a reduce-on-plateau schedule, and early
    stopping on validation loss; the best-validation weights are returned.

    All randomness (init, shuffling, dropout) derives from train_config.seed.
    """
    if not train_sequences or not val_sequences:
        raise ValueError("need non-empty train and val sets")
    seeds = np.random.SeedSequence(train_config.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    model = TransformerLM(model_config, seed=init_seed)
    optimizer = AdamState()
    lr = train_config.lr
    best_val = math.inf
    best_epoch = 0
    best_state = model.state_arrays()
    bad_for_scheduler = 0
    bad_for_stop = 0
    logs: list[EpochLog] = []

    log_file = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        writer.writerow(
            ["epoch", "lr", "train_loss", "val_loss", "pre_sep_loss", "post_sep_loss", "seconds"]
        )
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            t0 = time.monotonic()
            order = shuffle_rng.permutation(len(train_sequences))
            train_loss, pre_loss, post_loss = _epoch_pass(
                model, train_sequences, order, train_config.batch_size,
                True, dropout_rng, optimizer, lr,
            )
            val_loss, _, _ = _epoch_pass(
                model, val_sequences, np.arange(len(val_sequences)),
                train_config.batch_size, False, None, None, lr,
            )
            seconds = time.monotonic() - t0
            entry = EpochLog(epoch, lr, train_loss, val_loss, pre_loss, post_loss, seconds)
            logs.append(entry)
            if writer:
                writer.writerow(
                    [epoch, repr(lr), repr(train_loss), repr(val_loss),
                     repr(pre_loss), repr(post_loss), f"{seconds:.3f}"]
                )
            if progress:
                progress(entry)

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = model.state_arrays()
                bad_for_scheduler = 0
                bad_for_stop = 0
            else:
                bad_for_scheduler += 1
                bad_for_stop += 1
                if bad_for_scheduler > train_config.scheduler_patience:
                    lr = max(lr * train_config.scheduler_factor, train_config.lr_floor)
                    bad_for_scheduler = 0
                if bad_for_stop >= train_config.early_stop_patience:
                    break
            if stop_at_train_loss is not None and train_loss < stop_at_train_loss:
                break
    finally:
        if log_file:
            log_file.close()

    model.load_state_arrays(best_state)
    return TrainResult(model, best_epoch, best_val, logs)


# --- sampling -------------------------------------------------------------------


def nucleus_sample(
    logits: np.ndarray,
    p: float,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> int:
    """Sample from the smallest probability prefix reaching mass p.

    Logits scale by 1/temperature, pass through a stable softmax, sort
    descending (stable, so equal probabilities keep index order), and the
    kept prefix renormalizes before one draw. The mass comparison allows
    1e-9 of rounding slack so accumulated float error cannot pull an extra
    token into the nucleus.
    """
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("logits must be a vector")
    if not np.isfinite(logits).all():
        raise NonFiniteError("non-finite logits passed to nucleus_sample")
    rng = rng or np.random.default_rng()

    scaled = logits / temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    keep = int(np.searchsorted(cumulative, p - 1e-9, side="left")) + 1
    keep = min(keep, len(order))
    kept = order[:keep]
    kept_probs = probs[kept] / probs[kept].sum()
    return int(rng.choice(kept, p=kept_probs))


def generate(
    model: TransformerLM,
    primer: list[int] | np.ndarray,
    p: float = 0.9,
    temperature: float = 1.0,
    max_new: int = 512,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Continue a BOS...SEP primer; returns only the newly sampled tokens
    (EOS excluded). p <= 0 selects greedy argmax decoding."""
    primer = list(int(t) for t in primer)
    if not primer:
        raise ValueError("empty primer")
    if len(primer) >= model.config.max_len:
        raise ValueError("primer already fills the context window")
    rng = rng or np.random.default_rng()

    context = list(primer)
    out: list[int] = []
    for _ in range(max_new):
        if len(context) >= model.config.max_len:
            break
        ids = np.asarray([context], dtype=np.int64)
        with ad.no_grad():
            logits = model.forward(ids, last_only=True)
        row = logits.data[0, -1].astype(np.float64)
        if p <= 0:
            token = int(np.argmax(row))
        else:
            token = nucleus_sample(row, p, temperature, rng)
        if token == EOS:
            break
        context.append(token)
        out.append(token)
    return out
