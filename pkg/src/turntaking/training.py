"""Training orchestration and artifact persistence.

One flat config type drives every run. Checkpoints are a self-describing
binary container (magic, version, content digest, JSON header, raw float64
tensors) with a human-readable sidecar; loading verifies the digest before
touching any array, so a corrupt file never yields a partial model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import arbitrator as arb
from . import imaginator as im
from .autodiff import Adam, TrainingError
from .corpus import AGENT, USER, Vocabulary

CHECKPOINT_MAGIC = b"TTCP"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint file failed validation; the message names the section."""


@dataclass
class TrainConfig:
    """Flat run configuration; field order here is the serialization order."""

    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    clip_norm: float = 5.0
    patience: int = 3
    kind: str = "imaginator"
    role: str = "agent"
    encoder: str = "textcnn"
    mode: str = "ita"
    hidden: int = 128
    gru_hidden: int = 128
    token_dim: int = 100
    tag_dim: int = 8
    filter_widths: str = "3,4,5"
    filters_per_width: int = 100
    beam_width: int = 4
    max_decode_len: int = 40
    max_history: int = 256
    turn_cap: int = 16
    subturn_cap: int = 8
    p_split: float = 0.4
    min_freq: int = 1
    valid_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        positive = {"epochs": self.epochs, "batch_size": self.batch_size,
                    "learning_rate": self.learning_rate, "clip_norm": self.clip_norm,
                    "hidden": self.hidden, "gru_hidden": self.gru_hidden,
                    "token_dim": self.token_dim, "tag_dim": self.tag_dim,
                    "filters_per_width": self.filters_per_width,
                    "beam_width": self.beam_width, "max_decode_len": self.max_decode_len,
                    "max_history": self.max_history, "min_freq": self.min_freq}
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.patience < 0:
            raise ValueError(f"patience must be non-negative, got {self.patience}")
        if not 0.0 <= self.p_split <= 1.0:
            raise ValueError(f"p_split must be in [0, 1], got {self.p_split}")
        for name, frac in (("valid_frac", self.valid_frac), ("test_frac", self.test_frac)):
            if not 0.0 <= frac < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {frac}")
        if self.kind not in ("imaginator", "arbitrator"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.role not in (AGENT, USER):
            raise ValueError(f"unknown role {self.role!r}")
        if self.encoder not in ("textcnn", "bigru"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.mode not in ("ita", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.parsed_filter_widths()

    def parsed_filter_widths(self) -> tuple[int, ...]:
        try:
            widths = tuple(int(w) for w in self.filter_widths.split(","))
        except ValueError:
            raise ValueError(f"bad filter_widths {self.filter_widths!r}") from None
        if not widths or any(w < 1 for w in widths):
            raise ValueError(f"bad filter_widths {self.filter_widths!r}")
        return widths

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, str)
                         else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            if kinds[key] in ("int", int):
                values[key] = int(raw)
            elif kinds[key] in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip("'\"")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# checkpoints


def _model_from_config(cfg: dict):
    kind = cfg.get("kind")
    if kind == "imaginator":
        return im.ImaginatorModel.from_config(cfg)
    if kind == "arbitrator":
        return arb.ArbitratorModel.from_config(cfg)
    raise CheckpointError(f"header: unknown model kind {kind!r}")


def _arrays_blob(arrays: dict[str, np.ndarray]) -> tuple[list, bytes]:
    index = []
    chunks = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append([name, list(a.shape)])
        chunks.append(a.tobytes(order="C"))
    return index, b"".join(chunks)


def save_checkpoint(model, path, vocab_hash: str, optimizer: Adam | None = None,
                    metadata: dict | None = None, train_config: TrainConfig | None = None) -> None:
    """Write the model (and optionally optimizer state) as one atomic file."""
    arrays = model.params.as_arrays()
    arr_index, arr_blob = _arrays_blob(arrays)
    opt_index, opt_blob = (None, b"")
    if optimizer is not None:
        opt_index, opt_blob = _arrays_blob(optimizer.state_arrays())
    header = {
        "arrays": arr_index,
        "metadata": metadata or {},
        "model": model.config(),
        "optimizer": opt_index,
        "train_config": train_config.to_text() if train_config else None,
        "vocab_hash": vocab_hash,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack("<I", len(header_bytes)) + header_bytes + arr_blob + opt_blob
    blob = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + hashlib.sha256(payload).digest() + struct.pack("<Q", len(payload)) + payload)
    path = Path(path)
    path.write_bytes(blob)
    path.with_suffix(path.suffix + ".txt").write_text(_sidecar_text(header))


def _sidecar_text(header: dict) -> str:
    lines = [f"format_version = {CHECKPOINT_VERSION}",
             f"vocab_hash = {header['vocab_hash']}"]
    for k, v in sorted(header["model"].items()):
        lines.append(f"model.{k} = {v}")
    for k, v in sorted(header["metadata"].items()):
        lines.append(f"metadata.{k} = {v}")
    lines.append(f"optimizer_state = {'yes' if header['optimizer'] else 'no'}")
    for name, shape in header["arrays"]:
        lines.append(f"array {name} {tuple(shape)}")
    return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    model: object
    metadata: dict
    vocab_hash: str
    optimizer_arrays: dict | None
    train_config_text: str | None


def _read_arrays(index: list, blob: bytes, offset: int, section: str) -> tuple[dict, int]:
    out = {}
    for name, shape in index:
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if offset + n_bytes > len(blob):
            raise CheckpointError(f"{section}: array data truncated at {name!r}")
        flat = np.frombuffer(blob[offset:offset + n_bytes], dtype="<f8")
        out[name] = flat.reshape(shape).astype(np.float64)
        offset += n_bytes
    return out, offset


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; raises CheckpointError before returning
    anything if the file fails any structural or integrity check."""
    blob = Path(path).read_bytes()
    if len(blob) < 48:
        raise CheckpointError("frame: file shorter than the fixed header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("frame: bad magic bytes")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"frame: unsupported format version {version}")
    digest = blob[8:40]
    payload_len = struct.unpack("<Q", blob[40:48])[0]
    payload = blob[48:48 + payload_len]
    if len(payload) != payload_len:
        raise CheckpointError("frame: payload truncated")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("payload: content digest mismatch (corrupt file)")
    header_len = struct.unpack("<I", payload[:4])[0]
    try:
        header = json.loads(payload[4:4 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"header: undecodable ({e})") from None
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError("header: vocabulary hash mismatch")
    offset = 4 + header_len
    arrays, offset = _read_arrays(header["arrays"], payload, offset, "parameters")
    opt_arrays = None
    if header["optimizer"]:
        opt_arrays, offset = _read_arrays(header["optimizer"], payload, offset, "optimizer")
    model = _model_from_config(header["model"])
    model.params.load_arrays(arrays)
    return Checkpoint(model=model, metadata=header["metadata"],
                      vocab_hash=header["vocab_hash"], optimizer_arrays=opt_arrays,
                      train_config_text=header.get("train_config"))


# ---------------------------------------------------------------------------
# metrics log


def append_metrics(path, records: Sequence[dict]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


# ---------------------------------------------------------------------------
# the epoch loop


@dataclass
class TrainResult:
    metric_name: str
    best_value: float
    best_epoch: int
    epochs_run: int
    history: list[dict]


def _imaginator_validator(model, valid_samples, vocab: Vocabulary, config: TrainConfig):
    # greedy decoding during training keeps validation cheap; the configured
    # beam width applies at evaluation time
    def decode(m, enc):
        ids = im.greedy_decode(m, enc, max_len=config.max_decode_len)
        return [vocab.decode_id(i) for i in ids]

    def validate():
        scores = im.evaluate_imaginator(model, valid_samples, vocab, decode_fn=decode)
        return scores[f"bleu_on_{model.role}_targets"]

    return "bleu", validate


def run_training(config: TrainConfig, train_samples, valid_samples, model,
                 vocab: Vocabulary, imaginators=None, metrics_path=None,
                 checkpoint_path=None) -> TrainResult:
    """Seeded epoch loop with per-epoch validation and early stopping.

    Shuffling derives a fresh rng from seed XOR epoch. An epoch that does
    not improve validation counts against patience; training stops once
    bad epochs reach it (so patience 0 runs exactly one epoch). The model is
    left holding the best-validation parameters, never anything worse.
    """
    if not len(train_samples):
        raise TrainingError("empty training split")
    if not len(valid_samples):
        raise TrainingError("empty validation split")
    kind = model.config()["kind"]
    opt = Adam(model.params, lr=config.learning_rate, clip_norm=config.clip_norm)
    metadata_extra: dict = {}

    if kind == "imaginator":
        step = lambda batch: im.train_step(batch, model, opt, vocab)
        metric_name, validate = _imaginator_validator(model, valid_samples, vocab, config)
        train_items = list(train_samples)
    else:
        if model.mode == "ita" and imaginators is None:
            raise TrainingError("ita-mode arbitrator training needs both imaginators")
        pair = imaginators if model.mode == "ita" else None
        train_items = arb.prepare_samples(train_samples, model, vocab, pair,
                                          max_len=config.max_decode_len)
        prepared_valid = arb.prepare_samples(valid_samples, model, vocab, pair,
                                             max_len=config.max_decode_len)
        step = lambda batch: arb.train_step(batch, model, opt)
        metric_name = "accuracy"
        validate = lambda: arb.evaluate_prepared(model, prepared_valid)
        if model.mode == "ita":
            metadata_extra["imagination_decode"] = "greedy"

    history: list[dict] = []
    best_value = -math.inf
    best_epoch = 0
    best_arrays = model.params.as_arrays()
    bad_epochs = 0
    epochs_run = 0
    n = len(train_items)

    for epoch in range(1, config.epochs + 1):
        epochs_run = epoch
        t0 = time.monotonic()
        order = np.random.default_rng(config.seed ^ epoch).permutation(n)
        losses = []
        for step_idx, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_items[i] for i in order[start:start + config.batch_size]]
            try:
                losses.append(step(batch))
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch} step {step_idx}: {e}") from None
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingError(f"epoch {epoch}: training loss diverged")
        history.append({"epoch": epoch, "split": "train", "metric": "loss",
                        "value": mean_loss, "seconds": round(time.monotonic() - t0, 3)})
        t1 = time.monotonic()
        value = float(validate())
        history.append({"epoch": epoch, "split": "valid", "metric": metric_name,
                        "value": value, "seconds": round(time.monotonic() - t1, 3)})
        if value > best_value:
            best_value = value
            best_epoch = epoch
            best_arrays = model.params.as_arrays()
            bad_epochs = 0
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, vocab.hash(), optimizer=opt,
                                metadata={"epoch": epoch, "metric": metric_name,
                                          "best_metric": value, **metadata_extra},
                                train_config=config)
        else:
            bad_epochs += 1
        if bad_epochs >= config.patience:
            break

    model.params.load_arrays(best_arrays)
    if metrics_path is not None:
        append_metrics(metrics_path, history)
    return TrainResult(metric_name=metric_name, best_value=best_value,
                       best_epoch=best_epoch, epochs_run=epochs_run, history=history)
