"""Dialogue corpus ingestion, modification, and sample derivation.

The raw corpora arrive as either a JSON dump of dialogues with speaker-tagged
turns (optionally annotated with slot values), a one-dialogue-per-line text
file with a delimiter between utterances, or generic JSONL. Ingestion
normalizes all of them into the same shape: lowercased whitespace tokens,
alternating roles at turn granularity, subturn 0 everywhere.

The modification pass then (a) masks annotated slot values with bracketed
placeholder tokens, and (b) probabilistically splits user utterances at
sentence-final punctuation into subturns, which is what creates the
wait/reply prediction problem in the first place: after every user subturn
the agent must decide whether more is coming.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AGENT = "agent"
USER = "user"

PAD, UNK, BOS, EOS, SEP = 0, 1, 2, 3, 4
AGENT_TAG_ID, USER_TAG_ID = 5, 6
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<agent>", "<user>")

SPLIT_PUNCTUATION = frozenset({".", "!", "?", ";"})

DEFAULT_MAX_HISTORY = 256
DEFAULT_TURN_CAP = 16
DEFAULT_SUBTURN_CAP = 8


class IngestError(ValueError):
    """A source record violated its schema; the message carries a locator."""


@dataclass(frozen=True)
class Utterance:
    role: str
    turn_index: int
    subturn_index: int
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.role not in (AGENT, USER):
            raise ValueError(f"unknown role {self.role!r}")
        if self.turn_index < 0 or self.subturn_index < 0:
            raise ValueError("turn and subturn indices are non-negative")
        if self.role == AGENT and self.subturn_index != 0:
            raise ValueError("agent utterances are never split into subturns")
        if not self.tokens:
            raise ValueError("utterance has no tokens")
        if any((not t) or any(c.isspace() for c in t) for t in self.tokens):
            raise ValueError("tokens must be non-empty and whitespace-free")


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise ValueError(f"dialogue {self.id!r} is empty")


@dataclass(frozen=True)
class ArbitratorSample:
    """History up to and including a user utterance; 1 means reply now."""
    history: tuple[Utterance, ...]
    label: int

    def __post_init__(self):
        if not self.history or self.history[-1].role != USER:
            raise ValueError("history must end with a user utterance")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ImaginatorSample:
    history: tuple[Utterance, ...]
    target: Utterance
    role: str

    def __post_init__(self):
        if self.target.role != self.role:
            raise ValueError("target role must match the sample role")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# ---------------------------------------------------------------------------
# ingestion


def _assemble_dialogue(did: str, raw: list[tuple[str, str]]) -> Dialogue | None:
    """Turn (role, text) pairs into a Dialogue.

    Consecutive same-role messages are combined into a single utterance, so
    roles strictly alternate afterwards and every utterance starts at
    subturn 0; splitting is the only step that creates further subturns.
    Returns None for a dialogue with no usable content.
    """
    merged: list[tuple[str, list[str]]] = []
    for i, (role, text) in enumerate(raw):
        toks = tokenize(text)
        if not toks:
            raise IngestError(f"dialogue {did!r}, message {i}: empty utterance")
        if merged and merged[-1][0] == role:
            merged[-1][1].extend(toks)
        else:
            merged.append((role, toks))
    if not merged:
        return None
    utts = tuple(
        Utterance(role=role, turn_index=t, subturn_index=0, tokens=tuple(toks))
        for t, (role, toks) in enumerate(merged)
    )
    return Dialogue(id=did, utterances=utts)


def _normalize_speaker(value, locator: str) -> str:
    s = str(value).strip().lower()
    if s in ("user", "usr", "customer"):
        return USER
    if s in ("agent", "system", "sys", "assistant", "wizard"):
        return AGENT
    raise IngestError(f"{locator}: unknown speaker {value!r}")


def ingest_source(path, format: str):
    """Read a corpus file.

    Returns (dialogues, annotations, skipped) where annotations maps dialogue
    id to its slot value_map (empty for formats without annotations) and
    skipped counts empty dialogues dropped with a warning.
    """
    path = Path(path)
    if format == "multiwoz-like":
        return _ingest_multiwoz(path)
    if format == "dailydialogue-like":
        return _ingest_dailydialogue(path)
    if format == "generic-jsonl":
        return _ingest_jsonl(path)
    raise ValueError(f"unknown corpus format {format!r}")


def _ingest_multiwoz(path: Path):
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IngestError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(records, list):
        raise IngestError(f"{path}: expected a top-level list of dialogues")
    dialogues, annotations, skipped = [], {}, 0
    for n, rec in enumerate(records):
        loc = f"{path}:dialogue[{n}]"
        if not isinstance(rec, dict) or "turns" not in rec:
            raise IngestError(f"{loc}: missing 'turns'")
        did = str(rec.get("id", n))
        raw = []
        for m, turn in enumerate(rec["turns"]):
            if not isinstance(turn, dict) or "speaker" not in turn or "text" not in turn:
                raise IngestError(f"{loc}.turns[{m}]: need 'speaker' and 'text'")
            raw.append((_normalize_speaker(turn["speaker"], f"{loc}.turns[{m}]"), str(turn["text"])))
        d = _assemble_dialogue(did, raw)
        if d is None:
            skipped += 1
            continue
        slots = rec.get("slots", {})
        value_map = {}
        for name, vals in slots.items():
            value_map[str(name)] = [str(v) for v in (vals if isinstance(vals, list) else [vals])]
        dialogues.append(d)
        annotations[did] = value_map
    return dialogues, annotations, skipped


def _ingest_dailydialogue(path: Path, delimiter: str = "__eou__"):
    """One dialogue per line, utterances separated by the delimiter.

    Speakers are unannotated in this layout; they alternate starting with the
    user.
    """
    dialogues, skipped = [], 0
    for n, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            skipped += 1
            continue
        pieces = [p.strip() for p in line.split(delimiter)]
        pieces = [p for p in pieces if p]
        if not pieces:
            skipped += 1
            continue
        raw = [(USER if i % 2 == 0 else AGENT, p) for i, p in enumerate(pieces)]
        d = _assemble_dialogue(str(n), raw)
        if d is None:
            skipped += 1
        else:
            dialogues.append(d)
    return dialogues, {}, skipped


def _ingest_jsonl(path: Path):
    dialogues, skipped = [], 0
    for n, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        loc = f"{path}:{n + 1}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise IngestError(f"{loc}: bad JSON ({e})") from None
        if "utterances" not in rec:
            raise IngestError(f"{loc}: missing 'utterances'")
        did = str(rec.get("id", n))
        raw = []
        for m, u in enumerate(rec["utterances"]):
            if "role" not in u or "text" not in u:
                raise IngestError(f"{loc}.utterances[{m}]: need 'role' and 'text'")
            raw.append((_normalize_speaker(u["role"], f"{loc}.utterances[{m}]"), str(u["text"])))
        d = _assemble_dialogue(did, raw)
        if d is None:
            skipped += 1
        else:
            dialogues.append(d)
    return dialogues, {}, skipped


# ---------------------------------------------------------------------------
# modification


def mask_slots(dialogue: Dialogue, value_map: dict[str, list[str]]) -> Dialogue:
    """Replace annotated slot values with single bracketed placeholder tokens.

    Matching is on token subsequences, longest value first, scanning left to
    right; an empty map is the identity.
    """
    if not value_map:
        return dialogue
    patterns: list[tuple[tuple[str, ...], str]] = []
    for name, values in value_map.items():
        for v in values:
            toks = tuple(tokenize(v))
            if toks:
                patterns.append((toks, f"[{name.lower()}]"))
    # longest first so "01223 323737" wins over a bare "01223"
    patterns.sort(key=lambda p: (-len(p[0]), p[0], p[1]))
    if not patterns:
        return dialogue

    def mask_tokens(tokens: tuple[str, ...]) -> tuple[str, ...]:
        out: list[str] = []
        i = 0
        while i < len(tokens):
            for pat, repl in patterns:
                if tokens[i:i + len(pat)] == pat:
                    out.append(repl)
                    i += len(pat)
                    break
            else:
                out.append(tokens[i])
                i += 1
        return tuple(out)

    utts = tuple(
        Utterance(u.role, u.turn_index, u.subturn_index, mask_tokens(u.tokens))
        for u in dialogue.utterances
    )
    return Dialogue(dialogue.id, utts)


def _dialogue_rng(seed: int, dialogue_id: str) -> np.random.Generator:
    # hash the (seed, id) pair so splitting a dialogue never depends on how
    # many dialogues came before it in the file
    digest = hashlib.blake2b(f"{seed}|{dialogue_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


def _boundary_positions(tokens: Sequence[str]) -> list[int]:
    """Indices i such that tokens[:i+1] | tokens[i+1:] is a legal split."""
    return [i for i in range(len(tokens) - 1) if tokens[i] in SPLIT_PUNCTUATION]


def split_utterances(dialogue: Dialogue, p_split: float, seed: int) -> Dialogue:
    """Split user utterances at sentence punctuation, each boundary with p_split.

    The punctuation token stays on the left segment. Segments become
    consecutive subturns of the same turn. Agent utterances pass through.
    """
    if not 0.0 <= p_split <= 1.0:
        raise ValueError(f"p_split must be a probability, got {p_split}")
    rng = _dialogue_rng(seed, dialogue.id)
    out: list[Utterance] = []
    for u in dialogue.utterances:
        if u.role != USER:
            out.append(u)
            continue
        cuts = [i for i in _boundary_positions(u.tokens) if rng.random() < p_split]
        if not cuts:
            out.append(u)
            continue
        segments = []
        start = 0
        for c in cuts:
            segments.append(u.tokens[start:c + 1])
            start = c + 1
        segments.append(u.tokens[start:])
        for j, seg in enumerate(segments):
            out.append(Utterance(USER, u.turn_index, j, tuple(seg)))
    return Dialogue(dialogue.id, tuple(out))


def modify_corpus(dialogues: Iterable[Dialogue], annotations: dict[str, dict[str, list[str]]],
                  p_split: float, seed: int) -> list[Dialogue]:
    """mask_slots then split_utterances over a whole corpus."""
    out = []
    for d in dialogues:
        d = mask_slots(d, annotations.get(d.id, {}))
        out.append(split_utterances(d, p_split, seed))
    return out


# ---------------------------------------------------------------------------
# sample derivation


def derive_arbitrator_samples(dialogue: Dialogue) -> list[ArbitratorSample]:
    """One wait/reply sample per user utterance.

    Label 1 when the next utterance is the agent's; 0 when another user
    subturn follows. A dialogue-final user utterance gets label 1: the
    conversation ended with the user expecting closure.
    """
    samples = []
    utts = dialogue.utterances
    for i, u in enumerate(utts):
        if u.role != USER:
            continue
        nxt = utts[i + 1] if i + 1 < len(utts) else None
        label = 1 if nxt is None or nxt.role == AGENT else 0
        samples.append(ArbitratorSample(history=utts[:i + 1], label=label))
    return samples


def derive_imaginator_samples(dialogue: Dialogue, role: str) -> list[ImaginatorSample]:
    """One generation sample per utterance of the role, skipping history-less ones."""
    if role not in (AGENT, USER):
        raise ValueError(f"unknown role {role!r}")
    utts = dialogue.utterances
    return [
        ImaginatorSample(history=utts[:i], target=u, role=role)
        for i, u in enumerate(utts)
        if u.role == role and i > 0
    ]


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """token <-> id with fixed reserved entries.

    ids 0..3 are PAD/UNK/BOS/EOS, 4 is the utterance separator, 5 and 6 the
    role tag symbols. Corpus tokens follow, ordered by descending frequency
    then lexicographically, so the mapping is a pure function of the corpus.
    """

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int]):
        if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.id_to_token = list(tokens)
        self.freqs = list(freqs)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode_id(self, idx: int) -> str:
        return self.id_to_token[idx]

    def hash(self) -> str:
        h = hashlib.sha256("\n".join(self.id_to_token).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        lines = [f"{t}\t{f}" for t, f in zip(self.id_to_token, self.freqs)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freqs = [], []
        for line in Path(path).read_text().splitlines():
            t, f = line.split("\t")
            tokens.append(t)
            freqs.append(int(f))
        return cls(tokens, freqs)


def build_vocabulary(dialogues: Iterable[Dialogue], min_freq: int = 1) -> Vocabulary:
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for d in dialogues:
        for u in d.utterances:
            counts.update(u.tokens)
    reserved_freqs = [counts.pop(t, 0) for t in RESERVED_TOKENS]
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    tokens = list(RESERVED_TOKENS) + kept
    freqs = reserved_freqs + [counts[t] for t in kept]
    return Vocabulary(tokens, freqs)


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class EncodedHistory:
    """Parallel int arrays, one record per token (plus separators)."""
    tokens: np.ndarray
    roles: np.ndarray
    turns: np.ndarray
    subturns: np.ndarray

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def role_id(role: str) -> int:
    return 0 if role == AGENT else 1


def encode_history(history: Sequence[Utterance], vocab: Vocabulary,
                   max_history: int = DEFAULT_MAX_HISTORY,
                   turn_cap: int = DEFAULT_TURN_CAP,
                   subturn_cap: int = DEFAULT_SUBTURN_CAP) -> EncodedHistory:
    """Flatten a history into (token, role, turn, subturn) id records.

    Utterances are joined by a separator record carrying the tags of the
    utterance it closes. Overlong histories keep the most recent max_history
    records (truncated from the oldest side); tag indices clamp to their caps.
    """
    if not history:
        raise ValueError("cannot encode an empty history")
    toks: list[int] = []
    rids: list[int] = []
    turns: list[int] = []
    subs: list[int] = []
    for k, u in enumerate(history):
        r = role_id(u.role)
        t = min(u.turn_index, turn_cap)
        s = min(u.subturn_index, subturn_cap)
        for w in u.tokens:
            toks.append(vocab.encode_token(w))
            rids.append(r)
            turns.append(t)
            subs.append(s)
        if k + 1 < len(history):
            toks.append(SEP)
            rids.append(r)
            turns.append(t)
            subs.append(s)
    if len(toks) > max_history:
        toks, rids, turns, subs = (seq[-max_history:] for seq in (toks, rids, turns, subs))
    return EncodedHistory(
        tokens=np.asarray(toks, dtype=np.int64),
        roles=np.asarray(rids, dtype=np.int64),
        turns=np.asarray(turns, dtype=np.int64),
        subturns=np.asarray(subs, dtype=np.int64),
    )


def decode_history(enc: EncodedHistory, vocab: Vocabulary) -> list[list[str]]:
    """Token text per utterance, splitting at separator records."""
    utts: list[list[str]] = [[]]
    for idx in enc.tokens.tolist():
        if idx == SEP:
            utts.append([])
        else:
            utts[-1].append(vocab.decode_id(idx))
    return utts


def encode_target(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """BOS ... EOS wrapped target ids for teacher forcing."""
    return np.asarray([BOS] + [vocab.encode_token(t) for t in tokens] + [EOS],
                      dtype=np.int64)


# ---------------------------------------------------------------------------
# statistics

STATS_ROWS = (
    "Vocabulary Size",
    "Dialogues",
    "Avg. Turns/Dialogue",
    "Avg. Split User Turns",
    "Avg. Utterance Length",
    "Avg. Agent's Utterance",
    "Avg. User's Utterance",
    "Agent Wait Samples",
    "Agent Reply Samples",
)


def compute_stats(dialogues: Sequence[Dialogue], vocab_size: int | None = None) -> dict:
    """The corpus summary table: averages over the modified corpus plus
    wait/reply sample counts."""
    n_dialogues = len(dialogues)
    turn_counts = []
    user_turn_subturns: list[int] = []
    lengths_all: list[int] = []
    lengths_agent: list[int] = []
    lengths_user: list[int] = []
    wait = reply = 0
    for d in dialogues:
        turn_counts.append(max(u.turn_index for u in d.utterances) + 1)
        per_turn: Counter[int] = Counter()
        for u in d.utterances:
            lengths_all.append(len(u.tokens))
            if u.role == AGENT:
                lengths_agent.append(len(u.tokens))
            else:
                lengths_user.append(len(u.tokens))
                per_turn[u.turn_index] += 1
        user_turn_subturns.extend(per_turn.values())
        for s in derive_arbitrator_samples(d):
            if s.label == 1:
                reply += 1
            else:
                wait += 1

    def avg(xs):
        return float(np.mean(xs)) if xs else 0.0

    stats = {
        "Dialogues": n_dialogues,
        "Avg. Turns/Dialogue": avg(turn_counts),
        "Avg. Split User Turns": avg(user_turn_subturns),
        "Avg. Utterance Length": avg(lengths_all),
        "Avg. Agent's Utterance": avg(lengths_agent),
        "Avg. User's Utterance": avg(lengths_user),
        "Agent Wait Samples": wait,
        "Agent Reply Samples": reply,
    }
    if vocab_size is not None:
        stats = {"Vocabulary Size": vocab_size, **stats}
    return stats


def render_stats(stats: dict) -> str:
    lines = []
    for key in STATS_ROWS:
        if key not in stats:
            continue
        v = stats[key]
        lines.append(f"{key}: {v}" if isinstance(v, int) else f"{key}: {v:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# processed-corpus and sample files (line-delimited JSON with a header line)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _utt_record(u: Utterance) -> dict:
    return {"role": u.role, "turn": u.turn_index, "subturn": u.subturn_index,
            "tokens": list(u.tokens)}


def _utt_from_record(rec: dict) -> Utterance:
    return Utterance(role=rec["role"], turn_index=rec["turn"],
                     subturn_index=rec["subturn"], tokens=tuple(rec["tokens"]))


def write_processed(dialogues: Iterable[Dialogue], path, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps({"header": header}) + "\n")
        for d in dialogues:
            fh.write(_dumps({"id": d.id,
                             "utterances": [_utt_record(u) for u in d.utterances]}) + "\n")


def read_processed(path):
    header = None
    dialogues = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            rec = json.loads(line)
            if n == 0:
                if "header" not in rec:
                    raise IngestError(f"{path}: missing header line")
                header = rec["header"]
                continue
            dialogues.append(Dialogue(
                id=rec["id"],
                utterances=tuple(_utt_from_record(u) for u in rec["utterances"]),
            ))
    return header, dialogues


def write_arbitrator_samples(samples: Iterable[ArbitratorSample], path, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps({"header": header}) + "\n")
        for s in samples:
            fh.write(_dumps({"history": [_utt_record(u) for u in s.history],
                             "label": s.label}) + "\n")


def read_arbitrator_samples(path):
    header, samples = None, []
    with open(path) as fh:
        for n, line in enumerate(fh):
            rec = json.loads(line)
            if n == 0:
                header = rec.get("header")
                continue
            samples.append(ArbitratorSample(
                history=tuple(_utt_from_record(u) for u in rec["history"]),
                label=int(rec["label"])))
    return header, samples


def write_imaginator_samples(samples: Iterable[ImaginatorSample], path, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps({"header": header}) + "\n")
        for s in samples:
            fh.write(_dumps({"history": [_utt_record(u) for u in s.history],
                             "target": _utt_record(s.target),
                             "role": s.role}) + "\n")


def read_imaginator_samples(path):
    header, samples = None, []
    with open(path) as fh:
        for n, line in enumerate(fh):
            rec = json.loads(line)
            if n == 0:
                header = rec.get("header")
                continue
            samples.append(ImaginatorSample(
                history=tuple(_utt_from_record(u) for u in rec["history"]),
                target=_utt_from_record(rec["target"]),
                role=rec["role"]))
    return header, samples


def split_corpus(dialogues: Sequence[Dialogue], seed: int,
                 valid_frac: float = 0.1, test_frac: float = 0.1):
    """Deterministic train/valid/test partition by shuffled dialogue order."""
    if valid_frac < 0 or test_frac < 0 or valid_frac + test_frac >= 1:
        raise ValueError("fractions must be non-negative and sum below 1")
    ordered = sorted(dialogues, key=lambda d: d.id)
    rng = _dialogue_rng(seed, "corpus-split")
    perm = rng.permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_valid = int(round(n * valid_frac))
    n_test = int(round(n * test_frac))
    n_train = n - n_valid - n_test
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_valid],
            shuffled[n_train + n_valid:])
