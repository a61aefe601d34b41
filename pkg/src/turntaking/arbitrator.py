"""The wait/reply decision head.

Given a dialogue history ending in a user message, the arbitrator encodes
three texts with one shared sentence encoder (TextCNN or Bi-GRU): the
history itself, the agent imaginator's predicted reply, and the user
imaginator's predicted continuation. Two affine fusion layers score the two
possible dialogue paths and a linear classifier turns them into a
reply/wait distribution. A history-only baseline mode keeps the same
encoder but classifies directly, with no imagined futures.

Label 1 selects the agent path (reply now); 0 selects the user path (keep
waiting). Ties break toward 1 so a perfectly undecided agent stays live.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import (
    AGENT, EOS, PAD, USER,
    DEFAULT_MAX_HISTORY, DEFAULT_SUBTURN_CAP, DEFAULT_TURN_CAP,
    ArbitratorSample, EncodedHistory, Utterance, Vocabulary,
    encode_history, role_id,
)
from .imaginator import ImaginatorModel, beam_decode, greedy_decode

DEFAULT_FILTER_WIDTHS = (3, 4, 5)
DEFAULT_FILTERS_PER_WIDTH = 100


class ArbitratorModel:
    """Shared text encoder plus either path-fusion (ita) or a direct head."""

    def __init__(self, vocab_size: int, encoder: str = "textcnn", mode: str = "ita",
                 token_dim: int = 100, tag_dim: int = 8,
                 filter_widths: Sequence[int] = DEFAULT_FILTER_WIDTHS,
                 filters_per_width: int = DEFAULT_FILTERS_PER_WIDTH,
                 gru_hidden: int = 128,
                 turn_cap: int = DEFAULT_TURN_CAP, subturn_cap: int = DEFAULT_SUBTURN_CAP,
                 max_history: int = DEFAULT_MAX_HISTORY, seed: int = 0):
        if encoder not in ("textcnn", "bigru"):
            raise ValueError(f"unknown encoder {encoder!r}")
        if mode not in ("ita", "baseline"):
            raise ValueError(f"unknown mode {mode!r}")
        self.vocab_size = vocab_size
        self.encoder = encoder
        self.mode = mode
        self.token_dim = token_dim
        self.tag_dim = tag_dim
        self.filter_widths = tuple(sorted(filter_widths))
        self.filters_per_width = filters_per_width
        self.gru_hidden = gru_hidden
        self.turn_cap = turn_cap
        self.subturn_cap = subturn_cap
        self.max_history = max_history
        self.seed = seed

        d_total = token_dim + 3 * tag_dim
        p = ad.ParamSet(seed=seed)
        p.new("emb.token", (vocab_size, token_dim), fan_in=token_dim)
        p.new("emb.role", (2, tag_dim), fan_in=tag_dim)
        p.new("emb.turn", (turn_cap + 1, tag_dim), fan_in=tag_dim)
        p.new("emb.subturn", (subturn_cap + 1, tag_dim), fan_in=tag_dim)
        if encoder == "textcnn":
            for k in self.filter_widths:
                p.new(f"cnn.W_{k}", (k * d_total, filters_per_width), fan_in=k * d_total)
                p.new(f"cnn.b_{k}", (filters_per_width,), fan_in=k * d_total)
            feat = filters_per_width * len(self.filter_widths)
        else:
            for direction in ("gru_f", "gru_b"):
                for g in ("r", "z", "n"):
                    p.new(f"{direction}.W_{g}", (d_total, gru_hidden), fan_in=d_total)
                    p.new(f"{direction}.U_{g}", (gru_hidden, gru_hidden), fan_in=gru_hidden)
                    p.new(f"{direction}.b_{g}", (gru_hidden,), fan_in=gru_hidden)
            feat = 2 * gru_hidden
        self.feature_dim = feat
        if mode == "ita":
            p.new("fuse.W_1", (2 * feat, feat), fan_in=2 * feat)
            p.new("fuse.b_1", (feat,), fan_in=2 * feat)
            p.new("fuse.W_2", (2 * feat, feat), fan_in=2 * feat)
            p.new("fuse.b_2", (feat,), fan_in=2 * feat)
            p.new("fuse.W_3", (2 * feat, feat), fan_in=2 * feat)
            p.new("fuse.b_3", (feat,), fan_in=2 * feat)
            p.new("fuse.W_4", (feat, 2), fan_in=feat)
            p.new("fuse.b_4", (2,), fan_in=feat)
        else:
            p.new("head.W", (feat, 2), fan_in=feat)
            p.new("head.b", (2,), fan_in=feat)
        self.params = p

    def config(self) -> dict:
        return {
            "kind": "arbitrator",
            "vocab_size": self.vocab_size,
            "encoder": self.encoder,
            "mode": self.mode,
            "token_dim": self.token_dim,
            "tag_dim": self.tag_dim,
            "filter_widths": list(self.filter_widths),
            "filters_per_width": self.filters_per_width,
            "gru_hidden": self.gru_hidden,
            "turn_cap": self.turn_cap,
            "subturn_cap": self.subturn_cap,
            "max_history": self.max_history,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ArbitratorModel":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        return cls(**cfg)


@dataclass(frozen=True)
class Decision:
    label: int
    probs: np.ndarray  # [p_wait, p_reply], sums to 1
    imagined_agent: tuple[str, ...] = ()
    imagined_user: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("decision probabilities must sum to 1")
        if self.label != _argmax_label(self.probs):
            raise ValueError("label must be the argmax of the probabilities")


def _argmax_label(probs: np.ndarray) -> int:
    # ties go to 1: reply wins when perfectly undecided
    return 1 if probs[1] >= probs[0] else 0


# ---------------------------------------------------------------------------
# encoders


def _embed_records(model: ArbitratorModel, enc: EncodedHistory) -> ad.Tensor:
    return ad.concat_cols([
        ad.rows(model.params["emb.token"], enc.tokens),
        ad.rows(model.params["emb.role"], enc.roles),
        ad.rows(model.params["emb.turn"], enc.turns),
        ad.rows(model.params["emb.subturn"], enc.subturns),
    ])


def _normalize_for_cnn(enc: EncodedHistory, min_len: int) -> EncodedHistory:
    """Strip trailing PAD records, then pad back up to the widest filter.

    Extra trailing padding therefore never changes the window set, which is
    what makes the encoder output pad-invariant.
    """
    real = np.nonzero(enc.tokens != PAD)[0]
    if real.size == 0:
        raise ValueError("cannot encode an all-padding text")
    L = int(real[-1]) + 1
    L_eff = max(L, min_len)

    def fit(a: np.ndarray) -> np.ndarray:
        out = np.zeros(L_eff, dtype=np.int64)
        out[:L] = a[:L]
        return out

    toks = np.full(L_eff, PAD, dtype=np.int64)
    toks[:L] = enc.tokens[:L]
    return EncodedHistory(tokens=toks, roles=fit(enc.roles),
                          turns=fit(enc.turns), subturns=fit(enc.subturns))


def textcnn_encode(model: ArbitratorModel, enc: EncodedHistory) -> ad.Tensor:
    """Multi-width convolution, ReLU, max-over-time; output [1, total filters]."""
    if len(enc) == 0:
        raise ValueError("cannot encode an empty text")
    enc = _normalize_for_cnn(enc, max(model.filter_widths))
    emb = _embed_records(model, enc)
    feats = []
    for k in model.filter_widths:
        windows = ad.unfold_rows(emb, k)
        fmap = ad.relu(ad.add_bias(ad.matmul(windows, model.params[f"cnn.W_{k}"]),
                                   model.params[f"cnn.b_{k}"]))
        pooled = ad.max_over_time(fmap)
        feats.append(ad.reshape(pooled, (1, model.filters_per_width)))
    return ad.concat_cols(feats)


def gru_step(x: ad.Tensor, h_prev: ad.Tensor, params: ad.ParamSet, prefix: str) -> ad.Tensor:
    """Gated recurrent unit: h' = z*h_prev + (1-z)*n with reset-gated candidate."""
    def lin(g, inp):
        return ad.add_bias(ad.add(ad.matmul(x, params[f"{prefix}.W_{g}"]),
                                  ad.matmul(inp, params[f"{prefix}.U_{g}"])),
                           params[f"{prefix}.b_{g}"])

    r = ad.sigmoid(lin("r", h_prev))
    z = ad.sigmoid(lin("z", h_prev))
    n = ad.tanh(ad.add_bias(ad.add(ad.matmul(x, params[f"{prefix}.W_n"]),
                                   ad.matmul(ad.mul(r, h_prev), params[f"{prefix}.U_n"])),
                            params[f"{prefix}.b_n"]))
    one_minus_z = ad.add(ad.neg(z), 1.0)
    return ad.add(ad.mul(z, h_prev), ad.mul(one_minus_z, n))


def bigru_encode(model: ArbitratorModel, enc: EncodedHistory) -> ad.Tensor:
    """Final forward state concatenated with final backward state: [1, 2h]."""
    L = len(enc)
    if L == 0:
        raise ValueError("cannot encode an empty text")
    emb = _embed_records(model, enc)
    h_f = ad.constant(np.zeros((1, model.gru_hidden)))
    for t in range(L):
        h_f = gru_step(ad.rows(emb, [t]), h_f, model.params, "gru_f")
    h_b = ad.constant(np.zeros((1, model.gru_hidden)))
    for t in reversed(range(L)):
        h_b = gru_step(ad.rows(emb, [t]), h_b, model.params, "gru_b")
    return ad.concat_cols([h_f, h_b])


def encode_text(model: ArbitratorModel, enc: EncodedHistory) -> ad.Tensor:
    if model.encoder == "textcnn":
        return textcnn_encode(model, enc)
    return bigru_encode(model, enc)


# ---------------------------------------------------------------------------
# heads


def fuse_paths(c_his: ad.Tensor, c_agent: ad.Tensor, c_user: ad.Tensor,
               model: ArbitratorModel) -> ad.Tensor:
    """Score the two dialogue paths and classify; purely affine before the
    final softmax (three stacked linear maps, deliberately no activation)."""
    p = model.params
    d_agent = ad.add_bias(ad.matmul(ad.concat_cols([c_his, c_agent]), p["fuse.W_1"]),
                          p["fuse.b_1"])
    d_user = ad.add_bias(ad.matmul(ad.concat_cols([c_his, c_user]), p["fuse.W_2"]),
                         p["fuse.b_2"])
    d = ad.add_bias(ad.matmul(ad.concat_cols([d_agent, d_user]), p["fuse.W_3"]),
                    p["fuse.b_3"])
    return ad.softmax(ad.add_bias(ad.matmul(d, p["fuse.W_4"]), p["fuse.b_4"]))


def _baseline_probs(model: ArbitratorModel, c_his: ad.Tensor) -> ad.Tensor:
    return ad.softmax(ad.add_bias(ad.matmul(c_his, model.params["head.W"]),
                                  model.params["head.b"]))


def encode_response_ids(ids: Sequence[int], role: str) -> EncodedHistory:
    """Wrap generated token ids as arbitrator input: role tag only, tags 0."""
    n = len(ids)
    return EncodedHistory(tokens=np.asarray(ids, dtype=np.int64),
                          roles=np.full(n, role_id(role), dtype=np.int64),
                          turns=np.zeros(n, dtype=np.int64),
                          subturns=np.zeros(n, dtype=np.int64))


def _history_enc(model: ArbitratorModel, history: Sequence[Utterance],
                 vocab: Vocabulary) -> EncodedHistory:
    if not history or history[-1].role != USER:
        raise ValueError("history must end with a user utterance")
    return encode_history(history, vocab, model.max_history,
                          model.turn_cap, model.subturn_cap)


def decide_with_imagined(model: ArbitratorModel, history_enc: EncodedHistory,
                         agent_ids: Sequence[int], user_ids: Sequence[int],
                         vocab: Vocabulary | None = None) -> Decision:
    """ITA decision from already-generated responses (token ids only).

    Empty generations are replaced by a single EOS token and flagged.
    """
    if model.mode != "ita":
        raise ValueError("decide_with_imagined needs a model in ita mode")
    flags = []
    if len(agent_ids) == 0:
        agent_ids = [EOS]
        flags.append("empty_agent_generation")
    if len(user_ids) == 0:
        user_ids = [EOS]
        flags.append("empty_user_generation")
    c_his = encode_text(model, history_enc)
    c_agent = encode_text(model, encode_response_ids(agent_ids, AGENT))
    c_user = encode_text(model, encode_response_ids(user_ids, USER))
    probs = fuse_paths(c_his, c_agent, c_user, model).data[0].copy()
    to_text = (lambda ids: tuple(vocab.decode_id(i) for i in ids)) if vocab else tuple
    return Decision(label=_argmax_label(probs), probs=probs,
                    imagined_agent=to_text(agent_ids),
                    imagined_user=to_text(user_ids),
                    flags=tuple(flags))


def ita_predict(history: Sequence[Utterance], model: ArbitratorModel,
                agent_imaginator: ImaginatorModel, user_imaginator: ImaginatorModel,
                vocab: Vocabulary, beam_width: int = 4, max_len: int = 40) -> Decision:
    """Imagine both continuations, then arbitrate between the two paths."""
    h_enc = _history_enc(model, history, vocab)
    agent_ids = beam_decode(agent_imaginator, h_enc, beam_width=beam_width, max_len=max_len)
    user_ids = beam_decode(user_imaginator, h_enc, beam_width=beam_width, max_len=max_len)
    return decide_with_imagined(model, h_enc, agent_ids, user_ids, vocab)


def baseline_predict(history: Sequence[Utterance], model: ArbitratorModel,
                     vocab: Vocabulary) -> Decision:
    """History-only classification; imagined fields stay empty."""
    if model.mode != "baseline":
        raise ValueError("baseline_predict needs a model in baseline mode")
    c_his = encode_text(model, _history_enc(model, history, vocab))
    probs = _baseline_probs(model, c_his).data[0].copy()
    return Decision(label=_argmax_label(probs), probs=probs)


def accuracy(predictions: Sequence[int], gold: Sequence[int]) -> float:
    """Exact-match fraction."""
    if len(predictions) == 0 or len(predictions) != len(gold):
        raise ValueError("need equal-length non-empty prediction and gold lists")
    return sum(int(p == g) for p, g in zip(predictions, gold)) / len(gold)


def random_policy_predictions(n: int, seed: int = 0) -> list[int]:
    """Uniform coin-flip wait/reply policy, the no-model reference point."""
    if n < 1:
        raise ValueError("need at least one prediction")
    rng = np.random.default_rng(seed)
    return [int(b) for b in rng.integers(0, 2, size=n)]


def classification_summary(predictions: Sequence[int], gold: Sequence[int]) -> dict:
    """Accuracy plus per-class precision/recall and confusion counts.

    Classes are 0 (wait) and 1 (reply); undefined ratios report as 0.0.
    """
    acc = accuracy(predictions, gold)
    counts = {(p, g): 0 for p in (0, 1) for g in (0, 1)}
    for p, g in zip(predictions, gold):
        counts[(p, g)] += 1
    summary = {"accuracy": acc, "total": len(gold)}
    for c in (0, 1):
        tp = counts[(c, c)]
        predicted = counts[(c, 0)] + counts[(c, 1)]
        actual = counts[(0, c)] + counts[(1, c)]
        summary[f"precision_{c}"] = tp / predicted if predicted else 0.0
        summary[f"recall_{c}"] = tp / actual if actual else 0.0
    for (p, g), n in sorted(counts.items()):
        summary[f"confusion_pred{p}_gold{g}"] = n
    return summary


def decision_record(sample_id: str, decision: Decision) -> dict:
    """Line-record form of a Decision for JSONL emission."""
    return {
        "sample_id": sample_id,
        "label": decision.label,
        "p_wait": float(decision.probs[0]),
        "p_reply": float(decision.probs[1]),
        "imagined_agent": " ".join(decision.imagined_agent),
        "imagined_user": " ".join(decision.imagined_user),
        "flags": list(decision.flags),
    }


# ---------------------------------------------------------------------------
# training plumbing


@dataclass
class PreparedSample:
    """Everything the arbitrator needs about one sample, generation included."""
    history_enc: EncodedHistory
    label: int
    agent_ids: list[int] = field(default_factory=list)
    user_ids: list[int] = field(default_factory=list)


def prepare_samples(samples: Sequence[ArbitratorSample], model: ArbitratorModel,
                    vocab: Vocabulary,
                    imaginators: tuple[ImaginatorModel, ImaginatorModel] | None,
                    max_len: int = 40) -> list[PreparedSample]:
    """Encode histories and, in ita mode, cache greedy imaginator decodes.

    The imaginators are frozen during arbitrator training, so each history's
    imagined responses are computed exactly once here.
    """
    prepared = []
    for s in samples:
        h_enc = _history_enc(model, s.history, vocab)
        ps = PreparedSample(history_enc=h_enc, label=s.label)
        if imaginators is not None:
            agent_im, user_im = imaginators
            ps.agent_ids = greedy_decode(agent_im, h_enc, max_len=max_len) or [EOS]
            ps.user_ids = greedy_decode(user_im, h_enc, max_len=max_len) or [EOS]
        prepared.append(ps)
    return prepared


def _sample_probs(model: ArbitratorModel, ps: PreparedSample) -> ad.Tensor:
    c_his = encode_text(model, ps.history_enc)
    if model.mode == "ita":
        c_agent = encode_text(model, encode_response_ids(ps.agent_ids, AGENT))
        c_user = encode_text(model, encode_response_ids(ps.user_ids, USER))
        return fuse_paths(c_his, c_agent, c_user, model)
    return _baseline_probs(model, c_his)


def batch_loss(model: ArbitratorModel, batch: Sequence[PreparedSample]) -> ad.Tensor:
    """Mean NLL of the gold wait/reply labels over the batch."""
    total = None
    for ps in batch:
        nll = ad.nll_loss(_sample_probs(model, ps), [ps.label])
        total = nll if total is None else ad.add(total, nll)
    return ad.scale(total, 1.0 / len(batch))


def train_step(batch: Sequence[PreparedSample], model: ArbitratorModel,
               opt: ad.Adam) -> float:
    loss = batch_loss(model, batch)
    if not loss.is_finite():
        raise ad.TrainingError("arbitrator loss is not finite")
    ad.backward(loss)
    opt.step()
    return loss.item()


def predict_prepared(model: ArbitratorModel, ps: PreparedSample) -> int:
    return _argmax_label(_sample_probs(model, ps).data[0])


def evaluate_prepared(model: ArbitratorModel, prepared: Sequence[PreparedSample]) -> float:
    return accuracy([predict_prepared(model, ps) for ps in prepared],
                    [ps.label for ps in prepared])


def train_arbitrator(train_samples: Sequence[ArbitratorSample],
                     valid_samples: Sequence[ArbitratorSample],
                     model: ArbitratorModel, vocab: Vocabulary, config,
                     imaginators=None, metrics_path=None, checkpoint_path=None):
    """Full training loop; see training.run_training for the mechanics."""
    from .training import run_training
    return run_training(config, train_samples, valid_samples, model, vocab,
                        imaginators=imaginators, metrics_path=metrics_path,
                        checkpoint_path=checkpoint_path)
