"""Maximum-likelihood training with a two-stage learning-rate schedule, Adam,
and the corpus metrics used for model selection (BLEU-4, ROUGE-L)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import FeatureRecord
from .decoder import DEFAULT_MAX_LEN, DecoderModel, generate_batch, teacher_forced_nll
from .vocab import Vocabulary, build_vocabulary, tokenize

__all__ = [
    "Vocabulary", "build_vocabulary", "TrainConfig", "AdamState", "adam_update",
    "train", "bleu4", "rouge_l", "encode_examples", "make_batches", "evaluate",
]

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2


@dataclass
class TrainConfig:
    lr: float = 4e-4
    stage1_epochs: int = 20
    lr2: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    max_len: int = DEFAULT_MAX_LEN
    seed: int = 0
    precision: str = "float32"
    patience: int | None = None
    clip_norm: float | None = 5.0
    eval_every: int = 1

    def __post_init__(self):
        if self.lr < 0 or self.lr2 < 0:
            raise ValueError("learning rates must be non-negative")
        for name in ("stage1_epochs", "batch_size", "max_len", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for one-based ``epoch``."""
        return self.lr if epoch <= self.stage1_epochs else self.lr2

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step, in place; returns ``params``."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# -- metrics ----------------------------------------------------------------------

def _tokens(s) -> list[str]:
    return tokenize(s) if isinstance(s, str) else [str(t) for t in s]


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence, references: Sequence[Sequence]) -> float:
    """Corpus BLEU with uniform 1-4-gram weights and brevity penalty.

    Zero n-gram match counts get an additive ``1e-9`` so short corpora do not
    hard-zero; a corpus with no unigram match scores 0.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("bleu4 needs equally many (non-zero) candidates and reference sets")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = _tokens(cand)
        refs = [_tokens(r) for r in refs]
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        hyp_len += len(cand)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(1, sum(counts.values()))
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += 0.25 * math.log((m if m else BLEU_EPSILON) / t)
    bp = 1.0 if hyp_len > ref_len else (math.exp(1 - ref_len / hyp_len) if hyp_len else 0.0)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate, references, beta: float = ROUGE_BETA) -> float:
    cand = _tokens(candidate)
    best = 0.0
    for ref in references:
        ref = _tokens(ref)
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(candidates: Sequence, references: Sequence[Sequence], beta: float = ROUGE_BETA) -> float:
    """Mean over items of the LCS F-measure, taking the best reference per item."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("rouge_l needs equally many (non-zero) candidates and reference sets")
    return float(np.mean([rouge_l_single(c, r, beta) for c, r in zip(candidates, references)]))


# -- data plumbing ----------------------------------------------------------------

@dataclass
class Examples:
    features: np.ndarray        # N_images x C_v x H x W
    image: np.ndarray           # per caption: index into features
    captions: list[list[int]]   # token ids, without <bos>/<eos>


def encode_examples(records: Sequence[FeatureRecord], vocab: Vocabulary, max_len: int,
                    dtype=np.float32) -> Examples:
    feats = np.stack([r.features for r in records]).astype(dtype)
    image, caps = [], []
    for i, rec in enumerate(records):
        for c in rec.captions:
            image.append(i)
            caps.append(vocab.encode(c, max_len))
    return Examples(feats, np.array(image), caps)


def make_batches(ex: Examples, order: np.ndarray, batch_size: int, eos: int, bos: int):
    """Yield ``(V, inputs, targets, weights)`` with zero-weight padding."""
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        seqs = [ex.captions[i] for i in idx]
        t = max(len(s) for s in seqs) + 1
        inputs = np.full((len(idx), t), eos)
        targets = np.full((len(idx), t), eos)
        weights = np.zeros((len(idx), t), dtype=ex.features.dtype)
        for b, s in enumerate(seqs):
            inputs[b, :len(s) + 1] = [bos] + s
            targets[b, :len(s) + 1] = s + [eos]
            weights[b, :len(s) + 1] = 1
        yield ex.features[ex.image[idx]], inputs, targets, weights


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        k = max_norm / norm
        for g in grads.values():
            g *= k
    return norm


def evaluate(model: DecoderModel, records: Sequence[FeatureRecord], max_len: int = DEFAULT_MAX_LEN,
             batch_size: int = 256) -> dict:
    """Greedy-decode ``records`` and score against their reference captions."""
    cands, refs = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        V = np.stack([r.features for r in chunk])
        caps, _ = generate_batch(model, V, max_len, with_traces=False)
        cands.extend(model.vocab.decode(c).split() for c in caps)
        refs.extend([[model.vocab.token_of(i) for i in model.vocab.encode(c, max_len)]
                     for c in r.captions] for r in chunk)
    return {"bleu4": bleu4(cands, refs), "rouge_l": rouge_l(cands, refs),
            "captions": [" ".join(c) for c in cands]}


def train(model: DecoderModel, corpus: Sequence[FeatureRecord], config: TrainConfig,
          validation: Sequence[FeatureRecord] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[DecoderModel, list[dict]]:
    """Teacher-forced NLL minimisation over shuffled minibatches.

    Epochs up to ``stage1_epochs`` use ``lr``; later epochs use ``lr2``.
    With ``validation`` the returned model is the best-BLEU-4 epoch, and
    ``patience`` stops after that many evaluations without improvement.
    """
    dtype = np.dtype(config.precision)
    model = model.astype(dtype)
    params = model.params
    vocab = model.vocab
    ex = encode_examples(corpus, vocab, config.max_len, dtype)
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    log: list[dict] = []
    best_score, best_params, stale = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = np.arange(len(ex.captions))
        rng.shuffle(order)
        nll_sum = tok_sum = 0.0
        for V, inputs, targets, weights in make_batches(ex, order, config.batch_size, vocab.eos, vocab.bos):
            n_tok = float(weights.sum())
            tape = ad.Tape()
            P = {k: tape.param(k, v) for k, v in params.items()}
            nll = teacher_forced_nll(model.config, P, V, inputs, targets, weights)
            loss = ad.scale(nll, 1.0 / n_tok)
            grads = tape.backward(loss)
            _clip(grads, config.clip_norm)
            adam_update(params, grads, adam, lr)
            nll_sum += float(ad.value(nll))
            tok_sum += n_tok
        entry = {"epoch": epoch, "lr": lr, "train_nll": nll_sum / tok_sum}
        if validation is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            scores = evaluate(model, validation, config.max_len)
            entry["val_bleu4"] = scores["bleu4"]
            entry["val_rouge_l"] = scores["rouge_l"]
            if scores["bleu4"] > best_score:
                best_score, stale = scores["bleu4"], 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if config.patience is not None and stale >= config.patience:
            break
    if best_params is not None:
        model = DecoderModel(model.config, vocab, model.feature_shape, best_params)
    return model, log


def per_token_nll(model: DecoderModel, records: Sequence[FeatureRecord], max_len: int = DEFAULT_MAX_LEN) -> float:
    ex = encode_examples(records, model.vocab, max_len, model.dtype)
    total = toks = 0.0
    order = np.arange(len(ex.captions))
    for V, inputs, targets, weights in make_batches(ex, order, 256, model.vocab.eos, model.vocab.bos):
        total += float(teacher_forced_nll(model.config, model.params, V, inputs, targets, weights))
        toks += float(weights.sum())
    return total / toks
