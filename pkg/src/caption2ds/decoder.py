"""Caption decoding loop, generation modes and state interventions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cells
from .cells import CellConfig
from .tensor import ConfigError, check_region, log_softmax, softmax
from .vocab import Vocabulary

DEFAULT_MAX_LEN = 18


class UnsupportedIntervention(ValueError):
    pass


@dataclass(frozen=True)
class Intervention:
    """Optional edits applied at every decoding step.

    ``region`` restricts pooling to a one-based inclusive ``(x1, y1, x2, y2)``
    window of the state map. ``deactivate`` clamps one state channel to zero
    after each cell update.
    """

    region: tuple[int, int, int, int] | None = None
    deactivate: int | None = None


@dataclass
class DecoderModel:
    config: CellConfig
    vocab: Vocabulary
    feature_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.feature_shape = tuple(int(s) for s in self.feature_shape)
        w = self.params["out.weight"]
        if w.shape != (len(self.vocab), self.config.channels):
            raise ConfigError(
                f"output projection {w.shape} does not match vocabulary {len(self.vocab)} "
                f"and pooled length {self.config.channels}")

    @classmethod
    def create(cls, config: CellConfig, vocab: Vocabulary, feature_shape, seed: int = 0,
               dtype=np.float32) -> "DecoderModel":
        params = cells.init_params(config, len(vocab), feature_shape, seed, dtype)
        return cls(config, vocab, tuple(feature_shape), params)

    @property
    def dtype(self):
        return self.params["out.weight"].dtype

    def astype(self, dtype) -> "DecoderModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return DecoderModel(self.config, self.vocab, self.feature_shape, params)

    def count_parameters(self) -> dict[str, int]:
        return cells.count_parameters(self.config, len(self.vocab), self.feature_shape)


@dataclass
class DecodeTrace:
    """Per-step record of one decoding run. Step ``t`` is index ``t-1``."""

    states: list[np.ndarray] = field(default_factory=list)
    pooled: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    features: np.ndarray | None = None
    reason: str = ""

    def __len__(self):
        return len(self.tokens)

    def caption_ids(self, eos: int) -> list[int]:
        return [t for t in self.tokens if t != eos]

    def state_array(self) -> np.ndarray:
        return np.stack(self.states)

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "reason": self.reason,
            "states": [s.tolist() for s in self.states],
            "pooled": [p.tolist() for p in self.pooled],
        }


# -- shared forward machinery ---------------------------------------------------

def _check_intervention(cfg: CellConfig, intervention: Intervention | None):
    if intervention is None:
        return
    if intervention.deactivate is not None:
        if not cfg.is_2d:
            raise UnsupportedIntervention("channel deactivation needs a 2D-state decoder")
        if not 0 <= intervention.deactivate < cfg.state[0]:
            raise UnsupportedIntervention(
                f"channel {intervention.deactivate} out of range for {cfg.state[0]} channels")
    if intervention.region is not None:
        if not cfg.is_2d:
            raise UnsupportedIntervention("region pooling needs a 2D-state decoder")
        check_region(intervention.region, cfg.state[1], cfg.state[2])


def _batch_features(model: DecoderModel, V) -> np.ndarray:
    V = np.asarray(V, dtype=model.dtype)
    if V.shape == model.feature_shape:
        V = V[None]
    if V.shape[1:] != model.feature_shape:
        raise ConfigError(f"feature shape {V.shape[1:]} does not match model {model.feature_shape}")
    return V


class _Runner:
    """Precomputes word and visual contributions, then advances the recurrence."""

    def __init__(self, cfg: CellConfig, params, V, intervention: Intervention | None = None):
        self.cfg = cfg
        self.params = params
        self.intervention = intervention or Intervention()
        if cfg.is_2d:
            emb = cells.embed_map(params, params["embed.table"], cfg.state[1:])
        else:
            emb = params["embed.table"]
        self.x_all = cells.source_terms(cfg, params, "x", emb)
        vs = cells.shape_visual(cfg, params, V)
        self.v_terms = cells.source_terms(cfg, params, "v", vs, with_bias=True)
        self.mask = None
        if self.intervention.deactivate is not None:
            dtype = ad.value(params["out.weight"]).dtype
            mask = np.ones((cfg.state[0], 1, 1), dtype=dtype)
            mask[self.intervention.deactivate] = 0
            self.mask = mask

    def step(self, state, prev_ids):
        x_terms = {g: ad.take_rows(t, prev_ids) for g, t in self.x_all.items()}
        state = cells.cell_step(self.cfg, self.params, state, x_terms=x_terms, v_terms=self.v_terms)
        lstm = self.cfg.family == "lstm"
        h = state[0] if lstm else state
        if self.mask is not None:
            h = ad.mul(h, self.mask)
            state = (h, state[1]) if lstm else h
        if self.cfg.is_2d:
            pool = ad.mean_pool if self.cfg.pooling == "mean" else ad.max_pool
            pooled = pool(h, self.intervention.region)
        else:
            pooled = h
        logits = ad.linear(self.params["out.weight"], pooled, self.params["out.bias"])
        return state, h, pooled, logits


def teacher_forced_nll(cfg: CellConfig, params, V, inputs, targets, weights):
    """Summed ``-log p`` of ``targets`` under teacher forcing.

    ``inputs``/``targets``/``weights`` are ``B×T``; a zero weight masks padding.
    """
    inputs = np.asarray(inputs)
    runner = _Runner(cfg, params, V)
    dtype = ad.value(params["out.weight"]).dtype
    state = cells.zero_state(cfg, inputs.shape[0], dtype)
    terms = []
    for t in range(inputs.shape[1]):
        state, _, _, logits = runner.step(state, inputs[:, t])
        terms.append(ad.cross_entropy(logits, targets[:, t], weights[:, t]))
    return ad.add_n(*terms)


def decode_step(model: DecoderModel, state, prev_token: int, V, intervention: Intervention | None = None):
    """Advance one step from ``state``; returns ``(new_state, probabilities)``.

    ``state`` may be ``None`` for the zero initial state.
    """
    if not 0 <= prev_token < len(model.vocab):
        raise IndexError(f"token id {prev_token} outside vocabulary of size {len(model.vocab)}")
    _check_intervention(model.config, intervention)
    Vb = _batch_features(model, V)
    runner = _Runner(model.config, model.params, Vb, intervention)
    if state is None:
        state = cells.zero_state(model.config, 1, model.dtype)
    elif model.config.family == "lstm":
        state = (state[0][None], state[1][None])
    else:
        state = state[None]
    state, _, _, logits = runner.step(state, np.array([prev_token]))
    unbatched = (state[0][0], state[1][0]) if model.config.family == "lstm" else state[0]
    return unbatched, softmax(logits[0])


def log_likelihood(model: DecoderModel, V, caption_ids) -> float:
    """``sum_t log p(w_t | w_<t, V)`` under teacher forcing, starting from ``<bos>``."""
    ids = [int(i) for i in caption_ids]
    if not ids:
        raise ValueError("caption must contain at least one token")
    if min(ids) < 0 or max(ids) >= len(model.vocab):
        raise IndexError("caption token outside vocabulary")
    inputs = np.array([[model.vocab.bos] + ids[:-1]])
    targets = np.array([ids])
    weights = np.ones_like(targets, dtype=model.dtype)
    Vb = _batch_features(model, V)
    return -float(teacher_forced_nll(model.config, model.params, Vb, inputs, targets, weights))


# -- generation -----------------------------------------------------------------

def generate_batch(model: DecoderModel, V, max_len: int = DEFAULT_MAX_LEN,
                   intervention: Intervention | None = None, with_traces: bool = True):
    """Greedy decoding for a batch of feature maps; lowest id wins ties.

    Returns ``(captions, traces)``; captions exclude ``<eos>``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    _check_intervention(model.config, intervention)
    Vb = _batch_features(model, V)
    n = Vb.shape[0]
    runner = _Runner(model.config, model.params, Vb, intervention)
    state = cells.zero_state(model.config, n, model.dtype)
    prev = np.full(n, model.vocab.bos)
    done = np.zeros(n, dtype=bool)
    steps = []
    for _ in range(max_len):
        state, h, pooled, logits = runner.step(state, prev)
        prev = logits.argmax(axis=-1)
        steps.append((h, pooled, logits, prev.copy(), done.copy()))
        done |= prev == model.vocab.eos
        if done.all():
            break
    captions, traces = [], []
    for b in range(n):
        trace = DecodeTrace(features=Vb[b] if with_traces else None)
        for h, pooled, logits, tok, was_done in steps:
            if was_done[b]:
                break
            trace.tokens.append(int(tok[b]))
            if with_traces:
                trace.states.append(h[b].copy())
                trace.pooled.append(pooled[b].copy())
                trace.logits.append(logits[b].copy())
        trace.reason = "eos" if trace.tokens and trace.tokens[-1] == model.vocab.eos else "max_length"
        captions.append(trace.caption_ids(model.vocab.eos))
        traces.append(trace)
    return captions, traces


def replay(model: DecoderModel, V, tokens, intervention: Intervention | None = None) -> DecodeTrace:
    """Trace of feeding ``tokens`` back through the decoder (teacher forcing)."""
    Vb = _batch_features(model, V)
    runner = _Runner(model.config, model.params, Vb, intervention)
    state = cells.zero_state(model.config, 1, model.dtype)
    prev = model.vocab.bos
    trace = DecodeTrace(features=Vb[0])
    for tok in tokens:
        state, h, pooled, logits = runner.step(state, np.array([prev]))
        trace.states.append(h[0].copy())
        trace.pooled.append(pooled[0].copy())
        trace.logits.append(logits[0].copy())
        trace.tokens.append(int(tok))
        prev = int(tok)
    return trace


def _sample(model, V, max_len, seed, intervention):
    rng = np.random.default_rng(seed)
    Vb = _batch_features(model, V)
    runner = _Runner(model.config, model.params, Vb, intervention)
    state = cells.zero_state(model.config, 1, model.dtype)
    prev = model.vocab.bos
    tokens = []
    for _ in range(max_len):
        state, _, _, logits = runner.step(state, np.array([prev]))
        probs = softmax(logits[0].astype(np.float64))
        prev = int(rng.choice(len(probs), p=probs))
        tokens.append(prev)
        if prev == model.vocab.eos:
            break
    return tokens


def _beam(model, V, max_len, width, intervention):
    if width < 1:
        raise ValueError("beam width must be >= 1")
    Vb = _batch_features(model, V)
    runner = _Runner(model.config, model.params, Vb, intervention)
    eos = model.vocab.eos
    beams = [(0.0, [], cells.zero_state(model.config, 1, model.dtype))]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        scores, src, tok, states = [], [], [], []
        for i, (score, toks, state) in enumerate(beams):
            prev = toks[-1] if toks else model.vocab.bos
            state, _, _, logits = runner.step(state, np.array([prev]))
            logp = log_softmax(logits[0].astype(np.float64))
            states.append(state)
            scores.append(score + logp)
            src.append(np.full(len(logp), i))
            tok.append(np.arange(len(logp)))
        scores, src, tok = np.concatenate(scores), np.concatenate(src), np.concatenate(tok)
        # best score first; ties go to the earlier beam, then the lower token id
        order = np.lexsort((tok, src, -scores))[:width]
        survivors = []
        for k in order:
            seq = beams[src[k]][1] + [int(tok[k])]
            if tok[k] == eos:
                finished.append((float(scores[k]), seq))
            else:
                survivors.append((float(scores[k]), seq, states[src[k]]))
        beams = survivors
        if len(finished) >= width or not beams:
            break
    pool = finished + [(s, seq) for s, seq, _ in beams]
    best = max(range(len(pool)), key=lambda i: (pool[i][0], -i))
    return pool[best][1]


def generate(model: DecoderModel, V, mode: str = "greedy", max_len: int = DEFAULT_MAX_LEN,
             seed: int = 0, width: int = 3, intervention: Intervention | None = None):
    """Caption one feature map. ``mode`` is ``greedy``, ``sample`` or ``beam``.

    Returns ``(caption_ids, trace)``; the caption excludes ``<eos>``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    _check_intervention(model.config, intervention)
    if mode == "greedy":
        captions, traces = generate_batch(model, V, max_len, intervention)
        return captions[0], traces[0]
    if mode == "sample":
        tokens = _sample(model, V, max_len, seed, intervention)
    elif mode == "beam":
        tokens = _beam(model, V, max_len, width, intervention)
    else:
        raise ConfigError(f"unknown decoding mode {mode!r}")
    trace = replay(model, V, tokens, intervention)
    trace.reason = "eos" if tokens and tokens[-1] == model.vocab.eos else "max_length"
    return trace.caption_ids(model.vocab.eos), trace


def generate_with_region(model: DecoderModel, V, region, **kwargs):
    return generate(model, V, intervention=Intervention(region=tuple(region)), **kwargs)[0]


def generate_with_channel_deactivated(model: DecoderModel, V, channel: int, **kwargs):
    return generate(model, V, intervention=Intervention(deactivate=int(channel)), **kwargs)[0]
