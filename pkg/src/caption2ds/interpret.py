"""Interpretation of 2D latent states: activation levels, word-channel
association, activated regions and attention correctness."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import DecodeTrace
from .tensor import bicubic_resize

DEFAULT_LAMBDA = 0.2
# stride of a res5c-style feature map relative to its input image
IMAGE_STRIDE = 32


class EmptySupportError(ValueError):
    def __init__(self, word: str):
        super().__init__(f"word {word!r} does not occur in any generated caption")
        self.word = word


class UndefinedScoreError(ValueError):
    pass


def _channel(trace: DecodeTrace, channel: int, step: int) -> np.ndarray:
    """Channel map at one-based ``step``."""
    if not 1 <= step <= len(trace.states):
        raise IndexError(f"step {step} outside trace of length {len(trace.states)}")
    state = trace.states[step - 1]
    if state.ndim != 3:
        raise ValueError("channel analysis needs a 2D-state trace")
    if not 0 <= channel < state.shape[0]:
        raise IndexError(f"channel {channel} outside 0..{state.shape[0] - 1}")
    return state[channel]


def activation_level(channel_map) -> float:
    """Sum of the entries of one ``H×W`` channel map."""
    return float(np.sum(np.asarray(channel_map, dtype=np.float64)))


def activation_levels(trace: DecodeTrace) -> np.ndarray:
    """``T×C`` matrix of activation levels for every step and channel."""
    states = np.stack(trace.states).astype(np.float64)
    if states.ndim != 4:
        raise ValueError("channel analysis needs a 2D-state trace")
    return states.sum(axis=(2, 3))


def window_average(trace: DecodeTrace, channel: int, t1: int, t2: int) -> float:
    """Mean activation level of ``channel`` over one-based steps ``t1..t2``."""
    if not 1 <= t1 <= t2 <= len(trace.states):
        raise IndexError(f"window ({t1}, {t2}) invalid for trace of length {len(trace.states)}")
    return float(np.mean([activation_level(_channel(trace, channel, t)) for t in range(t1, t2 + 1)]))


def _caption_length(trace: DecodeTrace, eos: int) -> int:
    return len(trace.tokens) - (1 if trace.tokens and trace.tokens[-1] == eos else 0)


def _difference(eta: np.ndarray, t_w: int, t_end: int) -> np.ndarray:
    before = eta[:t_w].mean(axis=0)
    # a word emitted last leaves an empty after-window, taken as zero
    after = eta[t_w:t_end].mean(axis=0) if t_end > t_w else np.zeros_like(before)
    return before - after


def association_score(traces: Sequence[DecodeTrace], word_id: int, eos: int = 1,
                      word: str | None = None) -> tuple[np.ndarray, int]:
    """Per-channel ``s(w, c)`` over the traces whose caption contains ``word_id``.

    Returns ``(scores, support)``. The step of ``w`` is its first occurrence.
    """
    diffs = []
    for trace in traces:
        t_end = _caption_length(trace, eos)
        caption = trace.tokens[:t_end]
        if word_id not in caption:
            continue
        t_w = caption.index(word_id) + 1
        diffs.append(_difference(activation_levels(trace), t_w, t_end))
    if not diffs:
        raise EmptySupportError(word if word is not None else str(word_id))
    return np.mean(diffs, axis=0), len(diffs)


def most_relevant_channel(row) -> int:
    """Argmax channel; the lowest channel id wins ties."""
    row = np.asarray(row)
    if row.size == 0:
        raise ValueError("empty score row")
    return int(np.argmax(row))


@dataclass
class AssociationEntry:
    scores: np.ndarray
    argmax: int
    support: int


class AssociationTable(dict):
    """``word -> AssociationEntry`` for every word with non-empty support."""

    def to_dict(self) -> dict:
        return {w: {"scores": [float(s) for s in e.scores], "argmax": e.argmax, "support": e.support}
                for w, e in sorted(self.items())}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AssociationTable":
        table = cls()
        for w, e in json.loads(Path(path).read_text()).items():
            table[w] = AssociationEntry(np.array(e["scores"]), int(e["argmax"]), int(e["support"]))
        return table


def association_table(traces: Sequence[DecodeTrace], vocab, words: Sequence[str] | None = None) -> AssociationTable:
    """Association rows for ``words`` (default: every non-special word)."""
    words = vocab.words if words is None else words
    table = AssociationTable()
    for w in words:
        try:
            scores, support = association_score(traces, vocab.id_of(w), vocab.eos, w)
        except EmptySupportError:
            continue
        table[w] = AssociationEntry(scores, most_relevant_channel(scores), support)
    return table


# -- activated regions ----------------------------------------------------------

@dataclass
class ActivatedRegion:
    mask: np.ndarray
    channel: int
    step: int
    threshold: float
    activation: np.ndarray  # interpolated map at image resolution


def default_image_size(trace: DecodeTrace) -> tuple[int, int]:
    h, w = trace.states[0].shape[-2:]
    return h * IMAGE_STRIDE, w * IMAGE_STRIDE


def activated_region(trace: DecodeTrace, channel: int, step: int, image_size=None,
                     lam: float = DEFAULT_LAMBDA) -> ActivatedRegion:
    """Pixels whose upsampled activation strictly exceeds ``lam * v*``.

    ``v*`` is the channel's maximum over every step of the trace, floored at
    zero so that the mask shrinks monotonically as ``lam`` grows.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    cmap = _channel(trace, channel, step).astype(np.float64)
    image_size = default_image_size(trace) if image_size is None else tuple(image_size)
    v_star = max(float(max(s[channel].max() for s in trace.states)), 0.0)
    threshold = lam * v_star
    up = bicubic_resize(cmap, image_size)
    return ActivatedRegion(up > threshold, channel, step, threshold, up)


def attention_correctness(activations, mask) -> float:
    """Share of the image-normalised activation mass that falls inside ``mask``."""
    act = np.asarray(activations, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if act.shape != mask.shape:
        raise ValueError(f"activation shape {act.shape} != mask shape {mask.shape}")
    if np.any(act < 0):
        raise ValueError("activations must be non-negative")
    total = act.sum()
    if total <= 0:
        raise UndefinedScoreError("attention correctness is undefined for an all-zero activation map")
    return float(act[mask].sum() / total)


def channel_attention(trace: DecodeTrace, channel: int, step: int, image_size=None) -> np.ndarray:
    """Upsampled channel map with negative interpolation overshoot clipped to zero."""
    image_size = default_image_size(trace) if image_size is None else tuple(image_size)
    return np.maximum(bicubic_resize(_channel(trace, channel, step).astype(np.float64), image_size), 0.0)


# -- PGM output -----------------------------------------------------------------

def to_gray(image) -> np.ndarray:
    """8-bit image: boolean masks become 0/255, real maps are min-max scaled."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        return np.where(arr, 255, 0).astype(np.uint8)
    arr = arr.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("PGM images are two-dimensional")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM files are supported")
    pos += 1  # single whitespace byte after maxval
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def emit_region_map(region, path) -> Path:
    """Write an :class:`ActivatedRegion` mask or a raw map as an 8-bit PGM."""
    image = region.mask if isinstance(region, ActivatedRegion) else region
    write_pgm(path, to_gray(image))
    return Path(path)
