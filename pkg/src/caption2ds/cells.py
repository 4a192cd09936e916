"""Recurrent cell updates with vector (1D) and multi-channel map (2D) states.

All step functions accept plain arrays or :class:`~caption2ds.autodiff.Var`
and work unbatched (``C×H×W`` / ``L``) or with a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .tensor import ConfigError, ShapeError

KINDS = ("rnn1ds", "gru1ds", "lstm1ds", "rnn2ds", "gru2ds", "lstm2ds")
DISPLAY = {
    "rnn1ds": "RNN-1DS", "gru1ds": "GRU-1DS", "lstm1ds": "LSTM-1DS",
    "rnn2ds": "RNN-2DS", "gru2ds": "GRU-2DS", "lstm2ds": "LSTM-2DS",
}
GATES = {"rnn": ("",), "gru": ("r", "z", "h"), "lstm": ("i", "f", "o", "g")}
SOURCES = ("h", "x", "v")
EMBED_HIDDEN = 32
EMBED_KERNEL = 5


def parse_kind(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in KINDS:
        raise ConfigError(f"unknown cell kind {name!r}; expected one of {', '.join(KINDS)}")
    return key


@dataclass(frozen=True)
class CellConfig:
    kind: str
    state: tuple[int, ...]
    kernel: tuple[int, int] = (3, 3)
    activation: str | None = None
    embed: tuple[int, ...] | None = None
    pooling: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        object.__setattr__(self, "state", tuple(int(s) for s in self.state))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.activation is None:
            object.__setattr__(self, "activation", "relu" if self.is_2d else "tanh")
        if self.embed is None:
            default = (4, 15, 15) if self.is_2d else (self.state[0],)
            object.__setattr__(self, "embed", default)
        object.__setattr__(self, "embed", tuple(int(e) for e in self.embed))
        want = 3 if self.is_2d else 1
        if len(self.state) != want or len(self.embed) != want:
            raise ConfigError(f"{DISPLAY[self.kind]} needs {want}-d state and embedding shapes")
        if min(self.state) < 1 or min(self.embed) < 1:
            raise ConfigError("state and embedding extents must be >= 1")
        if self.is_2d and (self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0):
            raise ConfigError(f"kernel extents must be odd, got {self.kernel}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"activation must be tanh or relu, got {self.activation!r}")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"pooling must be mean or max, got {self.pooling!r}")

    @property
    def is_2d(self) -> bool:
        return self.kind.endswith("2ds")

    @property
    def family(self) -> str:
        return self.kind[:-3]

    @property
    def channels(self) -> int:
        """Length of the pooled state vector fed to the word predictor."""
        return self.state[0]

    @property
    def name(self) -> str:
        return f"{DISPLAY[self.kind]}-({','.join(str(s) for s in self.state)})"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _weight_prefix(cfg: CellConfig) -> str:
    return "K" if cfg.is_2d else "W"


def gate_weight(cfg: CellConfig, gate: str, src: str) -> str:
    return f"cell.{_weight_prefix(cfg)}_{gate}{src}"


def gate_bias(gate: str) -> str:
    return f"cell.b_{gate}" if gate else "cell.b"


def param_shapes(cfg: CellConfig, vocab_size: int, feature_shape) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of a decoder, by name."""
    feature_shape = tuple(int(s) for s in feature_shape)
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.is_2d:
        c = cfg.state[0]
        cx = cfg.embed[0]
        shapes["embed.table"] = (vocab_size, *cfg.embed)
        shapes["embed.conv1.weight"] = (EMBED_HIDDEN, cx, EMBED_KERNEL, EMBED_KERNEL)
        shapes["embed.conv1.bias"] = (EMBED_HIDDEN,)
        shapes["embed.conv2.weight"] = (c, EMBED_HIDDEN, EMBED_KERNEL, EMBED_KERNEL)
        shapes["embed.conv2.bias"] = (c,)
        if feature_shape[0] != c:
            shapes["visual.weight"] = (c, feature_shape[0], 1, 1)
            shapes["visual.bias"] = (c,)
        kh, kw = cfg.kernel
        for gate in GATES[cfg.family]:
            for src in SOURCES:
                shapes[gate_weight(cfg, gate, src)] = (c, c, kh, kw)
            shapes[gate_bias(gate)] = (c,)
    else:
        L = cfg.state[0]
        lx = cfg.embed[0]
        shapes["embed.table"] = (vocab_size, lx)
        fan = {"h": L, "x": lx, "v": feature_shape[0]}
        for gate in GATES[cfg.family]:
            for src in SOURCES:
                shapes[gate_weight(cfg, gate, src)] = (L, fan[src])
            shapes[gate_bias(gate)] = (L,)
    shapes["out.weight"] = (vocab_size, cfg.channels)
    shapes["out.bias"] = (vocab_size,)
    return shapes


def _fan_in(name: str, shape) -> int:
    if name == "embed.table" or len(shape) == 1:
        return 1
    return int(np.prod(shape[1:]))


def init_params(cfg: CellConfig, vocab_size: int, feature_shape, seed: int,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(-s, s) weights with s = sqrt(3/fan_in) (unit-variance preactivations); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg, vocab_size, feature_shape).items()):
        if name.endswith("bias") or name.startswith("cell.b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        s = np.sqrt(3.0 / _fan_in(name, shape))
        params[name] = rng.uniform(-s, s, size=shape).astype(dtype)
    return params


def count_parameters(cfg: CellConfig, vocab_size: int, feature_shape) -> dict[str, int]:
    """Itemized scalar counts; the ``total`` key sums every other entry."""
    groups: dict[str, int] = {}
    for name, shape in param_shapes(cfg, vocab_size, feature_shape).items():
        if name.startswith("embed."):
            key = "embedding"
        elif name.startswith("visual."):
            key = "visual_projection"
        elif name.startswith("cell.b"):
            key = "cell_biases"
        elif name.startswith("cell."):
            key = "cell_weights"
        else:
            key = "output_projection"
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    groups["total"] = sum(groups.values())
    return groups


# -- inputs -----------------------------------------------------------------

def embed_word_1d(table, word_id):
    tv = ad.value(table)
    ids = np.asarray(word_id)
    if np.any(ids < 0) or np.any(ids >= tv.shape[0]):
        raise IndexError(f"word id {word_id} outside vocabulary of size {tv.shape[0]}")
    return ad.take_rows(table, ids)


def embed_map(params, raw, target):
    """Raw ``C_x×H_x×W_x`` embedding(s) to ``C×H×W`` maps via two convs and a resize."""
    y = ad.relu(ad.conv2d(raw, params["embed.conv1.weight"], params["embed.conv1.bias"]))
    y = ad.relu(ad.conv2d(y, params["embed.conv2.weight"], params["embed.conv2.bias"]))
    return ad.resize(y, tuple(target))


def embed_word_2d(params, word_id, target):
    table = params["embed.table"]
    raw = embed_word_1d(table, word_id)
    return embed_map(params, raw, target)


def shape_visual(cfg: CellConfig, params, V):
    """Visual feature in the form the cell consumes: C×H×W map (2D) or vector (1D)."""
    if cfg.is_2d:
        target = cfg.state[1:]
        V = ad.resize(V, target)
        if "visual.weight" in params:
            V = ad.conv2d(V, params["visual.weight"], params["visual.bias"])
        return V
    return ad.mean_pool(V)


# -- cell math --------------------------------------------------------------

def _apply(cfg: CellConfig, weight, x, bias=None):
    if cfg.is_2d:
        return ad.conv2d(x, weight, bias)
    return ad.linear(weight, x, bias)


def source_terms(cfg: CellConfig, params, src: str, value, with_bias: bool = False) -> dict:
    """Per-gate contribution of one input (``x`` or ``v``) to the pre-activations."""
    out = {}
    for gate in GATES[cfg.family]:
        bias = params[gate_bias(gate)] if with_bias else None
        out[gate] = _apply(cfg, params[gate_weight(cfg, gate, src)], value, bias)
    return out


def _check_state(cfg: CellConfig, h):
    shape = ad.value(h).shape
    if tuple(shape[-len(cfg.state):]) != cfg.state:
        raise ShapeError(f"state shape {shape} does not match {cfg.state}")


def cell_step(cfg: CellConfig, params, state, X=None, V=None, *, x_terms=None, v_terms=None):
    """One state update. ``state`` is ``h`` or ``(h, cell)`` for LSTM kinds.

    ``x_terms`` / ``v_terms`` let callers reuse precomputed input
    contributions; ``v_terms`` then already includes the gate biases.
    """
    if x_terms is None:
        x_terms = source_terms(cfg, params, "x", X)
    if v_terms is None:
        v_terms = source_terms(cfg, params, "v", V, with_bias=True)
    act = cfg.activation
    fam = cfg.family
    h = state[0] if fam == "lstm" else state
    _check_state(cfg, h)

    def hterm(gate):
        return _apply(cfg, params[gate_weight(cfg, gate, "h")], h)

    if fam == "rnn":
        return ad.activation(act, ad.add_n(hterm(""), x_terms[""], v_terms[""]))
    if fam == "gru":
        r = ad.sigmoid(ad.add_n(hterm("r"), x_terms["r"], v_terms["r"]))
        z = ad.sigmoid(ad.add_n(hterm("z"), x_terms["z"], v_terms["z"]))
        cand = ad.activation(act, ad.add_n(ad.mul(r, hterm("h")), x_terms["h"], v_terms["h"]))
        return ad.add(ad.mul(z, h), ad.mul(ad.one_minus(z), cand))
    c = state[1]
    i = ad.sigmoid(ad.add_n(hterm("i"), x_terms["i"], v_terms["i"]))
    f = ad.sigmoid(ad.add_n(hterm("f"), x_terms["f"], v_terms["f"]))
    o = ad.sigmoid(ad.add_n(hterm("o"), x_terms["o"], v_terms["o"]))
    g = ad.activation(act, ad.add_n(hterm("g"), x_terms["g"], v_terms["g"]))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c_new)), c_new


def _cfg_for(kind: str, params) -> CellConfig:
    prefix = "K" if kind.endswith("2ds") else "W"
    gate = GATES[kind[:-3]][0]
    w = ad.value(params[f"cell.{prefix}_{gate}h"])
    if kind.endswith("2ds"):
        return CellConfig(kind, (w.shape[0], 1, 1), kernel=w.shape[2:])
    return CellConfig(kind, (w.shape[0],))


def _infer(kind, params, h, activation):
    base = _cfg_for(kind, params)
    hv = ad.value(h)
    state = tuple(hv.shape[-3:]) if base.is_2d else (hv.shape[-1],)
    return CellConfig(kind, state, kernel=base.kernel, activation=activation)


def step_rnn_1d(params, h, x, v, activation="tanh"):
    return cell_step(_infer("rnn1ds", params, h, activation), params, h, x, v)


def step_gru_1d(params, h, x, v, activation="tanh"):
    return cell_step(_infer("gru1ds", params, h, activation), params, h, x, v)


def step_lstm_1d(params, state, x, v, activation="tanh"):
    return cell_step(_infer("lstm1ds", params, state[0], activation), params, state, x, v)


def step_rnn_2d(params, H, X, V, activation="relu"):
    return cell_step(_infer("rnn2ds", params, H, activation), params, H, X, V)


def step_gru_2d(params, H, X, V, activation="relu"):
    return cell_step(_infer("gru2ds", params, H, activation), params, H, X, V)


def step_lstm_2d(params, state, X, V, activation="relu"):
    return cell_step(_infer("lstm2ds", params, state[0], activation), params, state, X, V)


def zero_state(cfg: CellConfig, batch: int | None = None, dtype=np.float32):
    shape = cfg.state if batch is None else (batch, *cfg.state)
    h = np.zeros(shape, dtype=dtype)
    if cfg.family == "lstm":
        return h, np.zeros(shape, dtype=dtype)
    return h
