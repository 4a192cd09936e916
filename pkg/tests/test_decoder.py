import math

import numpy as np
import pytest

from caption2ds import decoder
from caption2ds.cells import CellConfig
from caption2ds.decoder import (DecoderModel, Intervention, UnsupportedIntervention, decode_step, generate,
                                generate_batch, generate_with_channel_deactivated, generate_with_region,
                                log_likelihood)
from caption2ds.tensor import RegionError, softmax
from caption2ds.vocab import Vocabulary

VOCAB = Vocabulary(["red", "cat", "top", "left", "and"])
FEAT = (3, 5, 5)


def make(kind="rnn2ds", state=(4, 5, 5), seed=0, scale=1.0, **kw):
    cfg = CellConfig(kind, state, **kw)
    m = DecoderModel.create(cfg, VOCAB, FEAT, seed=seed, dtype=np.float64)
    for k in m.params:
        m.params[k] = m.params[k] * scale
    if scale != 1.0:
        rng = np.random.default_rng(seed + 100)
        for k in m.params:
            m.params[k] = m.params[k] + rng.normal(size=m.params[k].shape) * 0.3 * scale
    return m


def zero_model(kind="rnn2ds", state=(4, 5, 5)):
    m = make(kind, state)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


def features(seed=0):
    return np.random.default_rng(seed).normal(size=FEAT)


@pytest.mark.parametrize("kind,state", [("rnn2ds", (4, 5, 5)), ("lstm1ds", (6,))])
def test_zero_model_is_uniform(kind, state):
    m = zero_model(kind, state)
    _, probs = decode_step(m, None, VOCAB.bos, features())
    np.testing.assert_allclose(probs, 1 / len(VOCAB), rtol=1e-12)
    ids, trace = generate(m, features(), max_len=7)
    assert ids == [0] * 7
    assert trace.reason == "max_length"
    assert math.isclose(log_likelihood(m, features(), [3, 4, 5]), 3 * math.log(1 / len(VOCAB)), rel_tol=1e-12)


def test_full_region_is_bitwise_no_op():
    m = make(scale=1.0)
    V = features(1)
    state = None
    prev = VOCAB.bos
    for _ in range(4):
        s1, p1 = decode_step(m, state, prev, V)
        s2, p2 = decode_step(m, state, prev, V, Intervention(region=(1, 1, 5, 5)))
        assert np.array_equal(p1, p2)
        state, prev = s1, int(np.argmax(p1))
    assert generate_with_region(m, V, (1, 1, 5, 5)) == generate(m, V)[0]


def test_deactivating_a_zero_channel_changes_nothing():
    m = make()
    # silence channel 2 entirely: no kernel writes into it and its bias is strongly negative
    m.params["cell.K_h"][2] = 0
    m.params["cell.K_x"][2] = 0
    m.params["cell.K_v"][2] = 0
    m.params["cell.b"][2] = -1.0
    _, trace = generate(m, features(2))
    assert all(np.all(s[2] == 0) for s in trace.states)
    assert generate_with_channel_deactivated(m, features(2), 2) == generate(m, features(2))[0]


def test_deactivated_channel_is_zero_in_pooled_vector():
    m = make(scale=2.0)
    _, trace = generate(m, features(3), intervention=Intervention(deactivate=1))
    for s, pooled in zip(trace.states, trace.pooled):
        assert np.all(s[1] == 0)
        assert pooled[1] == 0


def test_intervention_errors():
    m1 = make("gru1ds", (6,))
    with pytest.raises(UnsupportedIntervention):
        generate_with_channel_deactivated(m1, features(), 0)
    m2 = make()
    with pytest.raises(UnsupportedIntervention):
        generate_with_channel_deactivated(m2, features(), 4)
    with pytest.raises(RegionError):
        generate_with_region(m2, features(), (0, 1, 2, 2))
    with pytest.raises(IndexError):
        decode_step(m2, None, len(VOCAB), features())


def test_single_cell_region_runs():
    m = make(scale=2.0)
    ids = generate_with_region(m, features(4), (3, 3, 3, 3))
    assert all(0 <= i < len(VOCAB) for i in ids)


@pytest.mark.parametrize("kind,state", [("rnn2ds", (4, 5, 5)), ("gru2ds", (3, 5, 5)), ("lstm2ds", (3, 5, 5)),
                                        ("rnn1ds", (6,)), ("gru1ds", (6,)), ("lstm1ds", (6,))])
def test_log_likelihood_matches_stepwise_product(kind, state):
    m = make(kind, state, scale=1.0)
    V = features(5)
    caption = [3, 4, 5, 1]
    total, st, prev = 0.0, None, VOCAB.bos
    for tok in caption:
        st, probs = decode_step(m, st, prev, V)
        total += math.log(probs[tok])
        prev = tok
    assert math.isclose(log_likelihood(m, V, caption), total, rel_tol=1e-9)
    with pytest.raises(ValueError):
        log_likelihood(m, V, [])


def test_greedy_picks_stepwise_argmax():
    m = make(scale=2.0)
    V = features(6)
    ids, trace = generate(m, V, max_len=6)
    st, prev = None, VOCAB.bos
    for tok, logits in zip(trace.tokens, trace.logits):
        st, probs = decode_step(m, st, prev, V)
        assert tok == int(np.argmax(probs))
        np.testing.assert_allclose(softmax(logits), probs, rtol=1e-10)
        prev = tok
    assert len(trace.states) == len(trace.tokens)


def test_sampling_is_seed_deterministic():
    m = make(scale=2.0)
    a = generate(m, features(7), mode="sample", seed=11)[0]
    b = generate(m, features(7), mode="sample", seed=11)[0]
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    m = make(scale=2.0, seed=seed)
    V = features(seed)
    assert generate(m, V, mode="beam", width=1)[0] == generate(m, V)[0]


def test_beam_never_scores_below_greedy():
    m = make(scale=2.0, seed=3)
    V = features(8)
    greedy = generate(m, V, max_len=5)[1].tokens
    beam = generate(m, V, mode="beam", width=4, max_len=5)[1].tokens
    if greedy[-1] == VOCAB.eos and beam[-1] == VOCAB.eos:
        assert log_likelihood(m, V, beam) >= log_likelihood(m, V, greedy) - 1e-9


def test_batch_generation_matches_single():
    m = make(scale=2.0)
    V = np.stack([features(i) for i in range(4)])
    caps, traces = generate_batch(m, V)
    for i in range(4):
        ids, trace = generate(m, V[i])
        assert caps[i] == ids
        assert traces[i].tokens == trace.tokens


def test_model_rejects_wrong_output_rows():
    m = make()
    with pytest.raises(ValueError):
        DecoderModel(m.config, Vocabulary(["a"]), FEAT, m.params)
