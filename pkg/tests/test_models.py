import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcycle.data import BOS_ID, EOS_ID, collate_ids
from dualcycle.errors import ContractError, EmptyDatasetError, ShapeError
from dualcycle.models import (
    MadeEstimator,
    NlgModel,
    NluModel,
    RnnLm,
    lm_logprob,
    load_checkpoint,
    made_build_masks,
    made_logprob,
    pretrain_lm,
    pretrain_made,
    save_checkpoint,
)
from dualcycle.objectives import supervised_loss_nlg, supervised_loss_nlu
from dualcycle.tensor import Tensor, backward, no_grad

V, D = 12, 6


def small_nlg(seed=0):
    return NlgModel(D, V, embed=8, hidden=24, seed=seed)


def small_nlu(seed=1):
    return NluModel(V, D, embed=8, hidden=24, seed=seed)


def frame_of(*on):
    f = np.zeros((1, D))
    f[0, list(on)] = 1.0
    return f


def nlg_step(model, frame, tokens, lr):
    inputs, targets, mask = collate_ids([tokens])
    loss = supervised_loss_nlg(model.teacher_forced(frame, inputs), targets, mask)
    backward(loss)
    model.params.adam_update(lr)
    return loss.item()


# -- NLG ---------------------------------------------------------------------------


def test_teacher_forced_steps_are_distributions():
    m = small_nlg()
    inputs, _, _ = collate_ids([[4, 5, 6], [7]])
    with no_grad():
        dists = m.teacher_forced(np.vstack([frame_of(0), frame_of(1, 2)]), inputs)
    assert len(dists) == inputs.shape[1]
    for d in dists:
        assert np.all(np.abs(d.data.sum(axis=1) - 1.0) < 1e-9)
        assert np.all(d.data > 0)


def test_teacher_forced_requires_bos_and_target():
    m = small_nlg()
    with pytest.raises(ContractError):
        m.teacher_forced(frame_of(0), np.zeros((1, 0), dtype=int))
    with pytest.raises(ContractError):
        m.teacher_forced(frame_of(0), np.array([[5, 6]]))
    with pytest.raises(ShapeError):
        m.init_state(np.zeros((1, D + 1)))


def test_nlg_loss_decreases_over_first_steps():
    m = small_nlg()
    losses = [nlg_step(m, frame_of(0, 3), [4, 5, 6, 7], 1e-2) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_nlg_overfit_one_pair_reproduces_target():
    m = small_nlg()
    target = [4, 9, 5, 5, 11, 6]
    for _ in range(200):
        nlg_step(m, frame_of(1, 4), target, 1e-2)
    assert m.greedy(frame_of(1, 4), max_len=20) == [target]


def test_nlg_overfit_eight_pairs():
    rng = np.random.default_rng(0)
    m = NlgModel(D, V, embed=8, hidden=48, seed=0)
    frames = np.vstack([frame_of(*c) for c in list(itertools.combinations(range(D), 2))[:8]])
    targets = [list(rng.integers(4, V, size=rng.integers(2, 6))) for _ in range(8)]
    inputs, tgt, mask = collate_ids(targets)
    for _ in range(400):
        backward(supervised_loss_nlg(m.teacher_forced(frames, inputs), tgt, mask))
        m.params.adam_update(1e-2)
    assert m.greedy(frames, max_len=20) == [[int(t) for t in s] for s in targets]


def test_rigged_eos_decodes_empty():
    m = small_nlg()
    m.W_out.data[...] = 0.0
    m.b_out.data[...] = 0.0
    m.b_out.data[EOS_ID] = 10.0
    res = m.decode(Tensor(frame_of(0)), max_len=5)
    assert res.lengths.tolist() == [0]
    assert res.content(0) == []


def test_greedy_is_deterministic_and_bounded():
    m = small_nlg()
    frames = np.vstack([frame_of(0), frame_of(1, 2), np.full((1, D), 0.5)])
    a, b = m.greedy(frames, max_len=7), m.greedy(frames, max_len=7)
    assert a == b
    assert all(len(s) <= 7 for s in a)
    with pytest.raises(ContractError):
        m.decode(Tensor(frames), max_len=0)


def test_sample_mode_is_seeded():
    m = small_nlg()
    f = Tensor(np.vstack([frame_of(0), frame_of(2)]))
    with no_grad():
        a = m.decode(f, 10, mode="sample", rng=np.random.default_rng(3))
        b = m.decode(f, 10, mode="sample", rng=np.random.default_rng(3))
    assert np.array_equal(a.tokens, b.tokens)
    with pytest.raises(ContractError):
        m.decode(f, 10, mode="sample")


@pytest.mark.parametrize("feedback", ["token", "straight_through", "distribution"])
def test_decode_emits_argmax_for_every_feedback(feedback):
    m = small_nlg()
    with no_grad():
        res = m.decode(Tensor(frame_of(0, 1)), 6, feedback=feedback)
    for t, p in enumerate(res.probs):
        if res.step_mask[0, t] and t < 6:
            assert res.tokens[0, t] == p.data[0].argmax()


# -- NLU ---------------------------------------------------------------------------


def test_nlu_zero_head_gives_half():
    m = small_nlu()
    m.W_out.data[...] = 0.0
    m.b_out.data[...] = 0.0
    assert np.all(m.predict(np.array([[4, 5, 6]])) == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, V - 1), min_size=1, max_size=9))
def test_nlu_output_shape_and_range(ids):
    p = small_nlu().predict(np.array([ids]))
    assert p.shape == (1, D)
    assert np.all((p > 0) & (p < 1))


def test_nlu_rejects_empty_input():
    m = small_nlu()
    with pytest.raises(ContractError):
        m.forward_tokens(np.zeros((1, 0), dtype=int))
    with pytest.raises(ContractError):
        m.forward_dists([])


def test_nlu_soft_input_matches_onehot_tokens():
    m = small_nlu()
    ids = np.array([[4, 7, 9]])
    onehots = [Tensor(np.eye(V)[ids[:, t]]) for t in range(3)]
    with no_grad():
        assert np.allclose(m.forward_dists(onehots).data, m.forward_tokens(ids).data, atol=1e-12)


def test_nlu_overfit_one_pair():
    m = small_nlu()
    ids, gold = np.array([[4, 8, 5, 10]]), frame_of(0, 3, 5)
    for _ in range(200):
        backward(supervised_loss_nlu(m.forward_tokens(ids), gold))
        m.params.adam_update(1e-2)
    assert np.array_equal((m.predict(ids) >= 0.5).astype(float), gold)


# -- language model ----------------------------------------------------------------


def _step_prob(lm, prefix, token):
    with no_grad():
        dists = lm.step_dists(np.array([[BOS_ID] + list(prefix)]))
    return float(dists[-1].data[0, token])


def test_lm_single_token():
    lm = RnnLm(V, embed=8, hidden=16)
    assert lm_logprob(lm, [5]) == pytest.approx(math.log(_step_prob(lm, [], 5)), abs=1e-12)


def test_lm_chain_rule_two_tokens():
    lm = RnnLm(V, embed=8, hidden=16)
    expected = math.log(_step_prob(lm, [], 6)) + math.log(_step_prob(lm, [6], 9))
    assert lm_logprob(lm, [6, 9]) == pytest.approx(expected, abs=1e-12)
    assert lm_logprob(lm, [6, 9], normalize=True) == pytest.approx(expected / 2, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(4, V - 1), min_size=1, max_size=8))
def test_lm_logprob_additive_and_nonpositive(tokens):
    lm = RnnLm(V, embed=8, hidden=16)
    stepwise = sum(math.log(_step_prob(lm, tokens[:i], tok)) for i, tok in enumerate(tokens))
    total = lm_logprob(lm, tokens)
    assert total <= 0
    assert total == pytest.approx(stepwise, abs=1e-10)


def test_lm_empty_utterance():
    with pytest.raises(ContractError):
        lm_logprob(RnnLm(V, embed=8, hidden=16), [])


def test_lm_on_repeated_sentence_reaches_low_perplexity():
    lm, hist = pretrain_lm([[4, 5, 6, 7]] * 64, V, epochs=30, batch_size=16, lr=1e-2, embed=8, hidden=16)
    assert math.exp(hist[-1]) < 1.05
    assert lm.params.frozen


def test_lm_training_curve_on_500_sentences():
    rng = np.random.default_rng(1)
    grammar = [[4, 5, 6], [4, 7, 8, 9], [10, 5, 11]]
    corpus = [grammar[i] + list(rng.integers(4, V, size=1)) for i in rng.integers(0, 3, size=500)]
    _, hist = pretrain_lm(corpus, V, epochs=5, batch_size=64, embed=8, hidden=16)
    assert hist[-1] < hist[0]
    assert all(b <= a * 1.05 for a, b in zip(hist, hist[1:]))


def test_pretrain_rejects_empty():
    with pytest.raises(EmptyDatasetError):
        pretrain_lm([], V)
    with pytest.raises(EmptyDatasetError):
        pretrain_made(np.zeros((0, 3)))


# -- MADE --------------------------------------------------------------------------


def test_made_zero_head_closed_form():
    made = MadeEstimator(5, hidden=16, n_orderings=3)
    made.zero_head()
    for frame in ([0, 0, 0, 0, 0], [1, 0, 1, 1, 0]):
        assert made_logprob(made, frame) == pytest.approx(-5 * math.log(2), abs=1e-12)
    with pytest.raises(ShapeError):
        made_logprob(made, [1, 0])


def test_made_d1_has_empty_conditioning_set():
    for s in made_build_masks(1, 8, 4, seed=0):
        assert s.conditioning_set(0) == set()


def test_made_mask_inspection_d3():
    (s,) = made_build_masks(3, 32, 1, seed=0, orderings=[(2, 0, 1)])
    # input 1 has degree 0, input 2 degree 1, input 0 degree 2
    assert s.conditioning_set(1) == set()
    assert s.conditioning_set(2) <= {1}
    assert s.conditioning_set(0) <= {1, 2}
    assert np.all(s.output_mask[1] == 0)


def test_made_masks_deterministic_and_validated():
    a, b = made_build_masks(6, 20, 3, seed=4), made_build_masks(6, 20, 3, seed=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.hidden_mask, y.hidden_mask)
        assert np.array_equal(x.output_mask, y.output_mask)
    with pytest.raises(ContractError):
        made_build_masks(3, 4, 0, seed=0)
    with pytest.raises(ContractError):
        made_build_masks(3, 4, 1, seed=0, orderings=[(0, 0, 1)])


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 10), st.integers(0, 1000))
def test_made_autoregressive_by_perturbation(dim, seed):
    made = MadeEstimator(dim, hidden=24, n_orderings=2, seed=seed)
    rng = np.random.default_rng(seed)
    base = (rng.random(dim) < 0.5).astype(float)
    for k, masks in enumerate(made.masks):
        with no_grad():
            ref = made.conditionals(base[None], k).data[0]
        for d in range(dim):
            flipped = base.copy()
            flipped[d] = 1.0 - flipped[d]
            with no_grad():
                out = made.conditionals(flipped[None], k).data[0]
            for j in range(dim):
                if masks.input_degrees[d] >= masks.input_degrees[j]:
                    assert out[j] == ref[j]


def test_made_ranks_frames_by_frequency():
    rng = np.random.default_rng(0)
    support = np.array([[1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 1], [1, 1, 1, 1]], dtype=float)
    freqs = np.array([0.5, 0.3, 0.15, 0.05])
    frames = support[rng.choice(4, size=2000, p=freqs)]
    made, _ = pretrain_made(frames, epochs=30, batch_size=64, lr=1e-2, hidden=32, n_orderings=3)
    scores = [made_logprob(made, f) for f in support]
    assert scores == sorted(scores, reverse=True)


def test_made_cannot_beat_entropy_on_fair_coins():
    D4 = 4
    frames = (np.random.default_rng(1).random((2000, D4)) < 0.5).astype(float)
    made, hist = pretrain_made(frames, epochs=10, batch_size=64, lr=1e-2, hidden=16, n_orderings=2)
    assert hist[-1] == pytest.approx(D4 * math.log(2), rel=0.02)
    assert hist[-1] >= D4 * math.log(2) - 0.02


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = small_nlg()
    save_checkpoint(m.params, tmp_path / "nlg", "L", "V")
    other = small_nlg(seed=9)
    load_checkpoint(other.params, tmp_path / "nlg", "L", "V")
    for name, t in m.params.items():
        assert np.array_equal(t.data, other.params[name].data)
    with pytest.raises(ContractError):
        load_checkpoint(other.params, tmp_path / "nlg", "other", "V")
    raw = (tmp_path / "nlg.bin").read_bytes()
    assert len(raw) == 8 * sum(t.data.size for _, t in m.params.items())
