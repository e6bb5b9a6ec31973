import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracle
from conftest import tiny_model, tiny_patient
from cognet.data import Visit
from cognet.decoder import (
    DecodeState,
    copy_distribution,
    copy_mix,
    decode_step,
    generation_distribution,
    medication_scores,
    visit_scores,
)
from cognet.inference import encode_visits


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def state_for(model, visits, idx, prefix=()):
    return DecodeState(encode_visits(model, visits, [idx]), (model.start_id, *prefix))


# ---------------------------------------------------------------------------
# generation distribution

def test_zero_weights_uniform():
    pr = generation_distribution(t(np.ones(4)), t(np.zeros((4, 5))), t(np.zeros(5)))
    np.testing.assert_allclose(pr.numpy(), np.full(5, 0.2))


def test_large_bias_dominates():
    b = np.zeros(5)
    b[2] = 20
    pr = generation_distribution(t(np.ones(4)), t(np.zeros((4, 5))), t(b))
    assert pr[2] > 0.99


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_generation_normalized(seed):
    rng = np.random.default_rng(seed)
    pr = generation_distribution(t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 7)) * 3), t(rng.normal(size=7)))
    np.testing.assert_allclose(pr.sum(-1).numpy(), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# visit scores

def test_one_past_visit():
    rng = np.random.default_rng(0)
    c = visit_scores(t(rng.normal(size=4)), t(rng.normal(size=4)), t(rng.normal(size=(1, 4))), t(rng.normal(size=(1, 4))))
    assert c.tolist() == [1.0]


def test_identical_past_visits():
    h = t(np.tile(np.random.default_rng(1).normal(size=4), (2, 1)))
    c = visit_scores(t(np.ones(4)), t(np.ones(4)), h, h)
    np.testing.assert_allclose(c.numpy(), [0.5, 0.5])


def test_visit_scores_match_oracle():
    rng = np.random.default_rng(2)
    vd, vp, hd, hp = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    expected = oracle.softmax([(hd[j] @ vd + hp[j] @ vp) / 2.0 for j in range(3)])
    np.testing.assert_allclose(visit_scores(t(vd), t(vp), t(hd), t(hp)).numpy(), expected, rtol=0, atol=1e-9)


def test_visit_scores_need_history():
    with pytest.raises(ValueError):
        visit_scores(t(np.ones(4)), t(np.ones(4)), t(np.zeros((0, 4))), t(np.zeros((0, 4))))


# ---------------------------------------------------------------------------
# medication scores

def test_single_slot():
    rng = np.random.default_rng(3)
    q = medication_scores(t(rng.normal(size=(1, 4))), t(rng.normal(size=(1, 4))), t(rng.normal(size=(4, 4))))
    assert q.tolist() == [[1.0]]


def test_identical_slots_uniform():
    rng = np.random.default_rng(4)
    hist = t(np.tile(rng.normal(size=4), (5, 1)))
    q = medication_scores(t(rng.normal(size=(1, 4))), hist, t(rng.normal(size=(4, 4))))
    np.testing.assert_allclose(q.numpy(), np.full((1, 5), 0.2))


def test_medication_scores_match_oracle():
    rng = np.random.default_rng(5)
    h, w = rng.normal(size=4), rng.normal(size=(4, 4))
    visit1, visit2 = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    slots = np.vstack([visit1, visit2])
    expected = oracle.softmax([(h @ w) @ slots[i] / 2.0 for i in range(5)])
    q = medication_scores(t([h]), t(slots), t(w))
    np.testing.assert_allclose(q[0].numpy(), expected, rtol=0, atol=1e-9)


def test_masked_slots_get_zero():
    rng = np.random.default_rng(6)
    q = medication_scores(t(rng.normal(size=(1, 4))), t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 4))),
                          mask=torch.tensor([True, False, True]))
    assert q[0, 1] == 0 and abs(float(q.sum()) - 1) < 1e-12


# ---------------------------------------------------------------------------
# copy distribution and mixing

def test_copy_single_visit():
    pr = copy_distribution(t([0.7, 0.3]), t([1.0, 1.0]), torch.tensor([0, 1]), 4)
    np.testing.assert_allclose(pr.numpy(), [0.7, 0.3, 0, 0], atol=1e-15)


def test_copy_repeated_medication():
    # slots: (visit1, mA) (visit2, mA) (visit2, mB) with c = [0.6, 0.4]
    pr = copy_distribution(t([0.5, 0.3, 0.2]), t([0.6, 0.4, 0.4]), torch.tensor([0, 0, 1]), 4)
    np.testing.assert_allclose(pr.numpy(), [0.84, 0.16, 0, 0], rtol=0, atol=1e-12)


def test_copy_never_reaches_reserved_tokens():
    rng = np.random.default_rng(7)
    pr = copy_distribution(t(rng.dirichlet(np.ones(6))), t(rng.random(6)), torch.tensor([0, 1, 2, 0, 3, 4]), 6)
    assert pr[5] == 0  # END column; START has no column at all


def test_mix_degenerate_gates():
    pr_g, pr_c = t([0.2, 0.8, 0]), t([0.5, 0, 0.5])
    w_one = torch.sigmoid(t(30.0))
    np.testing.assert_allclose(copy_mix(pr_g, pr_c, w_one).numpy(), pr_g.numpy(), atol=1e-9)
    np.testing.assert_allclose(copy_mix(pr_g, pr_c, t(0.0)).numpy(), pr_c.numpy(), atol=0)
    np.testing.assert_allclose(copy_mix(pr_g, pr_g, t(0.5)).numpy(), pr_g.numpy(), atol=1e-15)
    assert copy_mix(pr_g, pr_c, t(0.3), has_history=False) is pr_g


# ---------------------------------------------------------------------------
# full decode step

def test_all_generated_leaves_end():
    model = tiny_model()
    patient = tiny_patient(2)
    step, _ = decode_step(model, state_for(model, patient.visits, 1, prefix=range(6)))
    np.testing.assert_allclose(step.pr, [0] * 6 + [1.0], atol=1e-12)


def test_no_copy_ignores_history():
    model = tiny_model(ablations=("copy",))
    patient = tiny_patient(3, seed=4)
    with_history, _ = decode_step(model, state_for(model, patient.visits, 2, prefix=(1,)))
    alone, _ = decode_step(model, state_for(model, (patient.visits[2],), 0, prefix=(1,)))
    np.testing.assert_allclose(with_history.pr, alone.pr, rtol=0, atol=1e-12)


def test_first_visit_generates_only():
    model = tiny_model(seed=2)
    patient = tiny_patient(2, seed=2)
    step, _ = decode_step(model, state_for(model, patient.visits, 0))
    assert step.w_g == 1.0 and not step.has_history
    np.testing.assert_allclose(step.pr, step.pr_g, atol=1e-15)


def test_decode_state_rejects_repeats():
    model = tiny_model()
    state = state_for(model, tiny_patient(2).visits, 1, prefix=(2,))
    with pytest.raises(ValueError):
        state.extend(2)


def test_decoder_hidden_start_only():
    model = tiny_model(seed=3)
    ctx = encode_visits(model, tiny_patient(2, seed=3).visits, [1])
    with torch.no_grad():
        h = model.decoder_hidden(ctx, torch.tensor([[model.start_id]]))
    assert h.shape == (1, 1, 8)


def test_zero_graph_embedding_equals_graph_ablation():
    full = tiny_model(seed=5)
    ablated = tiny_model(seed=5, ablations=("graphs",))
    ablated.load_state_dict(full.state_dict())
    visits = tiny_patient(2, seed=5).visits
    ctx = encode_visits(full, visits, [1])
    ctx.graph_emb = torch.zeros_like(ctx.graph_emb)
    tokens = torch.tensor([[full.start_id, 3, 1]])
    with torch.no_grad():
        a = full.decoder_hidden(ctx, tokens)
        b = ablated.decoder_hidden(encode_visits(ablated, visits, [1]), tokens)
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_decoder_hidden_matches_oracle():
    model = tiny_model(seed=6)
    visits = [Visit([0, 3], [1, 4], [2, 5]), Visit([1, 2], [0, 5], [0, 1, 4])]
    prefix = (4, 0)  # i = 3 positions with START
    ctx = encode_visits(model, visits, [1])
    with torch.no_grad():
        h = model.decoder_hidden(ctx, torch.tensor([[model.start_id, *prefix]]))[0, -1]
    expected = oracle.decode_step(oracle.params_of(model), visits, 1, prefix, 2, (6, 6, 6))["h"]
    np.testing.assert_allclose(h.numpy(), expected, rtol=0, atol=1e-9)


@pytest.mark.parametrize("ablation", [(), ("visit_scores",), ("graphs",), ("copy",)])
def test_three_visit_step_matches_oracle(ablation):
    model = tiny_model(seed=7, ablations=ablation)
    patient = tiny_patient(3, seed=7)
    prefix = (patient.visits[2].medications[0],)
    step, _ = decode_step(model, state_for(model, patient.visits, 2, prefix))
    ref = oracle.decode_step(oracle.params_of(model), patient.visits, 2, prefix, 2, (6, 6, 6),
                             use_copy="copy" not in ablation, use_visit_scores="visit_scores" not in ablation,
                             use_graph="graphs" not in ablation)
    np.testing.assert_allclose(step.pr, ref["pr"], rtol=0, atol=1e-9)
    if "copy" not in ablation:
        np.testing.assert_allclose(step.visit_scores, ref["c"], rtol=0, atol=1e-9)
        assert math.isclose(step.w_g, ref["w_g"], abs_tol=1e-9)


def test_empty_procedures_use_null_row():
    model = tiny_model(seed=8)
    visits = [Visit([0], [], [1]), Visit([2], [], [3])]
    step, _ = decode_step(model, state_for(model, visits, 1))
    ref = oracle.decode_step(oracle.params_of(model), visits, 1, (), 2, (6, 6, 6))
    np.testing.assert_allclose(step.pr, ref["pr"], rtol=0, atol=1e-9)
