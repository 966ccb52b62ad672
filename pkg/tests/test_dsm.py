from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from progkt import dsm
from progkt import numkernel as nk
from progkt.datamodel import DataError


def small_cfg(**kw):
    base = dict(problem_dim=5, code_dim=4, hidden_dim=6, decay=0.6)
    base.update(kw)
    return dsm.DsmConfig(**base)


def batch(rng, cfg, n=3, length=7):
    problems = nk.Tensor(rng.normal(size=(n, length, cfg.problem_dim)), requires_grad=True)
    codes = nk.Tensor(rng.normal(size=(n, length, cfg.code_dim)), requires_grad=True)
    responses = (rng.random((n, length)) < 0.6).astype(int)
    mask = np.ones((n, length), bool)
    return problems, responses, codes, mask


# ---- single-step examples

def test_step_differences():
    np.testing.assert_array_equal(dsm.step_differences(5), [3, 2, 1, 0])
    np.testing.assert_array_equal(dsm.step_differences(2), [0])
    with pytest.raises(nk.ContractError):
        dsm.step_differences(1)


def test_step_differences_match_batched_structure():
    causal, dmat = dsm.causal_structure(200)
    for t in range(2, 201):
        row = t - 1                          # 0-based position of 1-based step t
        np.testing.assert_array_equal(dmat[row][causal[row]], dsm.step_differences(t))


def test_scale_form_example():
    a = dsm.decay_attention(nk.Tensor([[1.0, 1.0]]), 0.6, True, form="scale").data
    np.testing.assert_allclose(a, [[0.389, 0.611]], atol=5e-4)


def test_shift_form_example():
    a = dsm.decay_attention(nk.Tensor([[1.0, 1.0]]), 0.6, True, form="shift").data
    np.testing.assert_allclose(a, [[1 / (1 + np.exp(0.6)), 1 / (1 + np.exp(-0.6))]], rtol=1e-14)


@pytest.mark.parametrize("form", ["shift", "scale"])
def test_lambda_zero_is_plain_softmax_bitwise(rng, form):
    s = nk.Tensor(rng.normal(size=(1, 9)))
    np.testing.assert_array_equal(dsm.decay_attention(s, 0.0, True, form).data, nk.softmax_row(s).data)


def test_rnn_step_examples(rng):
    cfg = small_cfg()
    params = dsm.init_params(cfg, rng)
    for p in params.values():
        p.data[...] = 0.0
    zero = nk.Tensor(np.zeros((1, cfg.hidden_dim)))
    x = nk.Tensor(np.zeros((1, cfg.problem_input_dim)))
    np.testing.assert_array_equal(dsm.rnn_step(params, "g", zero, x).data, 0.0)
    params["b_g"].data[:] = 0.3
    h = zero
    for _ in range(4):
        h = dsm.rnn_step(params, "g", h, nk.Tensor(rng.normal(size=(1, cfg.problem_input_dim))))
        np.testing.assert_allclose(h.data, np.tanh(0.3))
    with pytest.raises(nk.DimensionError):
        dsm.rnn_step(params, "g", zero, nk.Tensor(np.zeros((1, 2))))


def test_parameter_shapes(rng):
    cfg = small_cfg()
    p = dsm.init_params(cfg, rng)
    assert p["W_g"].shape == (6, 6) and p["U_g"].shape == (6, 5 + 1)
    assert p["W_h"].shape == (6, 6) and p["U_h"].shape == (6, 4)
    assert dsm.init_params(small_cfg(past_response=False), rng)["U_g"].shape == (6, 5)


def test_similarity_examples(rng):
    q = rng.normal(size=(1, 4))
    q /= np.linalg.norm(q)
    other = np.array([[q[0, 1], -q[0, 0], 0.0, 0.0]])
    states = nk.Tensor(np.vstack([q, other, q]))
    s = dsm.similarity(nk.Tensor(q), states).data
    assert s[0, 0] == pytest.approx(1.0) and s[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert s[0, 0] == s[0, 2]
    with pytest.raises(nk.ContractError):
        dsm.similarity(nk.Tensor(q), nk.Tensor(np.zeros((0, 4))))


def test_aggregate_examples(rng):
    states = nk.Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(dsm.aggregate(nk.Tensor([[0.0, 1.0, 0.0]]), states).data[0],
                                  states.data[1])
    same = nk.Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
    np.testing.assert_allclose(dsm.aggregate(nk.Tensor([[0.2, 0.5, 0.3]]), same).data[0], same.data[0])
    two = nk.Tensor(states.data[:2])
    np.testing.assert_allclose(dsm.aggregate(nk.Tensor([[0.5, 0.5]]), two).data[0],
                               states.data[:2].mean(axis=0))


def test_predict_examples(rng):
    cfg = small_cfg()
    params = dsm.init_params(cfg, rng)
    o_g, o_h = nk.Tensor(rng.normal(size=(1, 6))), nk.Tensor(rng.normal(size=(1, 6)))
    p_t = nk.Tensor(rng.normal(size=(1, 5)))
    y = dsm.predict(params, o_g, o_h, p_t, cfg).item()
    assert 0.0 < y < 1.0
    o_h2 = nk.Tensor(o_h.data + 1e-3)
    assert dsm.predict(params, o_g, o_h2, p_t, cfg).item() != y
    for k in ("out_W", "out_b"):
        params[k].data[...] = 0.0
    assert dsm.predict(params, o_g, o_h, p_t, cfg).item() == 0.5


# ---- attention invariants

@given(st.integers(2, 200), st.floats(0.0, 3.0), st.sampled_from(["shift", "scale"]))
def test_attention_rows_sum_to_one(t, lam, form):
    rng = np.random.default_rng(t)
    s = nk.Tensor(rng.normal(scale=3.0, size=(1, t - 1)))
    for attention in (True, False):
        a = dsm.decay_attention(s, lam, attention, form).data
        assert abs(a.sum() - 1.0) <= 1e-12 and np.all(a >= 0)


@given(st.integers(3, 200), st.floats(0.01, 3.0), st.sampled_from(["shift", "scale"]))
def test_disabled_attention_strictly_increasing(t, lam, form):
    if form == "scale":
        # exp(-lam*D) drops below float resolution next to 1 for old steps
        assume(lam * (t - 2) <= 30)
    a = dsm.decay_attention(nk.Tensor(np.zeros((1, t - 1))), lam, False, form).data[0]
    assert np.all(np.diff(a) > 0)


def test_disabled_attention_uniform_at_zero():
    a = dsm.decay_attention(nk.Tensor(np.zeros((1, 9))), 0.0, False).data
    np.testing.assert_allclose(a, 1 / 9, rtol=1e-15)


def test_large_lambda_collapses_onto_last_step():
    for t in (2, 3, 50, 200):
        a = dsm.decay_attention(nk.Tensor(np.zeros((1, t - 1))), 30.0, False).data[0]
        assert a[-1] > 1 - 1e-9


def test_scale_form_does_not_collapse():
    # the multiplicative form keeps old logits near 0, so old steps keep weight
    a = dsm.decay_attention(nk.Tensor(np.zeros((1, 9))), 30.0, False, form="scale").data[0]
    assert a[-1] < 0.5


# ---- batched forward against the step-by-step reference

@pytest.mark.parametrize("kw", [
    {}, {"attention": False}, {"decay": 0.0}, {"decay_form": "scale"}, {"use_code": False},
    {"use_problem": False}, {"literal_recurrence": True}, {"past_response": False},
    {"query_activation": "linear"}, {"fusion_dim": 3},
])
def test_batched_forward_matches_reference(rng, kw):
    cfg = small_cfg(**kw)
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg)
    pred, _ = dsm.forward_sequence(params, problems, responses, codes, mask, cfg)
    for b in range(problems.shape[0]):
        ref = dsm.reference_predictions(params, problems[b], responses[b], codes[b], cfg)
        np.testing.assert_allclose(pred.data[b, 1:], [r.item() for r in ref], rtol=1e-12, atol=1e-14)


def test_loss_is_masked_bce(rng):
    cfg = small_cfg()
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg)
    mask[1, 4:] = False
    pred, loss = dsm.forward_sequence(params, problems, responses, codes, mask, cfg)
    tm = mask.copy()
    tm[:, 0] = False
    p = pred.data[tm]
    r = responses[tm]
    assert loss.item() == pytest.approx(-(r * np.log(p) + (1 - r) * np.log(1 - p)).sum(), rel=1e-12)


def test_two_step_window(rng):
    cfg = small_cfg()
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg, n=1, length=2)
    pred, w = dsm.forward_sequence(params, problems, responses, codes, mask, cfg, return_attention=True)[::2]
    assert w["g"].data[0, 1, 0] == 1.0 and w["h"].data[0, 1, 0] == 1.0


def test_all_padded_batch_is_data_error(rng):
    cfg = small_cfg()
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg)
    mask[:, 1:] = False
    with pytest.raises(DataError):
        dsm.forward_sequence(params, problems, responses, codes, mask, cfg)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.sampled_from(["shift", "scale"]))
def test_causality(seed, t, form):
    rng = np.random.default_rng(seed)
    cfg = small_cfg(decay_form=form, literal_recurrence=bool(seed % 2))
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg, n=2, length=7)
    base = dsm.forward_sequence(params, problems, responses, codes, mask, cfg)[0].data
    p2, c2, r2 = problems.data.copy(), codes.data.copy(), responses.copy()
    p2[:, t + 1:] = rng.normal(size=p2[:, t + 1:].shape)    # problems after t
    c2[:, t:] = rng.normal(size=c2[:, t:].shape)            # codes at and after t
    r2[:, t:] = 1 - r2[:, t:]                               # responses at and after t
    out = dsm.forward_sequence(params, nk.Tensor(p2), r2, nk.Tensor(c2), mask, cfg)[0].data
    np.testing.assert_array_equal(out[:, :t + 1], base[:, :t + 1])


def test_full_gradcheck(rng):
    cfg = dsm.DsmConfig(problem_dim=8, code_dim=8, hidden_dim=8)
    params = dsm.init_params(cfg, rng)
    problems, responses, codes, mask = batch(rng, cfg, n=2, length=6)
    plist = list(params.values()) + [problems, codes]
    err = nk.gradcheck(lambda: dsm.forward_sequence(params, problems, responses, codes, mask, cfg)[1],
                       plist, rng, n_coords=150)
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = small_cfg(decay=0.3, attention=False)
    params = dsm.init_params(cfg, rng)
    dsm.save_checkpoint(tmp_path / "m.npz", params, cfg, extra={"seed": 3})
    arrays, cfg2, extra = dsm.load_checkpoint(tmp_path / "m.npz")
    assert cfg2 == cfg and extra == {"seed": 3}
    for k, v in params.items():
        np.testing.assert_array_equal(arrays[k], v.data)


def test_config_validation():
    for bad in (dict(decay=-1.0), dict(decay_form="x"), dict(use_code=False, use_problem=False),
                dict(literal_recurrence=True, use_code=False)):
        with pytest.raises(ValueError):
            replace(dsm.DsmConfig(), **bad).validate()
