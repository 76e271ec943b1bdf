import numpy as np
import pytest

from attn_tta import autodiff as ad
from attn_tta.data import LabeledSample
from attn_tta.engine import (AdaptationPolicy, TTAEngine, adapt_and_predict,
                             read_jsonl, run_stream, select_params, write_jsonl)
from attn_tta.objective import attention_entropy
from attn_tta.optim import OptimizerConfig, OptimizerState, adam_step, sgd_step
from attn_tta.vit import VisionTransformer, VitConfig

from oracles import central_difference, reference_entropy_loss, reference_forward

TOY = VitConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, num_layers=2,
                num_register_tokens=1, num_classes=3, seed=11)


def toy_model(seed=11):
    return VisionTransformer(VitConfig(**{**TOY.__dict__, "seed": seed}))


def toy_stream(n, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledSample(i, rng.uniform(0, 1, (3, 8, 8)), int(rng.integers(3))) for i in range(n)]


def policy(kind="adam", lr=1e-2, reset="never", **kw):
    return AdaptationPolicy(OptimizerConfig(kind, lr), reset_optimizer_state=reset, **kw)


def entropy_grads(model, x):
    loss, _ = attention_entropy(model.run(x).attentions[-1], model.config.num_special)
    return ad.backward(ad.tensor_sum(loss), model.params)


# ---------------------------------------------------------------- adam_step

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimizerState("adam", 0.1)
    adam_step(st, p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert st.t == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -1e-3, 2.5, -7.0, 1e-9])
    p = {"w": np.zeros(5)}
    st = OptimizerState("adam", 1e-3, 0.99, 0.999, 1e-8)
    adam_step(st, p, {"w": g})
    np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)


def test_adam_two_steps_match_scalar_recurrence():
    lr, b1, b2, eps, g = 0.01, 0.99, 0.999, 1e-8, 0.37
    p = {"w": np.array([0.5])}
    st = OptimizerState("adam", lr, b1, b2, eps)
    adam_step(st, p, {"w": np.array([g])})
    adam_step(st, p, {"w": np.array([g])})
    theta, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    assert p["w"][0] == pytest.approx(theta, abs=1e-15)
    assert st.t == 2


def test_carried_state_changes_update():
    gs = [np.array([1.0, -0.5]), np.array([-0.2, 0.4]), np.array([0.3, 0.3])]
    carried = OptimizerState("adam", 0.01)
    final = {}
    for mode in ("carried", "reset"):
        st = carried if mode == "carried" else None
        for g in gs:
            p = {"w": np.zeros(2)}
            if mode == "reset":
                st = OptimizerState("adam", 0.01)
            adam_step(st, p, {"w": g})
        final[mode] = p["w"].copy()
    assert not np.array_equal(final["carried"], final["reset"])


def test_adam_key_mismatch():
    st = OptimizerState("adam", 0.1)
    with pytest.raises(KeyError):
        adam_step(st, {"a": np.zeros(1)}, {"b": np.zeros(1)})
    adam_step(st, {"a": np.zeros(1)}, {"a": np.ones(1)})
    with pytest.raises(KeyError):
        adam_step(st, {"c": np.zeros(1)}, {"c": np.ones(1)})


def test_sgd_step():
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(OptimizerState("sgd", 0.5), p, {"w": np.array([2.0, -2.0])})
    assert np.array_equal(p["w"], [0.0, 3.0])


# ---------------------------------------------------------------- episodes

def test_zero_lr_is_null_update():
    m = toy_model()
    x = toy_stream(1)[0].image
    for kind in ("sgd", "adam"):
        rec, _ = adapt_and_predict(m, m.snapshot(), x, policy(kind, 0.0), OptimizerState("adam" if kind == "adam" else "sgd", 0.0))
        assert rec.predicted == rec.baseline_predicted
        assert rec.loss_after == rec.loss_before
        assert rec.entropies_after == rec.entropies_before


def test_sgd_update_matches_finite_difference_gradient():
    m = toy_model()
    x = toy_stream(1, seed=3)[0].image
    before = {k: v.values.copy() for k, v in m.params.items()}
    lr = 1e-2
    pol = policy("sgd", lr, "per-sample", reset_model_params=False)
    adapt_and_predict(m, m.snapshot(), x, pol, OptimizerState("sgd", lr))
    ref = {k: v.astype(np.longdouble) for k, v in before.items()}

    def f():
        return reference_entropy_loss(reference_forward(ref, TOY, x, np.longdouble)[1][-1],
                                      TOY.num_special)

    for name in ("cls_token", "blocks.1.attn.qkv.weight", "blocks.0.mlp.fc2.weight", "pos_embed"):
        coords = np.random.default_rng(0).choice(before[name].size, min(10, before[name].size),
                                                 replace=False)
        g_fd = central_difference(f, ref[name], coords).astype(float)
        step = m.params[name].values.ravel()[coords] - before[name].ravel()[coords]
        np.testing.assert_allclose(step, -lr * g_fd, rtol=1e-5, atol=lr * 1e-10)


def test_adam_episode_first_step_closed_form():
    m = toy_model()
    x = toy_stream(1, seed=4)[0].image
    before = {k: v.values.copy() for k, v in m.params.items()}
    grads = entropy_grads(m, x)
    lr = 1e-3
    pol = policy("adam", lr, "per-sample", reset_model_params=False)
    adapt_and_predict(m, m.snapshot(), x, pol, OptimizerState("adam", lr))
    for name, g in grads.items():
        expected = -lr * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(m.params[name].values - before[name], expected, rtol=0, atol=1e-12)


def test_reset_restores_bit_exact_and_state_carries():
    m = toy_model()
    snap = m.snapshot()
    eng = TTAEngine(m, policy("adam", 1e-2, "never"))
    recs = list(eng.run(toy_stream(20)))
    assert m.snapshot().equals(snap)
    assert eng.state.t == 20
    assert any(r.loss_after != r.loss_before for r in recs)


def test_step_counter_counts_steps_per_sample():
    m = toy_model()
    eng = TTAEngine(m, policy("adam", 1e-2, "never", steps_per_sample=3))
    list(eng.run(toy_stream(5)))
    assert eng.state.t == 15


def test_per_sample_reset_gives_fresh_state():
    m = toy_model()
    eng = TTAEngine(m, policy("adam", 1e-2, "per-sample"))
    list(eng.run(toy_stream(3)))
    assert eng.state.t == 0 and not eng.state.m


def test_repeated_sample_is_pure_under_sgd():
    m = toy_model()
    s = toy_stream(1, seed=9)[0]
    eng = TTAEngine(m, policy("sgd", 0.5, "per-sample"))
    a = eng.episode(s.image, s.sample_id, s.label)
    list(eng.run(toy_stream(4, seed=10)))
    b = eng.episode(s.image, s.sample_id, s.label)
    assert a.outcome() == b.outcome()


def outcomes(recs):
    return {r.sample_id: r.outcome() for r in recs}


def test_order_invariance_only_when_state_resets():
    stream = toy_stream(12, seed=5)
    perm = [stream[i] for i in np.random.default_rng(1).permutation(len(stream))]
    m = toy_model()
    reset = policy("adam", 5e-2, "per-sample")
    assert outcomes(run_stream(m, stream, reset)) == outcomes(run_stream(m, perm, reset))
    carry = policy("adam", 5e-2, "never")
    assert outcomes(run_stream(m, stream, carry)) != outcomes(run_stream(m, perm, carry))


def test_empty_stream():
    assert run_stream(toy_model(), [], policy()) == []


def test_non_finite_episode_rolls_back():
    m = toy_model()
    snap = m.snapshot()
    eng = TTAEngine(m, policy("adam", 1e-2, "never"))
    list(eng.run(toy_stream(3)))
    saved = eng.state.copy()
    bad = np.full((3, 8, 8), np.nan)
    with np.errstate(invalid="ignore"):
        rec = eng.episode(bad, 99, 0)
    assert rec.failed and "non-finite" in rec.error
    assert m.snapshot().equals(snap)
    assert eng.state.t == saved.t
    for k in saved.m:
        assert np.array_equal(eng.state.m[k], saved.m[k])
        assert np.array_equal(eng.state.v[k], saved.v[k])


def test_directional_derivative_of_sgd_update_is_negative():
    m = toy_model()
    x = toy_stream(1, seed=6)[0].image
    grads = entropy_grads(m, x)
    direction = {k: -g for k, g in grads.items()}
    ref = {k: v.values.astype(np.longdouble) for k, v in m.params.items()}

    def loss_at(eps):
        moved = {k: ref[k] + eps * direction[k] for k in ref}
        return reference_entropy_loss(reference_forward(moved, TOY, x, np.longdouble)[1][-1],
                                      TOY.num_special)

    h = 1e-6
    dd = float((loss_at(h) - loss_at(-h)) / (2 * h))
    gnorm2 = sum(float((g * g).sum()) for g in grads.values())
    assert gnorm2 > 0
    assert dd < 0
    assert dd == pytest.approx(-gnorm2, rel=1e-5)


def test_param_filters():
    names = toy_model().param_names
    att = select_params(names, "attention-only")
    ln = select_params(names, "layernorm-only")
    assert att and all(".attn." in n for n in att)
    assert set(ln) == {n for n in names if "norm" in n}
    assert select_params(names, "all") == names


def test_filtered_adaptation_touches_only_selected():
    m = toy_model()
    before = m.snapshot().as_dict()
    pol = policy("sgd", 0.1, "per-sample", reset_model_params=False, param_filter="attention-only")
    TTAEngine(m, pol).episode(toy_stream(1)[0].image)
    changed = {n for n, v in before.items() if not np.array_equal(v, m.params[n].values)}
    assert changed and all(".attn." in n for n in changed)


def test_records_roundtrip_jsonl(tmp_path):
    recs = run_stream(toy_model(), toy_stream(3), policy())
    path = tmp_path / "ep.jsonl"
    write_jsonl(recs, path)
    assert [r.outcome() for r in read_jsonl(path)] == [r.outcome() for r in recs]


def test_entropies_within_bounds():
    import math
    recs = run_stream(toy_model(), toy_stream(5), policy("adam", 0.1))
    p = TOY.num_patches
    for r in recs:
        for e in r.entropies_before + r.entropies_after:
            assert 0.0 <= e <= math.log(p) + 1e-12


def test_policy_validation():
    with pytest.raises(ValueError):
        AdaptationPolicy(steps_per_sample=0)
    with pytest.raises(ValueError):
        AdaptationPolicy(reset_optimizer_state="sometimes")
    with pytest.raises(ValueError):
        OptimizerConfig("rmsprop")
