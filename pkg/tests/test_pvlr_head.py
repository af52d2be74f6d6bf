import math

import numpy as np
import pytest

from src.attention import AttentionBlock
from src.autodiff.tensor import Tensor, backward
from src.data.synthdata import DatasetSpec
from src.head.config import HeadConfig
from src.head.pvlr_head import (
    AlphaParam,
    IfmMlp,
    PvlrHead,
    cap_forward,
    dma_forward,
    ifm_interact,
    kap_forward,
    predict,
    relation_aggregate,
)
from src.text.text_sim import LabelVocabulary
from src.training.experiments import GRADCHECK_VARIANTS, gradcheck_case, run_gradcheck
from src.utils.errors import ConfigError, DimensionError
from tests.conftest import make_head


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def attend(block, E, Z):
    attn = softmax((E @ block.W_Q.data) @ (Z @ block.W_K.data).T / math.sqrt(block.d))
    return attn @ (Z @ block.W_V.data), attn


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@pytest.fixture
def small_spec():
    return DatasetSpec(C=3, d=4, M=5, K=1, core_labels=1, n_pl=1)


def test_hand_trace_all_toggles_on():
    spec = DatasetSpec(C=2, d=2, M=2, K=1, core_labels=1, n_pl=1)
    head = make_head(spec, L=2)
    weights = {
        "kap": [[0.5, -0.2], [0.1, 0.3]],
        "cap.cross": [[0.2, 0.4], [-0.3, 0.1]],
        "cap.self": [[0.6, 0.0], [0.2, -0.5]],
        "dma.v2s": [[0.3, 0.3], [-0.1, 0.2]],
        "dma.s2v": [[-0.4, 0.1], [0.5, 0.2]],
    }
    for block in (head.kap_block, head.cap_cross, head.cap_self, head.v2s_block, head.s2v_block):
        w = np.array(weights[block.name])
        block.W_Q.data, block.W_K.data, block.W_V.data = w.copy(), w.T.copy(), np.eye(2) + 0.5 * w
    head.ifm.W1.data = np.array([[0.1, -0.2], [0.3, 0.1], [0.0, 0.2], [-0.1, 0.4]])
    head.ifm.b1.data = np.array([0.05, -0.05])
    head.ifm.W2.data = np.array([[0.2, 0.1], [-0.3, 0.5]])
    head.ifm.b2.data = np.array([0.01, 0.02])
    head.alpha.raw.data = np.array(0.3)
    for l, p in enumerate(head.prompt_bank.prompts):
        p.data = np.array([0.1 * (l + 1), -0.05])
    X = np.array([[1.0, -0.5], [0.25, 2.0]])

    enc = head.encoder
    mean_tokens = (sum(p.data for p in head.prompt_bank.prompts) + head.words.data) / 3
    T_soft = np.tanh(mean_tokens @ enc.W1.data + enc.b1.data) @ enc.W2.data + enc.b2.data
    T_ka, M_ka = attend(head.kap_block, head.T_hard.data, head.T_hard.data)
    conditioned, _ = attend(head.cap_cross, T_soft, X)
    T_cap, M_ca = attend(head.cap_self, conditioned, conditioned)
    hidden = np.maximum(0.0, np.hstack([T_ka, T_cap]) @ head.ifm.W1.data + head.ifm.b1.data)
    T_ca = T_cap + hidden @ head.ifm.W2.data + head.ifm.b2.data
    alpha = sigmoid(0.3)
    T = (alpha * M_ka + (1 - alpha) * M_ca) @ T_ca
    T_vs, _ = attend(head.v2s_block, T, X)
    x_sv = attend(head.s2v_block, X, T)[0].mean(axis=0)
    expected = sigmoid(T_vs @ x_sv)

    out = head.forward(Tensor(X))
    np.testing.assert_allclose(out.T_soft.data, T_soft, atol=1e-12)
    np.testing.assert_allclose(out.T_ca.data, T_ca, atol=1e-12)
    np.testing.assert_allclose(out.T.data, T, atol=1e-12)
    np.testing.assert_allclose(out.probs.data, expected, atol=1e-12)


def test_kap_single_label_and_identical_rows(rng):
    block = AttentionBlock("kap", 3, rng)
    _, M = kap_forward(block, Tensor(rng.normal(size=(1, 3))))
    np.testing.assert_array_equal(M.data, [[1.0]])
    row = rng.normal(size=3)
    _, M = kap_forward(block, Tensor(np.vstack([row, row, rng.normal(size=3)])))
    np.testing.assert_allclose(M.data[0], M.data[1], atol=1e-15)


def test_kap_is_static_across_samples(small_spec, rng):
    head = make_head(small_spec)
    a = head.forward(Tensor(rng.normal(size=(5, 4))))
    b = head.forward(Tensor(rng.normal(size=(5, 4))))
    assert np.array_equal(a.T_ka.data, b.T_ka.data)
    assert np.array_equal(a.M_ka.data, b.M_ka.data)
    assert not np.allclose(a.M_ca.data, b.M_ca.data)


def test_cap_single_visual_token(rng):
    cross, self_block = AttentionBlock("c", 3, rng), AttentionBlock("s", 3, rng)
    X = rng.normal(size=(1, 3))
    T_soft = Tensor(rng.normal(size=(4, 3)))
    T_ca, M_ca = cap_forward(cross, self_block, T_soft, Tensor(X))
    # every conditioned row is X W_V, so self-attention over them is uniform
    np.testing.assert_allclose(M_ca.data, np.full((4, 4), 0.25), atol=1e-12)
    conditioned = X @ cross.W_V.data
    np.testing.assert_allclose(T_ca.data, np.tile(conditioned @ self_block.W_V.data, (4, 1)), atol=1e-12)


def test_cap_without_cross_block_relates_the_bare_prompts(rng):
    self_block = AttentionBlock("s", 3, rng)
    T_soft = rng.normal(size=(4, 3))
    T_ca, M_ca = cap_forward(None, self_block, Tensor(T_soft), Tensor(rng.normal(size=(2, 3))))
    expected, expected_map = attend(self_block, T_soft, T_soft)
    np.testing.assert_allclose(T_ca.data, expected, atol=1e-12)
    np.testing.assert_allclose(M_ca.data, expected_map, atol=1e-12)


def test_pre_interaction_prompts_follow_the_sample(small_spec, rng):
    head = make_head(small_spec, prompting_mode="pre", L=3)
    X = rng.normal(size=(5, 4))
    a, b = head.forward(Tensor(X)), head.forward(Tensor(X.copy()))
    assert np.array_equal(a.T_soft.data, b.T_soft.data)
    c = head.forward(Tensor(rng.normal(size=(5, 4))))
    assert not np.allclose(a.T_soft.data, c.T_soft.data)


def test_pre_interaction_without_prompts_matches_post(small_spec, rng):
    pre = make_head(small_spec, prompting_mode="pre", L=0)
    post = make_head(small_spec, prompting_mode="post", L=0)
    X = Tensor(rng.normal(size=(5, 4)))
    np.testing.assert_allclose(pre.forward(X).probs.data, post.forward(X).probs.data, atol=1e-12)


def test_pre_interaction_needs_matching_token_width(small_spec):
    with pytest.raises(ConfigError):
        HeadConfig(C=3, d=4, M=5, d_tok=6, prompting_mode="pre").validate()
    with pytest.raises(ConfigError):
        HeadConfig(C=3, d=4, M=5, prompting_mode="pre", cap_prompts="hard").validate()


def test_ifm_residual_identity(rng):
    mlp = IfmMlp("ifm", 3, rng)
    T_ka, T_ca = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    full = ifm_interact(mlp, T_ka, T_ca).data
    hidden = np.maximum(0.0, np.hstack([T_ka.data, T_ca.data]) @ mlp.W1.data + mlp.b1.data)
    np.testing.assert_allclose(full - T_ca.data, hidden @ mlp.W2.data + mlp.b2.data, atol=1e-12)
    mlp.W2.data = np.zeros((3, 3))
    np.testing.assert_array_equal(ifm_interact(mlp, T_ka, T_ca).data, T_ca.data)
    with pytest.raises(DimensionError):
        ifm_interact(mlp, T_ka, Tensor(np.ones((3, 3))))


def test_relation_aggregate(rng):
    M_ka, M_ca = softmax(rng.normal(size=(3, 3))), softmax(rng.normal(size=(3, 3)))
    T_ca = rng.normal(size=(3, 2))

    saturated = AlphaParam(raw=50.0)
    T, _ = relation_aggregate(saturated, Tensor(M_ka), Tensor(M_ca), Tensor(T_ca))
    np.testing.assert_allclose(T.data, M_ka @ T_ca, atol=1e-12)

    T, _ = relation_aggregate(AlphaParam(), Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(T_ca))
    np.testing.assert_allclose(T.data, T_ca, atol=1e-15)

    half = AlphaParam()
    assert half.alpha == 0.5
    T, blended = relation_aggregate(half, Tensor(M_ka), Tensor(M_ca), Tensor(T_ca))
    np.testing.assert_allclose(blended.data, 0.5 * (M_ka + M_ca), atol=1e-15)
    np.testing.assert_allclose(T.data, 0.5 * (M_ka + M_ca) @ T_ca, atol=1e-12)


def test_blend_stays_row_stochastic_for_random_inputs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        C = int(rng.integers(1, 9))
        scale = rng.choice([0.1, 1.0, 10.0])
        M_ka = softmax(scale * rng.normal(size=(C, C)))
        M_ca = softmax(scale * rng.normal(size=(C, C)))
        alpha = AlphaParam(raw=float(rng.uniform(-30.0, 30.0)))
        _, blended = relation_aggregate(alpha, Tensor(M_ka), Tensor(M_ca), Tensor(rng.normal(size=(C, 2))))
        assert (blended.data >= 0.0).all()
        np.testing.assert_allclose(blended.data.sum(axis=1), 1.0, atol=1e-9)


def test_dma_single_token_and_single_label(rng):
    v2s, s2v = AttentionBlock("v", 3, rng), AttentionBlock("s", 3, rng)
    T = rng.normal(size=(4, 3))
    X = rng.normal(size=(1, 3))
    result = dma_forward(v2s, s2v, Tensor(T), Tensor(X))
    attended, _ = attend(s2v, X, T)
    np.testing.assert_allclose(result.x_sv.data, attended[0], atol=1e-12)

    result = dma_forward(v2s, s2v, Tensor(T[:1]), Tensor(rng.normal(size=(5, 3))))
    np.testing.assert_array_equal(result.s2v_map.data, np.ones((5, 1)))


def test_dma_switched_off_scores_gap_features(small_spec, rng):
    head = make_head(small_spec, use_v2s=False, use_s2v=False)
    assert head.v2s_block is None and head.s2v_block is None
    X = rng.normal(size=(5, 4))
    out = head.forward(Tensor(X))
    np.testing.assert_allclose(out.probs.data, sigmoid(out.T.data @ X.mean(axis=0)), atol=1e-12)


def test_predict():
    T_vs = Tensor(np.ones((3, 2)))
    np.testing.assert_array_equal(predict(Tensor(np.zeros(2)), T_vs).data, [0.5, 0.5, 0.5])
    x = np.array([math.sqrt(math.log(3.0)), 0.0])
    np.testing.assert_allclose(predict(Tensor(x), Tensor(np.tile(x, (2, 1)))).data, [0.75, 0.75], atol=1e-12)
    with pytest.raises(DimensionError):
        predict(Tensor(np.zeros(3)), T_vs)


def test_predict_matches_dot_sigmoid(rng):
    x, T = rng.normal(size=4), rng.normal(size=(6, 4))
    np.testing.assert_allclose(predict(Tensor(x), Tensor(T)).data, sigmoid(T @ x), atol=1e-12)


def test_classifier_learning_with_zero_weights_is_uninformative(small_spec, rng):
    head = make_head(small_spec, head_mode="classifier_learning")
    head.cls_W.data = np.zeros_like(head.cls_W.data)
    out = head.forward(Tensor(rng.normal(size=(5, 4))))
    np.testing.assert_array_equal(out.probs.data, np.full(3, 0.5))


def test_label_rep_centers_ignore_the_sample(small_spec, rng):
    head = make_head(small_spec, head_mode="label_rep")
    a = head.forward(Tensor(rng.normal(size=(5, 4))))
    b = head.forward(Tensor(rng.normal(size=(5, 4))))
    assert np.array_equal(a.T_vs.data, b.T_vs.data)
    assert not np.allclose(a.probs.data, b.probs.data)


def test_head_modes_disagree(small_spec, rng):
    X = Tensor(rng.normal(size=(5, 4)))
    probs = {mode: make_head(small_spec, head_mode=mode).forward(X).probs.data
             for mode in ("pvlr", "classifier_learning", "label_rep", "label_rep_dma")}
    modes = list(probs)
    for i, a in enumerate(modes):
        for b in modes[i + 1:]:
            assert not np.allclose(probs[a], probs[b]), (a, b)


def test_toggling_kap_changes_predictions(small_spec, rng):
    X = Tensor(rng.normal(size=(5, 4)))
    full = make_head(small_spec).forward(X).probs.data
    no_kap = make_head(small_spec, use_kap=False).forward(X).probs.data
    assert not np.allclose(full, no_kap)


def test_only_configured_components_exist(small_spec):
    cap_only = make_head(small_spec, use_kap=False)
    assert cap_only.kap_block is None and cap_only.ifm is None and cap_only.alpha is None
    no_ifm = make_head(small_spec, use_channel_interaction=False, use_relation_aggregation=False)
    assert no_ifm.ifm is None and no_ifm.alpha is None
    names = make_head(small_spec).named_parameters()
    assert {"ifm.alpha_raw", "cap.prompt0", "kap.W_Q", "dma.s2v.W_V"} <= set(names)
    with pytest.raises(ConfigError):
        make_head(small_spec, use_kap=False, use_cap=False)


def test_label_permutation_permutes_predictions(small_spec, rng):
    vocab = LabelVocabulary.default(3)
    perm = [2, 0, 1]
    X = Tensor(rng.normal(size=(5, 4)))
    base = make_head(small_spec, vocab=vocab).forward(X).probs.data
    permuted = make_head(small_spec, vocab=vocab.permuted(perm)).forward(X).probs.data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-9)


def test_hard_cap_uses_the_template_prompts(small_spec, rng):
    head = make_head(small_spec, cap_prompts="hard")
    assert head.prompt_bank is None
    out = head.forward(Tensor(rng.normal(size=(5, 4))))
    assert np.array_equal(out.T_soft.data, head.T_hard.data)


def test_feature_shape_is_checked(small_spec):
    head = make_head(small_spec)
    with pytest.raises(DimensionError):
        head.forward(Tensor(np.ones((5, 3))))


def test_every_parameter_group_passes_the_gradient_check():
    reports = run_gradcheck(progress=False)
    assert set(reports) == set(GRADCHECK_VARIANTS)
    for variant, report in reports.items():
        assert report.passed(1e-4), (variant, report.worst())


def test_gradient_check_case_exercises_the_blend_weight():
    case = gradcheck_case("pvlr_post")
    shared = case.head.prepare()
    out = case.head.forward(case.data.train.features(0), shared)
    assert np.abs(out.M_ka.data - out.M_ca.data).max() > 0.05
    backward(case.objective(case.head.parameters()))
    assert abs(float(case.head.alpha.raw.grad)) > 1e-6


def test_static_cap_ignores_the_sample(tiny_spec, rng):
    head = make_head(tiny_spec, use_cap_visual=False, use_v2s=False, use_s2v=False)
    assert head.cap_cross is None
    assert all(not p.name.startswith("cap.cross") for p in head.parameters())
    shared = head.prepare()
    a = head.forward(Tensor(rng.normal(size=(tiny_spec.M, tiny_spec.d))), shared)
    b = head.forward(Tensor(rng.normal(size=(tiny_spec.M, tiny_spec.d))), shared)
    np.testing.assert_array_equal(a.T_ca.data, b.T_ca.data)
    np.testing.assert_array_equal(a.M_ca.data, b.M_ca.data)
    # the prediction still sees X through the pooled visual vector
    assert not np.array_equal(a.probs.data, b.probs.data)


def test_static_cap_rejects_pre_interaction():
    with pytest.raises(ConfigError):
        HeadConfig(C=3, d=4, M=5, prompting_mode="pre", use_cap_visual=False).validate()


def test_identity_init_starts_as_the_static_centers(tiny_spec, rng):
    head = make_head(tiny_spec, attention_residual=True, init_scheme="identity", attention_gain=32.0)
    for block in head.attention_blocks():
        np.testing.assert_array_equal(block.W_V.data, 0.0)
        np.testing.assert_allclose(block.W_Q.data, np.sqrt(32.0) * np.eye(tiny_spec.d))
    np.testing.assert_array_equal(head.ifm.W2.data, 0.0)
    X = rng.normal(size=(tiny_spec.M, tiny_spec.d))
    out = head.forward(Tensor(X))
    np.testing.assert_allclose(out.T_cap.data, out.T_soft.data, atol=1e-12)
    np.testing.assert_allclose(out.T_vs.data, out.T.data, atol=1e-12)
    np.testing.assert_allclose(out.x_sv.data, X.mean(axis=0), atol=1e-12)
    # gain 32 keeps the relation maps far from uniform
    assert np.ptp(out.M_ka.data, axis=1).min() > 0.1


def test_trained_full_head_separates_labels(tiny_config, tiny_data):
    from src.training import Trainer

    config = tiny_config.replace(**{"head.attention_residual": True, "head.init_scheme": "identity",
                                    "head.attention_gain": 8.0})
    trainer = Trainer(config, tiny_data)
    trainer.fit(progress=False)
    out = trainer.head.forward(tiny_data.test.features(0))
    assert np.ptp(out.probs.data) > 1e-3
    assert np.ptp(out.T_vs.data, axis=0).max() > 1e-3
