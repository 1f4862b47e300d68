import numpy as np
import pytest

from pyformer import tensor as T
from pyformer.gradcheck import grad_check
from pyformer.model import (
    PyFormerConfig,
    add_positional,
    attention,
    classify_head,
    conv_block,
    encoder_layer,
    forward,
    init_params,
    integrate_levels,
    load_checkpoint,
    parameter_count,
    pyramid_level_input,
    save_checkpoint,
)
from pyformer.tensor import Tensor
from pyformer.train import loss

from oracles import independent_param_count, naive_conv3d


@pytest.fixture(scope="module")
def cfg():
    return PyFormerConfig(num_classes=3)


@pytest.fixture(scope="module")
def params(cfg):
    return init_params(cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def ref_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_encoder(H, p, heads, prefix):
    """Attention, then FF, then residual, written directly in numpy."""
    N, d = H.shape
    dh = d // heads
    q = H @ p[prefix + "wq"] + p[prefix + "bq"]
    k = H @ p[prefix + "wk"] + p[prefix + "bk"]
    v = H @ p[prefix + "wv"] + p[prefix + "bv"]
    ctx = np.zeros((N, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = ref_softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
        ctx[:, sl] = a @ v[:, sl]
    h_att = ctx @ p[prefix + "wo"] + p[prefix + "bo"]
    hidden = np.maximum(h_att @ p[prefix + "ff1.weight"] + p[prefix + "ff1.bias"], 0)
    h_ff = hidden @ p[prefix + "ff2.weight"] + p[prefix + "ff2.bias"]
    return H + h_ff


def tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


# --- config --------------------------------------------------------------


def test_config_defaults(cfg):
    assert (cfg.S, cfg.B_star, cfg.num_levels, cfg.num_layers, cfg.num_heads, cfg.d_model) == (8, 16, 2, 2, 4, 64)
    assert cfg.ff_hidden == 256 and cfg.lam == 0.01 and not cfg.use_layernorm
    assert cfg.d_head == 16


@pytest.mark.parametrize(
    "kw",
    [dict(num_heads=6), dict(S=5), dict(B_star=9), dict(lam=-1.0), dict(num_classes=1)],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        PyFormerConfig(**{"num_classes": 3, **kw})


def test_parameter_count_matches_closed_form(cfg, params):
    expected = independent_param_count(8, 16, 2, 2, 64, 256, 3)
    assert params.count == parameter_count(cfg) == expected


# --- level input and conv block -----------------------------------------


def test_level_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((8, 8, 16)))
    assert pyramid_level_input(x, 0) is x


def test_level_one_shape(rng):
    assert pyramid_level_input(Tensor(rng.standard_normal((8, 8, 16))), 1).shape == (4, 4, 8)


def test_level_indivisible_rejected(rng):
    with pytest.raises(ValueError):
        pyramid_level_input(Tensor(rng.standard_normal((5, 5, 4))), 1)


def test_conv_block_token_shape(params, rng):
    tokens = conv_block(Tensor(rng.standard_normal((8, 8, 16))), tensors(params), "level0.")
    assert tokens.shape == (16, 64)


def test_conv_block_zero_input_zero_bias(params):
    tokens = conv_block(Tensor(np.zeros((8, 8, 16))), tensors(params), "level0.")
    np.testing.assert_array_equal(tokens.data, 0.0)


def test_conv_block_matches_composed_oracle(rng):
    cfg = PyFormerConfig(num_classes=3, S=4, B_star=6, num_levels=1, d_model=8, num_heads=2, conv_filters=5)
    p = init_params(cfg, seed=4)
    for name in ("level0.conv1.bias", "level0.conv2.bias", "level0.res.bias"):
        p[name] = rng.standard_normal(p[name].shape)
    x = rng.standard_normal((4, 4, 6))
    vol = x.transpose(2, 0, 1)[None]  # (1, B, S, S)
    a1 = np.maximum(naive_conv3d(vol, p["level0.conv1.weight"], p["level0.conv1.bias"]), 0)
    c2 = naive_conv3d(a1, p["level0.conv2.weight"], p["level0.conv2.bias"])
    res = naive_conv3d(a1, p["level0.res.weight"], p["level0.res.bias"])
    expected = np.maximum(c2 + res, 0).reshape(8, 6).T
    got = conv_block(Tensor(x), tensors(p), "level0.").data
    assert np.max(np.abs(got - expected)) <= 1e-9


def test_add_positional(rng):
    tok = Tensor(rng.standard_normal((4, 8)))
    pos = Tensor(rng.standard_normal((4, 8)))
    np.testing.assert_array_equal(add_positional(tok, Tensor(np.zeros((4, 8)))).data, tok.data)
    np.testing.assert_array_equal(add_positional(Tensor(np.zeros((4, 8))), pos).data, pos.data)
    assert add_positional(Tensor(np.zeros((2, 4, 8))), pos).shape == (2, 4, 8)
    with pytest.raises(ValueError):
        add_positional(tok, Tensor(np.zeros((3, 8))))


# --- attention and encoder ----------------------------------------------


def test_attention_identical_tokens(params, rng):
    row = rng.standard_normal(64)
    H = Tensor(np.tile(row, (16, 1)))
    out, w = attention(H, tensors(params), 4, "level0.layer0.", return_weights=True)
    np.testing.assert_allclose(w.data, 1 / 16, atol=1e-15)
    np.testing.assert_allclose(out.data, np.tile(out.data[0], (16, 1)), atol=1e-12)


def test_attention_rows_sum_to_one(params, rng):
    _, w = attention(Tensor(rng.standard_normal((3, 16, 64))), tensors(params), 4, "level0.layer1.", return_weights=True)
    assert w.shape == (3, 4, 16, 16)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_encoder_zero_ff_is_identity(params, rng):
    p = tensors(params)
    p["level0.layer0.ff2.weight"] = Tensor(np.zeros((256, 64)))
    p["level0.layer0.ff2.bias"] = Tensor(np.zeros(64))
    H = Tensor(rng.standard_normal((16, 64)))
    assert np.array_equal(encoder_layer(H, p, 4, "level0.layer0.").data, H.data)


def test_encoder_matches_reference(params, rng):
    H = rng.standard_normal((16, 64))
    p = {k: v.copy() for k, v in params.items()}
    p["level0.layer0.bq"] = rng.standard_normal(64)
    p["level0.layer0.ff2.bias"] = rng.standard_normal(64)
    got = encoder_layer(Tensor(H), tensors(p), 4, "level0.layer0.").data
    assert np.max(np.abs(got - ref_encoder(H, p, 4, "level0.layer0."))) <= 1e-9


def test_encoder_shape_any_length(params, rng):
    for n in (1, 5, 16):
        assert encoder_layer(Tensor(rng.standard_normal((n, 64))), tensors(params), 4, "level0.layer0.").shape == (n, 64)


def test_attention_permutation_equivariant(params, rng):
    H = rng.standard_normal((16, 64))
    p = tensors(params)
    out = attention(Tensor(H), p, 4, "level0.layer0.").data
    for _ in range(5):
        perm = rng.permutation(16)
        permuted = attention(Tensor(H[perm]), p, 4, "level0.layer0.").data
        assert np.max(np.abs(permuted - out[perm])) <= 1e-9


# --- integration and head ------------------------------------------------


def test_integrate_levels_length(rng):
    seqs = [Tensor(rng.standard_normal((16, 64))), Tensor(rng.standard_normal((8, 64)))]
    feat = integrate_levels(seqs)
    assert feat.shape == (1536,)
    np.testing.assert_array_equal(feat.data[:1024], seqs[0].data.reshape(-1))
    assert not np.array_equal(integrate_levels(seqs[::-1]).data, feat.data)


def test_integrate_single_level_is_flatten(rng):
    s = Tensor(rng.standard_normal((4, 8)))
    np.testing.assert_array_equal(integrate_levels([s]).data, s.data.reshape(-1))


def test_integrate_missing_level():
    with pytest.raises(ValueError):
        integrate_levels([Tensor(np.zeros((4, 8)))], num_levels=2)


def test_head_zero_weights_uniform(rng):
    probs, pen = classify_head(Tensor(rng.standard_normal(10)), Tensor(np.zeros((10, 4))), Tensor(np.zeros(4)), 0.01)
    np.testing.assert_array_equal(probs.data, 0.25)
    assert pen.item() == 0.0


def test_head_penalty_value():
    W = np.zeros((4, 2))
    W[0, 0] = W[1, 1] = W[2, 0] = W[3, 1] = 1.0  # sum of squares 4
    _, pen = classify_head(Tensor(np.ones(4)), Tensor(W), Tensor(np.zeros(2)), 0.01)
    assert abs(pen.item() - 0.04) <= 1e-15


def test_head_sums_to_one(rng):
    probs, _ = classify_head(Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal(3)), 0.01)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-9)


def test_head_length_mismatch():
    with pytest.raises(ValueError):
        classify_head(Tensor(np.zeros(5)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)), 0.0)


# --- forward -------------------------------------------------------------


def test_forward_batch_independence(cfg, params, rng):
    x = rng.standard_normal((1, 8, 8, 16))
    one, _ = forward(params, cfg, x)
    two, _ = forward(params, cfg, np.concatenate([x, x]))
    assert two.shape == (2, 3)
    # equal up to BLAS blocking, which depends on the stacked row count
    assert np.array_equal(two.data[0], two.data[1])
    np.testing.assert_allclose(two.data[0], one.data[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(two.data.sum(-1), 1.0, atol=1e-9)


def test_forward_deterministic(cfg, params, rng):
    x = rng.standard_normal((3, 8, 8, 16))
    assert forward(params, cfg, x)[0].data.tobytes() == forward(params, cfg, x)[0].data.tobytes()


def test_forward_rejects_bad_batch(cfg, params):
    with pytest.raises(ValueError):
        forward(params, cfg, np.zeros((0, 8, 8, 16)))
    with pytest.raises(ValueError):
        forward(params, cfg, np.zeros((1, 8, 8, 8)))


def test_single_level_equals_flat_model(rng):
    cfg = PyFormerConfig(num_classes=4, S=5, B_star=6, num_levels=1, num_layers=2, num_heads=2, d_model=8)
    p = init_params(cfg, seed=2)
    x = rng.standard_normal((2, 5, 5, 6))
    # a non-pyramid transformer built directly on the raw patch
    pt = tensors(p)
    H = conv_block(Tensor(x), pt, "level0.") + pt["level0.pos"]
    for j in range(2):
        H = encoder_layer(H, pt, 2, f"level0.layer{j}.")
    flat = T.relu(T.reshape(H, (2, -1)))
    direct = T.softmax(T.matmul(flat, pt["head.weight"]) + pt["head.bias"], -1)
    assert np.array_equal(forward(p, cfg, x)[0].data, direct.data)


def test_layernorm_variant_runs(rng):
    cfg = PyFormerConfig(num_classes=2, S=4, B_star=4, d_model=8, num_heads=2, use_layernorm=True)
    p = init_params(cfg, 0)
    probs, _ = forward(p, cfg, rng.standard_normal((2, 4, 4, 4)))
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)


def test_tiny_model_loss_gradients(rng):
    cfg = PyFormerConfig(num_classes=3, S=4, B_star=4, num_levels=2, num_layers=1, num_heads=2, d_model=8, conv_filters=4)
    p = init_params(cfg, seed=1)
    x = rng.standard_normal((2, 4, 4, 4))
    y = np.array([1, 3])
    for name in ("level1.conv1.weight", "level0.layer0.wk", "level0.pos", "head.weight"):
        others = {k: Tensor(v) for k, v in p.items() if k != name}

        def f(w, name=name, others=others):
            probs, pen = forward({**others, name: w}, cfg, x)
            return loss(probs, y, pen)

        coords = rng.choice(p[name].size, size=min(6, p[name].size), replace=False)
        assert grad_check(f, p[name], eps=1e-4, coords=coords) <= 1e-3, name


# --- checkpoints ---------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, cfg, params):
    save_checkpoint(params, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.config == cfg
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    raw = (tmp_path / "ckpt" / "params.f64").read_bytes()
    assert len(raw) == 8 * params.count
    first = next(iter(params.values())).reshape(-1)
    assert np.frombuffer(raw[:8], "<f8")[0] == first[0]
