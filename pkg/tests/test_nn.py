import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from badlabel_lab import nn
from badlabel_lab.errors import ConfigError, DataError, NumericError, ShapeError


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def numeric_param_grad(model, X, Y, cp, h=1e-5):
    """Central differences of mean(CE - cp*H) with respect to every parameter."""
    def loss():
        return float(nn.penalized_loss(nn.forward(model, X), Y, cp)[0].mean())

    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss()
            p[i] = old - h
            down = loss()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_param_grad(model, X, Y, cp):
    logits, cache = nn.forward(model, X, return_cache=True)
    _, dlogits = nn.penalized_loss(logits, Y, cp)
    return nn.backward(model, cache, dlogits)


# -- init / forward ---------------------------------------------------------

def test_init_is_deterministic():
    a, b = nn.init_mlp([2, 3], 7), nn.init_mlp([2, 3], 7)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("dims", [[2], [], [2, 0, 3], [2, -1]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ConfigError):
        nn.init_mlp(dims, 0)


def test_init_biases_zero_and_fan_in_scale():
    m = nn.init_mlp([2, 64, 64, 3], 1)
    assert all(np.all(b == 0) for b in m.biases)
    big = nn.init_mlp([400, 400], 0)
    assert big.weights[0].std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)


def test_forward_zero_model_gives_zero_logits(rng):
    m = nn.init_mlp([3, 4, 2], 0)
    for p in m.parameters():
        p[...] = 0
    assert np.all(nn.forward(m, rng.normal(size=(6, 3))) == 0)


def test_forward_relu_blocks_negative_unit():
    m = nn.MlpModel([1, 1, 1], [np.array([[1.0]]), np.array([[5.0]])], [np.array([-10.0]), np.array([0.5])])
    assert nn.forward(m, np.array([[2.0]]))[0, 0] == 0.5


def test_forward_shape(rng):
    m = nn.init_mlp([2, 8, 3], 0)
    assert nn.forward(m, rng.normal(size=(5, 2))).shape == (5, 3)
    with pytest.raises(ShapeError):
        nn.forward(m, rng.normal(size=(5, 3)))


# -- softmax / losses -------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nn.softmax(np.zeros((1, 3))), 1 / 3)
    big = nn.softmax(np.array([[1000.0, 0, 0]]))
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0)
    assert np.allclose(nn.softmax(np.log([[2.0, 1.0, 1.0]])), [[0.5, 0.25, 0.25]], atol=1e-12)
    with pytest.raises(NumericError):
        nn.softmax(np.array([[np.nan, 0.0]]))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)),
                  elements=st.floats(-1000, 1000)))
def test_softmax_rows_on_simplex(logits):
    P = nn.softmax(logits)
    assert np.all(P >= 0)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_examples():
    assert nn.cross_entropy_soft([[1, 0, 0]], [[1, 0, 0]])[0] < 1e-11
    assert nn.cross_entropy_soft([[1, 0, 0, 0]], [[0.25] * 4])[0] == pytest.approx(np.log(4))
    assert nn.cross_entropy_soft([[0.5, 0.5]], [[0.5, 0.5]])[0] == pytest.approx(np.log(2))
    with pytest.raises(ShapeError):
        nn.cross_entropy_soft([[1, 0]], [[0.5, 0.25, 0.25]])


def test_entropy_examples():
    assert nn.entropy([[0, 1, 0]])[0] == 0
    assert nn.entropy([[0.1] * 10])[0] == pytest.approx(np.log(10))
    # -(0.5 ln 0.5 + 2 * 0.25 ln 0.25)
    assert nn.entropy([[0.5, 0.25, 0.25]])[0] == pytest.approx(1.0397207708, abs=1e-9)


def test_label_gradient_examples():
    g = nn.label_gradient(np.zeros((1, 3)), [[0.5, 0.25, 0.25]])
    assert np.allclose(g, [[0.6931471806, 1.3862943611, 1.3862943611]])
    assert np.allclose(nn.label_gradient(np.zeros((2, 5)), np.full((2, 5), 0.2)), np.log(5))
    g = nn.label_gradient(np.zeros((1, 3)), [[1.0, 0.0, 0.0]])
    assert g[0, 0] == 0 and np.all(g[0, 1:] >= -np.log(nn.EPS) - 1e-9)


def test_label_gradient_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(100):
        C = rng.integers(2, 7)
        Y = rng.normal(size=(1, C))
        P = nn.softmax(rng.normal(size=(1, C)) * 3)
        num = np.zeros(C)
        for j in range(C):
            Yp, Ym = Y.copy(), Y.copy()
            Yp[0, j] += h
            Ym[0, j] -= h
            num[j] = (nn.cross_entropy_soft(Yp, P)[0] - nn.cross_entropy_soft(Ym, P)[0]) / (2 * h)
        assert rel_err(nn.label_gradient(Y, P)[0], num) < 1e-5


def test_penalized_loss_equals_ce_minus_entropy(rng):
    logits = rng.normal(size=(7, 4))
    Y = nn.one_hot(rng.integers(0, 4, 7), 4)
    P = nn.softmax(logits)
    loss, _ = nn.penalized_loss(logits, Y, 0.7)
    assert np.allclose(loss, nn.cross_entropy_soft(Y, P) - 0.7 * nn.entropy(P), atol=0, rtol=1e-15)


def test_cp_zero_gradient_is_plain_ce(rng):
    logits = rng.normal(size=(5, 3))
    Y = nn.one_hot(rng.integers(0, 3, 5), 3)
    _, g = nn.penalized_loss(logits, Y, 0.0)
    assert np.allclose(g, (nn.softmax(logits) - Y) / 5)


# -- gradients through the network -------------------------------------------

@pytest.mark.parametrize("dims,cp", [([2, 8, 3], 0.0), ([2, 8, 3], 0.5), ([4, 16, 16, 4], 0.3)])
def test_parameter_gradients_match_finite_differences(dims, cp, rng):
    for trial in range(3):
        m = nn.init_mlp(dims, trial)
        for b in m.biases:
            b[...] = rng.normal(scale=0.1, size=b.shape)
        X = rng.normal(size=(4, dims[0]))
        Y = nn.softmax(rng.normal(size=(4, dims[-1])))
        ana = analytic_param_grad(m, X, Y, cp)
        num = numeric_param_grad(m, X, Y, cp)
        for a, n in zip(ana, num):
            assert rel_err(a, n) < 1e-4


def test_train_step_zero_lr_is_noop(rng):
    m = nn.init_mlp([2, 5, 3], 0)
    before = [p.copy() for p in m.parameters()]
    cfg = nn.SgdConfig(learning_rate=0.0)
    nn.train_step(m, rng.normal(size=(4, 2)), nn.one_hot([0, 1, 2, 0], 3), nn.SgdState.for_model(m), cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.parameters()))


def test_weight_decay_skips_biases():
    m = nn.init_mlp([2, 3], 0)
    m.biases[0][...] = 1.0
    state = nn.SgdState.for_model(m)
    grads = [np.zeros_like(p) for p in m.parameters()]
    w0 = m.weights[0].copy()
    nn.sgd_update(m, grads, state, nn.SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5), 0.1)
    assert np.all(m.biases[0] == 1.0)
    assert np.allclose(m.weights[0], w0 * (1 - 0.05))


def test_momentum_is_classical():
    m = nn.MlpModel([1, 1], [np.array([[0.0]])], [np.array([0.0])])
    state = nn.SgdState.for_model(m)
    cfg = nn.SgdConfig(learning_rate=1.0, momentum=0.5, weight_decay=0.0)
    g = [np.array([[1.0]]), np.array([0.0])]
    nn.sgd_update(m, g, state, cfg, 1.0)
    nn.sgd_update(m, g, state, cfg, 1.0)
    # v1 = -1, v2 = 0.5 * -1 - 1 = -1.5, w = -2.5
    assert m.weights[0][0, 0] == pytest.approx(-2.5)


def test_train_step_reports_non_finite_with_context():
    m = nn.init_mlp([1, 2], 0)
    m.weights[0][...] = np.inf
    with pytest.raises(NumericError, match="epoch 3, batch 1"):
        nn.train_step(m, np.ones((2, 1)), nn.one_hot([0, 1], 2), nn.SgdState.for_model(m),
                      nn.SgdConfig(), context="at epoch 3, batch 1")


def test_training_is_bit_deterministic(small_synth):
    train, _ = small_synth
    Y = nn.one_hot(train.y, 3)
    outs = []
    for _ in range(2):
        m = nn.init_mlp([2, 16, 3], 4)
        s = nn.SgdState.for_model(m)
        rng = np.random.default_rng(9)
        for e in range(3):
            nn.train_epoch(m, train.X, Y, s, nn.SgdConfig(learning_rate=0.05), e, rng, 0.2)
        outs.append(m)
    assert all(np.array_equal(a, b) for a, b in zip(outs[0].parameters(), outs[1].parameters()))


def test_sgd_config_validation():
    with pytest.raises(ConfigError):
        nn.SgdConfig(schedule=((10, 0.1), (10, 0.1)))
    with pytest.raises(ConfigError):
        nn.SgdConfig(momentum=1.0)
    cfg = nn.SgdConfig(learning_rate=1.0, schedule=((2, 0.1), (4, 0.5)))
    assert [cfg.lr_at(e) for e in (0, 2, 5)] == pytest.approx([1.0, 0.1, 0.05])


# -- per-sample loss ---------------------------------------------------------

def test_per_sample_loss_uniform_model(rng):
    m = nn.init_mlp([2, 3], 0)
    m.weights[0][...] = 0
    losses = nn.per_sample_loss(m, rng.normal(size=(5, 2)), [0, 1, 2, 1, 0])
    assert np.allclose(losses, np.log(3))


def test_per_sample_loss_equivariance_and_definition(rng):
    m = nn.init_mlp([2, 6, 3], 2)
    X = rng.normal(size=(8, 2))
    y = rng.integers(0, 3, 8)
    L = nn.per_sample_loss(m, X, y)
    perm = rng.permutation(8)
    assert np.array_equal(nn.per_sample_loss(m, X[perm], y[perm]), L[perm])
    assert np.array_equal(L, nn.cross_entropy_soft(nn.one_hot(y, 3), nn.predict_proba(m, X)))
    with pytest.raises(DataError):
        nn.per_sample_loss(m, X, np.full(8, 3))


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    m = nn.init_mlp([2, 5, 3], 11)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"BLAB"
    assert np.frombuffer(raw[4:8], "<u2").tolist() == [1, 2]
    assert np.frombuffer(raw[8:20], "<u4").tolist() == [2, 5, 3]
    assert len(raw) == 20 + 8 * (2 * 5 + 5 + 5 * 3 + 3)
    back = nn.load_checkpoint(path)
    assert back.layer_dims == [2, 5, 3]
    assert all(np.array_equal(a, b) for a, b in zip(m.parameters(), back.parameters()))


@pytest.mark.parametrize("mutate", [
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw[:-8],
    lambda raw: raw[:4] + b"\x09\x00" + raw[6:],
])
def test_checkpoint_corruption_is_data_error(tmp_path, mutate):
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(nn.init_mlp([2, 3], 0), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DataError):
        nn.load_checkpoint(path)
