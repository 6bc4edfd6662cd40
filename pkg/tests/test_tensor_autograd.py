import numpy as np
import pytest

from sembid.errors import ConfigurationError, ContainerFormatError, DomainError, GraphStateError
from sembid.tensor_autograd import (
    MLP,
    MultiHeadAttention,
    AdamW,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    TransformerBlock,
    causal_mask,
    clip_grad_norm,
    concat,
    gelu,
    layer_norm,
    load_checkpoint,
    masked_mse,
    no_grad,
    restore_optimizer,
    save_checkpoint,
    sigmoid,
    softmax,
    stack,
    tanh,
)


def _numeric_grad(fn, arrays, index, eps=1e-6):
    base = arrays[index]
    grad = np.zeros_like(base)
    for position in np.ndindex(base.shape):
        original = base[position]
        base[position] = original + eps
        upper = fn(*[Tensor(a) for a in arrays]).item()
        base[position] = original - eps
        lower = fn(*[Tensor(a) for a in arrays]).item()
        base[position] = original
        grad[position] = (upper - lower) / (2 * eps)
    return grad


def check_grad(fn, *arrays, rtol=1e-5, atol=1e-7):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    for index, tensor in enumerate(tensors):
        np.testing.assert_allclose(tensor.grad, _numeric_grad(fn, arrays, index), rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ----------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------
def test_arithmetic_gradients(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,)) + 3.0
    weights = rng.normal(size=(3, 4))
    check_grad(lambda x, y: ((x * y + x / y - y) ** 2 * weights).sum(), a, b)


def test_matmul_and_transpose_gradients(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    check_grad(lambda x, y: (x @ y).transpose(0, 2, 1).reshape(2, 15).mean(), a, b)


def test_nonlinearity_gradients(rng):
    a = rng.normal(size=(5,))
    weights = rng.normal(size=(5,))
    check_grad(lambda x: ((gelu(x) + tanh(x) + sigmoid(x)) * weights).sum(), a)


def test_softmax_gradient_with_mask(rng):
    a = rng.normal(size=(4, 4))
    weights = rng.normal(size=(4, 4))
    mask = causal_mask(4)
    check_grad(lambda x: (softmax(x, axis=-1, mask=mask) * weights).sum(), a)


def test_layer_norm_gradient(rng):
    x = rng.normal(size=(3, 6))
    gain = rng.normal(size=(6,))
    bias = rng.normal(size=(6,))
    weights = rng.normal(size=(3, 6))
    check_grad(lambda a, g, b: (layer_norm(a, g, b) * weights).sum(), x, gain, bias, rtol=1e-4)


def test_repeated_index_accumulates_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_concat_and_stack_gradients(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    weights = rng.normal(size=(2, 2, 3))
    check_grad(lambda x, y: (stack([x, y], axis=1) * weights).sum() + concat([x, y], axis=0)[1:3].sum(), a, b)


def test_broadcast_gradient_is_reduced():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros((1, 4)), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


# ----------------------------------------------------------------------
# Graph lifecycle
# ----------------------------------------------------------------------
def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    out = (x * 2.0).sum()
    out.backward()
    with pytest.raises(GraphStateError):
        out.backward()


def test_backward_needs_scalar_or_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DomainError):
        (x * 2.0).backward()
    with pytest.raises(GraphStateError):
        Tensor(np.ones(1)).backward()


def test_no_grad_stops_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert (x * 2.0).requires_grad


def test_softmax_masked_entries_are_exact_zeros():
    probs = softmax(Tensor(np.zeros((3, 3))), mask=causal_mask(3)).data
    assert probs[0, 1] == 0.0 and probs[0, 2] == 0.0 and probs[1, 2] == 0.0
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    np.testing.assert_allclose(probs[2], 1.0 / 3.0)


def test_masked_mse_ignores_masked_positions():
    prediction = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = masked_mse(prediction, [0.0, 0.0, 100.0], [1.0, 1.0, 0.0])
    assert loss.item() == pytest.approx(2.5)
    loss.backward()
    np.testing.assert_allclose(prediction.grad, [1.0, 2.0, 0.0])


def test_masked_mse_empty_mask_is_zero():
    prediction = Tensor(np.ones(3), requires_grad=True)
    loss = masked_mse(prediction, np.zeros(3), np.zeros(3))
    assert loss.item() == 0.0
    loss.backward()
    np.testing.assert_array_equal(prediction.grad, np.zeros(3))


def test_transformer_block_is_causal(rng):
    block = TransformerBlock(8, 2, 16, 0.0, rng, dtype=np.float64)
    x = rng.normal(size=(1, 5, 8))
    changed = x.copy()
    changed[0, 3:] += 10.0
    with no_grad():
        a = block(Tensor(x)).data
        b = block(Tensor(changed)).data
    np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-12)
    assert not np.allclose(a[0, 3:], b[0, 3:])


def test_dropout_modes(rng):
    layer = Dropout(0.5, rng)
    x = Tensor(np.ones((100, 10)))
    dropped = layer(x).data
    assert set(np.unique(dropped)) <= {0.0, 2.0}
    layer.eval()
    assert layer(x) is x
    with pytest.raises(ConfigurationError):
        Dropout(1.0)
    with pytest.raises(DomainError):
        Dropout(0.2)(x)


def test_attention_dropout_hits_weighted_values(rng):
    attention = MultiHeadAttention(8, 2, rng, dropout_rate=0.5, dropout_rng=np.random.default_rng(3), dtype=np.float64)
    attention.proj.weight.data = np.eye(8)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    with no_grad():
        dropped = attention(x).data
        attention.eval()
        context = attention(x).data
    assert np.any(dropped == 0.0)
    kept = dropped != 0.0
    np.testing.assert_allclose(dropped[kept], 2.0 * context[kept])


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------
def test_adamw_minimizes_quadratic():
    w = Parameter(np.array([[3.0, -2.0]]), dtype=np.float64)
    optimizer = AdamW([w], lr=0.05, weight_decay=0.0)
    for _ in range(500):
        optimizer.zero_grad()
        ((w - 1.0) ** 2).sum().backward()
        optimizer.step()
    np.testing.assert_allclose(w.data, [[1.0, 1.0]], atol=0.05)
    assert optimizer.state.step == 500


def test_weight_decay_skips_vectors():
    matrix = Parameter(np.ones((2, 2)), dtype=np.float64)
    vector = Parameter(np.ones(2), dtype=np.float64)
    matrix.grad = np.zeros((2, 2))
    vector.grad = np.zeros(2)
    AdamW([matrix, vector], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(matrix.data, 0.95)
    np.testing.assert_allclose(vector.data, 1.0)


def test_optimizer_rejects_bad_hyperparameters():
    with pytest.raises(ConfigurationError):
        AdamW([], lr=0.0)
    with pytest.raises(ConfigurationError):
        AdamW([], weight_decay=-1.0)


def test_clip_grad_norm():
    a = Parameter(np.zeros(2), dtype=np.float64)
    b = Parameter(np.zeros(1), dtype=np.float64)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-9)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# Modules and checkpoints
# ----------------------------------------------------------------------
class Tiny(Module):
    def __init__(self, rng):
        self.encoder = Linear(3, 4, rng)
        self.norm = LayerNorm(4)
        self.head = MLP((4, 8, 1), rng)

    def forward(self, x):
        return self.head(self.norm(self.encoder(x)))


def test_module_parameter_discovery(rng):
    model = Tiny(rng)
    names = [name for name, _ in model.named_parameters()]
    assert "encoder.weight" in names
    assert "head.layers.1.bias" in names
    assert model.num_parameters() == 3 * 4 + 4 + 4 + 4 + 4 * 8 + 8 + 8 + 1
    model.eval()
    assert not any(module.training for module in model.modules())


def test_load_state_dict_rejects_mismatch(rng):
    model = Tiny(rng)
    state = model.state_dict()
    state.pop("norm.gain")
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)
    state = model.state_dict()
    state["norm.gain"] = np.ones(5)
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)


def _trained(rng):
    model = Tiny(rng)
    optimizer = AdamW(model.parameters(), lr=1e-3)
    x = Tensor(rng.normal(size=(8, 3)).astype(np.float32))
    for _ in range(3):
        optimizer.zero_grad()
        (model(x) ** 2).mean().backward()
        optimizer.step()
    return model, optimizer


def test_checkpoint_round_trip(tmp_path, rng):
    model, optimizer = _trained(rng)
    path = save_checkpoint(tmp_path / "model.ckpt", model, optimizer, {"step": 3})
    restored = load_checkpoint(path)
    assert restored.metadata == {"step": 3}
    fresh = Tiny(np.random.default_rng(9))
    fresh.load_state_dict(restored.parameters)
    for (name, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    other = AdamW(fresh.parameters(), lr=5.0)
    restore_optimizer(other, restored.optimizer)
    assert other.state.step == 3
    assert other.state.lr == pytest.approx(1e-3)
    np.testing.assert_array_equal(other.state.first_moments[0], optimizer.state.first_moments[0])


def test_checkpoint_corruption_is_detected(tmp_path, rng):
    model, _ = _trained(rng)
    path = save_checkpoint(tmp_path / "model.ckpt", model)
    payload = bytearray(path.read_bytes())
    payload[-1] ^= 0xFF
    path.write_bytes(bytes(payload))
    with pytest.raises(ContainerFormatError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_missing(tmp_path, rng):
    model, _ = _trained(rng)
    path = save_checkpoint(tmp_path / "model.ckpt", model)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ContainerFormatError) as excinfo:
        load_checkpoint(path)
    assert excinfo.value.offset == 0
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
