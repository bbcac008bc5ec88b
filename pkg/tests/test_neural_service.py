import numpy as np
import pytest
import torch

from app.services.neural_service import (
    LayerSpec, Network, adam_step, backward, build_network, forward, load_network, make_adam, mlp_specs, mse,
    save_network,
)
from app.utils.errors import DimensionError, NonFiniteError, SchemaError


def random_architecture(rng):
    width = int(rng.integers(2, 6))
    specs = []
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.integers(0, 3)
        activation = str(rng.choice(['tanh', 'sigmoid', 'identity', 'relu']))
        if kind == 2 and specs:
            specs.append(LayerSpec(specs[-1].width, activation, residual=True))
        else:
            specs.append(LayerSpec(int(rng.integers(2, 6)), activation, batch_norm=bool(kind == 1)))
    specs.append(LayerSpec(int(rng.integers(1, 3)), 'identity'))
    return width, specs


def central_difference(net, batch, weights, param, index, h=1e-5):
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + h
        plus = float((forward(net, batch, train=True) * weights).sum())
        param[index] = original - h
        minus = float((forward(net, batch, train=True) * weights).sum())
        param[index] = original
    return (plus - minus) / (2 * h)


@pytest.mark.parametrize('seed', range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    input_dim, specs = random_architecture(rng)
    net = build_network(input_dim, specs, seed=seed)
    batch = torch.as_tensor(rng.normal(size=(6, input_dim)))
    weights = torch.as_tensor(rng.normal(size=(6, net.output_dim)))

    grads, _ = backward(net, batch, weights)
    for name, param in net.named_parameters():
        for flat in rng.choice(param.numel(), size=min(3, param.numel()), replace=False):
            index = np.unravel_index(int(flat), param.shape)
            numeric = central_difference(net, batch, weights, param.data, index)
            assert grads[name][index].item() == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_input_gradient_matches_gradcheck():
    net = build_network(3, mlp_specs((4, 4), 2, hidden_activation='tanh'), seed=1)
    batch = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: net(x), (batch,))


def test_forward_shapes_and_inference_mode():
    net = build_network(4, [LayerSpec(8, 'relu', batch_norm=True), LayerSpec(1, 'identity')])
    out = forward(net, np.ones((3, 4)))
    assert out.shape == (3, 1)
    assert not out.requires_grad


def test_residual_width_mismatch_names_layer():
    with pytest.raises(DimensionError) as info:
        Network(4, [LayerSpec(8), LayerSpec(6, residual=True)])
    assert info.value.layer_index == 1


def test_input_width_mismatch():
    net = build_network(4, mlp_specs((3,), 1))
    with pytest.raises(DimensionError):
        forward(net, np.ones((2, 5)))


def test_seeded_init_is_reproducible():
    a = build_network(5, mlp_specs((7, 7), 2), seed=3)
    b = build_network(5, mlp_specs((7, 7), 2), seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_adam_step_moves_parameters_downhill():
    net = build_network(2, mlp_specs((4,), 1, hidden_activation='tanh'), seed=0)
    optimizer = make_adam(net.parameters(), lr=1e-2)
    x = torch.randn(16, 2, dtype=torch.float64)
    y = x.sum(dim=1, keepdim=True)
    before = float(((net(x) - y) ** 2).mean())
    for _ in range(50):
        optimizer.zero_grad()
        ((net(x) - y) ** 2).mean().backward()
        adam_step(optimizer)
    assert float(((net(x) - y) ** 2).mean()) < before


def test_batch_norm_standardizes_in_train_mode():
    net = Network(3, [LayerSpec(5, 'identity', batch_norm=True)], seed=2)
    out = forward(net, torch.randn(256, 3, dtype=torch.float64) * 4.0 + 1.0, train=True).detach()
    np.testing.assert_allclose(out.mean(dim=0), np.zeros(5), atol=1e-12)
    np.testing.assert_allclose(out.std(dim=0, unbiased=False), np.ones(5), atol=1e-4)


def quadratic_step(lr):
    net = build_network(3, mlp_specs((4,), 1, hidden_activation='tanh'), seed=1)
    before = [p.detach().clone() for p in net.parameters()]
    optimizer = make_adam(net.parameters(), lr=lr)
    x = torch.randn(32, 3, dtype=torch.float64)
    optimizer.zero_grad()
    ((net(x) - 1.0) ** 2).mean().backward()
    grads = [p.grad.detach().clone() for p in net.parameters()]
    adam_step(optimizer)
    return before, [p.detach() for p in net.parameters()], grads


def test_adam_with_zero_rate_keeps_weights():
    before, after, _ = quadratic_step(0.0)
    for b, a in zip(before, after):
        assert torch.equal(b, a)


def test_first_adam_step_moves_each_weight_by_rate():
    lr = 1e-3
    before, after, grads = quadratic_step(lr)
    for b, a, g in zip(before, after, grads):
        moved = (b - a)[g.abs() > 1e-4]
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(moved, lr * torch.sign(g[g.abs() > 1e-4]), rtol=1e-3)


def test_zero_output_gradient_gives_zero_gradients():
    net = Network(3, [LayerSpec(4, 'tanh', batch_norm=True), LayerSpec(2, 'identity')], seed=4)
    grads, input_grad = backward(net, torch.randn(8, 3, dtype=torch.float64), torch.zeros(8, 2))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())
    assert torch.count_nonzero(input_grad) == 0


def test_mse_value_and_gradient():
    pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64, requires_grad=True)
    loss = mse(pred, torch.zeros(2, 2))
    loss.backward()
    assert float(loss) == pytest.approx(7.5)
    np.testing.assert_allclose(pred.grad, [[0.5, 1.0], [1.5, 2.0]])

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    assert float(mse(a, b)) == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)


def test_adam_rejects_non_finite_gradient():
    net = build_network(2, mlp_specs((2,), 1))
    optimizer = make_adam(net.parameters(), lr=1e-3)
    grads = [torch.full_like(p, float('nan')) for p in net.parameters()]
    with pytest.raises(NonFiniteError):
        adam_step(optimizer, grads)


def test_checkpoint_round_trip(tmp_path):
    net = build_network(3, [LayerSpec(4, 'relu', batch_norm=True), LayerSpec(4, 'relu', residual=True),
                            LayerSpec(1, 'identity')], seed=2)
    x = np.random.default_rng(0).normal(size=(10, 3))
    forward(net, x, train=True)
    path = save_network(net, str(tmp_path / 'net.pt'), metadata={'note': 'test'})
    loaded, metadata = load_network(path)
    assert metadata == {'note': 'test'}
    np.testing.assert_allclose(forward(loaded, x).numpy(), forward(net, x).numpy(), atol=1e-12)


def test_checkpoint_kind_is_checked(tmp_path):
    path = str(tmp_path / 'other.pt')
    torch.save({'version': 1, 'kind': 'ckm'}, path)
    with pytest.raises(SchemaError):
        load_network(path)
