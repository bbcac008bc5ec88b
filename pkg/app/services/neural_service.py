"""
Fully connected network engine shared by the WGAN, CKM and PPO stages.

Layers come from a fixed menu (dense, dense + batch norm, residual pair) with
ReLU / tanh / sigmoid / identity activations. Gradients are exact (torch
autograd, float64) and parameters are updated with Adam.
"""
import copy
import logging
import math
from dataclasses import dataclass, asdict

import torch
from torch import nn
import torch.nn.functional as F

from config.config import CHECKPOINT_VERSION
from app.utils.errors import DimensionError, NonFiniteError, SchemaError, MissingInputError
from app.utils.init_utils import torch_generator

logger = logging.getLogger(__name__)

DTYPE = torch.float64

ACTIVATIONS = {
    'relu': nn.ReLU,
    'tanh': nn.Tanh,
    'sigmoid': nn.Sigmoid,
    'identity': nn.Identity,
}

# torch counts momentum as the weight of the new batch: 0.1 keeps 0.9 of the running value
BATCH_NORM_MOMENTUM = 0.1
BATCH_NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = 'relu'
    batch_norm: bool = False
    # two width->width dense layers with a skip connection
    residual: bool = False


class DenseBlock(nn.Module):
    def __init__(self, in_dim, spec):
        super().__init__()
        self.linear = nn.Linear(in_dim, spec.width, dtype=DTYPE)
        self.norm = (
            nn.BatchNorm1d(spec.width, eps=BATCH_NORM_EPS, momentum=BATCH_NORM_MOMENTUM, dtype=DTYPE)
            if spec.batch_norm else nn.Identity()
        )
        self.activation = ACTIVATIONS[spec.activation]()

    def forward(self, x):
        return self.activation(self.norm(self.linear(x)))


class ResidualBlock(nn.Module):
    def __init__(self, in_dim, spec):
        super().__init__()
        self.inner = nn.Linear(in_dim, spec.width, dtype=DTYPE)
        self.outer = nn.Linear(spec.width, spec.width, dtype=DTYPE)
        self.activation = ACTIVATIONS[spec.activation]()

    def forward(self, x):
        return self.activation(x + self.outer(F.relu(self.inner(x))))


class Network(nn.Module):
    """Sequential stack of blocks built from LayerSpecs."""

    def __init__(self, input_dim, specs, seed=0):
        super().__init__()
        self.input_dim = int(input_dim)
        self.specs = tuple(specs)
        blocks = []
        width = self.input_dim
        for index, spec in enumerate(self.specs):
            if spec.activation not in ACTIVATIONS:
                raise DimensionError(f"unknown activation '{spec.activation}'", layer_index=index)
            if spec.residual:
                if width != spec.width:
                    raise DimensionError(
                        f"residual block needs equal in/out width, got {width} -> {spec.width}",
                        layer_index=index,
                    )
                blocks.append(ResidualBlock(width, spec))
            else:
                blocks.append(DenseBlock(width, spec))
            width = spec.width
        self.blocks = nn.ModuleList(blocks)
        self.output_dim = width
        self.reset_parameters(seed)

    def reset_parameters(self, seed):
        """Uniform Kaiming init scaled by fan-in, zero biases, unit batch-norm scale."""
        generator = torch_generator(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = math.sqrt(6.0 / module.in_features)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()
                elif isinstance(module, nn.BatchNorm1d):
                    module.reset_parameters()

    def forward(self, x):
        width = self.input_dim
        for index, block in enumerate(self.blocks):
            if x.shape[-1] != width:
                raise DimensionError(f"expected {width} input features, got {x.shape[-1]}", layer_index=index)
            x = block(x)
            width = self.specs[index].width
        return x

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())


def build_network(input_dim, specs, seed=0):
    return Network(input_dim, specs, seed=seed)


def mlp_specs(hidden_sizes, output_dim, hidden_activation='relu', output_activation='identity', batch_norm=False):
    """Plain dense stack: hidden layers then an output layer."""
    specs = [LayerSpec(w, hidden_activation, batch_norm) for w in hidden_sizes]
    specs.append(LayerSpec(output_dim, output_activation))
    return specs


def as_tensor(values):
    return torch.as_tensor(values, dtype=DTYPE)


def forward(net, batch, train=False):
    """
    Run the network on a batch
    Args:
        net (Network): network to evaluate
        batch: (m, input_dim) matrix
        train (bool): batch statistics and autograd graph when True; running
            statistics and no graph otherwise
    Returns:
        torch.Tensor: (m, output_dim) output
    """
    batch = as_tensor(batch)
    net.train(train)
    if train:
        return net(batch)
    with torch.no_grad():
        return net(batch)


def backward(net, batch, output_gradient):
    """
    Exact gradients of the scalar loss whose gradient w.r.t. the output is given
    Args:
        net (Network): network, evaluated in train mode
        batch: (m, input_dim) input matrix
        output_gradient: (m, output_dim) dLoss/dOutput
    Returns:
        tuple: (dict of parameter name -> gradient, input gradient)
    """
    inputs = as_tensor(batch).clone().requires_grad_(True)
    names, params = zip(*net.named_parameters())
    output = forward(net, inputs, train=True)
    grads = torch.autograd.grad(
        output, (inputs,) + params, grad_outputs=as_tensor(output_gradient), allow_unused=True
    )
    param_grads = {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, params, grads[1:])
    }
    return param_grads, grads[0]


def mse(pred, target):
    return F.mse_loss(as_tensor(pred), as_tensor(target))


def make_adam(params, lr, weight_decay=0.0):
    """Adam with beta1=0.9, beta2=0.999, eps=1e-8; weight_decay adds an L2 term."""
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def check_finite_gradients(params):
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError("non-finite gradient passed to the optimizer")


def adam_step(optimizer, grads=None):
    """
    One bias-corrected Adam update
    Args:
        optimizer (torch.optim.Adam): optimizer holding parameters and moments
        grads (list): optional gradients aligned with the optimizer's parameters;
            the parameters' .grad fields are used when omitted
    """
    params = [p for group in optimizer.param_groups for p in group['params']]
    if grads is not None:
        for p, g in zip(params, grads):
            p.grad = as_tensor(g).clone()
    check_finite_gradients(params)
    optimizer.step()


def snapshot(net):
    return copy.deepcopy(net.state_dict())


def all_finite(net):
    return all(torch.isfinite(p).all() for p in net.parameters())


def network_payload(net):
    return {
        'input_dim': net.input_dim,
        'specs': [asdict(s) for s in net.specs],
        'state_dict': net.state_dict(),
    }


def network_from_payload(payload):
    net = Network(payload['input_dim'], [LayerSpec(**s) for s in payload['specs']])
    net.load_state_dict(payload['state_dict'])
    return net


def save_checkpoint(path, kind, payload):
    """Persist a versioned checkpoint; payload holds plain python values and tensors only."""
    torch.save({'version': CHECKPOINT_VERSION, 'kind': kind, **payload}, path)
    return path


def load_checkpoint(path, kind):
    try:
        data = torch.load(path, map_location='cpu', weights_only=True)
    except FileNotFoundError:
        raise MissingInputError(f"checkpoint not found: {path}")
    except Exception as e:
        raise SchemaError(f"unreadable checkpoint {path}: {str(e)}")
    if data.get('version') != CHECKPOINT_VERSION:
        raise SchemaError(f"checkpoint {path} has version {data.get('version')}, expected {CHECKPOINT_VERSION}")
    if data.get('kind') != kind:
        raise SchemaError(f"checkpoint {path} holds a '{data.get('kind')}', expected '{kind}'")
    return data


def save_network(net, path, metadata=None):
    return save_checkpoint(path, 'network', {**network_payload(net), 'metadata': metadata or {}})


def load_network(path):
    data = load_checkpoint(path, 'network')
    return network_from_payload(data), data.get('metadata', {})
