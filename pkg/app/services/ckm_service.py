"""
Channel Knowledge Map predictors of channel loss.

Three variants share an environment encoder and a residual trunk:
  plain               trunk([positions, F_env])
  knowledge-featured  trunk([positions, F_env, L_hat])
  knowledge-driven    L_hat + trunk([positions, F_env])
where L_hat is the analytic LoS-sigmoid loss of the sample's geometry. All
network quantities are on the min-max scale of the training data's loss.
"""
import logging
import math
import time
from dataclasses import asdict

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from config.run_config import ChannelParams
from app.services.channel_service import expected_loss_db
from app.services.dataset_service import (
    GU_COLUMNS, UAV_COLUMNS, POSITION_COLUMNS, NormStats, denormalize,
)
from app.services.geometry_service import HeightGrid
from app.services.neural_service import (
    LayerSpec, Network, as_tensor, make_adam, network_payload, network_from_payload,
    save_checkpoint, load_checkpoint, snapshot,
)
from app.utils.errors import TrainingDivergedError
from app.utils.init_utils import torch_generator

logger = logging.getLogger(__name__)

VARIANTS = ('plain', 'knowledge-featured', 'knowledge-driven')
VARIANT_ALIASES = {'plain': 'plain', 'kf': 'knowledge-featured', 'kd': 'knowledge-driven'}


def resolve_variant(tag):
    tag = VARIANT_ALIASES.get(tag, tag)
    if tag not in VARIANTS:
        raise ValueError(f"unknown CKM variant '{tag}', expected one of {VARIANTS}")
    return tag


def encoder_specs(encoder_sizes):
    return [LayerSpec(w, 'relu', batch_norm=True) for w in encoder_sizes]


def trunk_specs(hidden_sizes):
    specs = []
    for width in hidden_sizes:
        specs.append(LayerSpec(width, 'relu'))
        specs.append(LayerSpec(width, 'relu', residual=True))
    specs.append(LayerSpec(1, 'identity'))
    return specs


def encode_environment(grid, encoder, scale=1.0):
    """Environment feature vector of a height grid (inference mode)."""
    encoder.eval()
    flat = as_tensor(np.asarray(grid.cell_heights, dtype=float).reshape(1, -1) / scale)
    with torch.no_grad():
        return encoder(flat)[0]


class CkmModel(nn.Module):
    def __init__(self, variant, encoder, trunk, params, stats, grid, grid_scale):
        super().__init__()
        self.variant = resolve_variant(variant)
        self.encoder = encoder
        self.trunk = trunk
        self.params = params
        self.stats = stats
        self.grid = grid
        self.grid_scale = float(grid_scale)
        flat = np.asarray(grid.cell_heights, dtype=float).reshape(-1) / self.grid_scale
        self.register_buffer('grid_input', as_tensor(flat))

    @property
    def loss_bounds(self):
        g_min, g_max = self.stats.column('g')
        return -g_max, -g_min

    def normalize_loss(self, loss_db):
        lo, hi = self.loss_bounds
        return (np.asarray(loss_db, dtype=float) - lo) / ((hi - lo) or 1.0)

    def denormalize_loss(self, value):
        lo, hi = self.loss_bounds
        return lo + np.asarray(value, dtype=float) * ((hi - lo) or 1.0)

    def env_features(self):
        # one scene per model: the encoder batch norm always runs on running statistics
        self.encoder.eval()
        return self.encoder(self.grid_input[None, :])

    def forward(self, positions, knowledge):
        features = [positions, self.env_features().expand(positions.shape[0], -1)]
        if self.variant == 'knowledge-featured':
            features.append(knowledge)
        out = self.trunk(torch.cat(features, dim=1))
        if self.variant == 'knowledge-driven':
            out = knowledge + out
        return out

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())


def build_ckm(variant, arch, params, stats, grid, grid_scale, seed=0):
    """
    Build an untrained CKM
    Args:
        variant (str): plain | knowledge-featured | knowledge-driven (or plain/kf/kd)
        arch (CkmArchConfig): trunk and encoder widths
        params (ChannelParams): channel constants used for the knowledge term
        stats (NormStats): normalization of the training data
        grid (HeightGrid): rasterized scene
        grid_scale (float): height divisor for the encoder input
        seed (int): init seed
    Returns:
        CkmModel
    """
    variant = resolve_variant(variant)
    encoder = Network(grid.width_cells * grid.depth_cells, encoder_specs(arch.encoder_sizes), seed=seed)
    input_dim = len(POSITION_COLUMNS) + encoder.output_dim + (1 if variant == 'knowledge-featured' else 0)
    trunk = Network(input_dim, trunk_specs(arch.hidden_sizes), seed=seed + 1)
    if variant == 'knowledge-driven':
        # residual head starts at zero: the untrained model is the analytic model
        head = trunk.blocks[-1].linear
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
    return CkmModel(variant, encoder, trunk, params, stats, grid, grid_scale)


def knowledge_loss_db(sample, params):
    """Analytic loss of a raw sample (mapping or Series with xG..zU)."""
    gu = np.array([sample[c] for c in GU_COLUMNS], dtype=float)
    uav = np.array([sample[c] for c in UAV_COLUMNS], dtype=float)
    return expected_loss_db(uav, gu, params)


def prepare_tensors(model, ds):
    """(positions, knowledge, target) tensors of a dataset normalized with model.stats."""
    raw = denormalize(ds, model.stats)
    gu = raw.frame[GU_COLUMNS].to_numpy()
    uav = raw.frame[UAV_COLUMNS].to_numpy()
    knowledge = model.normalize_loss(expected_loss_db(uav, gu, model.params))
    target = model.normalize_loss(-raw.frame['g'].to_numpy())
    positions = ds.frame[POSITION_COLUMNS].to_numpy()
    return (
        as_tensor(positions),
        as_tensor(np.atleast_1d(knowledge)).reshape(-1, 1),
        as_tensor(target).reshape(-1, 1),
    )


def _check_stats(model, ds):
    if not ds.normalized:
        raise ValueError("CKM datasets must be normalized")
    if ds.stats is not None and ds.stats != model.stats:
        raise ValueError("dataset normalization differs from the model's stats")


def _val_mse(model, tensors):
    model.eval()
    positions, knowledge, target = tensors
    with torch.no_grad():
        return float(torch.mean((model(positions, knowledge) - target) ** 2))


def make_lr_scheduler(optimizer, cfg):
    """Scale the learning rate by lr_factor on the lr_patience-th consecutive epoch without improvement."""
    # ReduceLROnPlateau acts once its bad-epoch count exceeds patience
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode='min', factor=cfg.lr_factor, patience=cfg.lr_patience - 1
    )


def train_ckm(model, train, val, cfg):
    """
    Fit a CKM with Adam, plateau learning-rate halving and early stopping
    Args:
        model (CkmModel): model to train in place
        train (Dataset): normalized training rows
        val (Dataset): normalized validation rows, same stats
        cfg (CkmTrainConfig): training configuration
    Returns:
        tuple: (model with best-epoch weights restored, list of epoch records)
    """
    _check_stats(model, train)
    _check_stats(model, val)
    train_tensors = prepare_tensors(model, train)
    val_tensors = prepare_tensors(model, val)
    loader = DataLoader(
        TensorDataset(*train_tensors), batch_size=cfg.batch_size, shuffle=True,
        generator=torch_generator(cfg.seed),
    )
    optimizer = make_adam(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = make_lr_scheduler(optimizer, cfg)
    lo, hi = model.loss_bounds
    scale_db2 = (hi - lo) ** 2

    best_val = _val_mse(model, val_tensors)
    best_state = snapshot(model)
    stale = 0
    history = []

    for epoch in range(cfg.max_epochs):
        model.train()
        model.encoder.eval()
        total, count = 0.0, 0
        for positions, knowledge, target in loader:
            loss = torch.mean((model(positions, knowledge) - target) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(target)
            count += len(target)
        val_mse = _val_mse(model, val_tensors)

        if not (math.isfinite(val_mse) and math.isfinite(total)):
            model.load_state_dict(best_state)
            raise TrainingDivergedError(f"CKM loss became non-finite at epoch {epoch}", last_good_state=best_state)

        if val_mse < best_val:
            best_val, best_state, stale = val_mse, snapshot(model), 0
        else:
            stale += 1
        scheduler.step(val_mse)
        lr = optimizer.param_groups[0]['lr']
        history.append({
            'epoch': epoch,
            'train_mse': total / max(count, 1),
            'val_mse': val_mse,
            'val_mse_db2': val_mse * scale_db2,
            'best_val_mse': best_val,
            'lr': lr,
        })
        logger.info(f"CKM {model.variant} epoch {epoch}: val MSE {val_mse * scale_db2:.4f} dB^2, lr {lr:.2e}")
        if stale >= cfg.patience:
            logger.info(f"Early stopping after {epoch + 1} epochs ({cfg.patience} without improvement)")
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict_normalized(model, ds):
    positions, knowledge, _ = prepare_tensors(model, ds)
    model.eval()
    with torch.no_grad():
        return model(positions, knowledge).numpy().reshape(-1)


def predict_dataset_db(model, ds):
    """Predicted loss in dB for every row of a normalized dataset."""
    return model.denormalize_loss(predict_normalized(model, ds))


def predict_loss_db(model, uav, gu):
    """Predicted loss in dB between UAV position(s) and GU position(s), shape (..., 3)."""
    uav = np.atleast_2d(np.asarray(uav, dtype=float))
    gu = np.atleast_2d(np.asarray(gu, dtype=float))
    uav, gu = np.broadcast_arrays(uav, gu)
    # same mapping as MinMaxScaler: constant columns keep a unit span
    lo = np.asarray(model.stats.minimum[:len(POSITION_COLUMNS)])
    span = np.asarray(model.stats.maximum[:len(POSITION_COLUMNS)]) - lo
    span[span == 0] = 1.0
    positions = (np.concatenate([gu, uav], axis=1) - lo) / span
    knowledge = model.normalize_loss(expected_loss_db(uav, gu, model.params))
    model.eval()
    with torch.no_grad():
        out = model(as_tensor(positions), as_tensor(np.atleast_1d(knowledge)).reshape(-1, 1))
    return model.denormalize_loss(out.numpy().reshape(-1))


def evaluate_ckm(model, test):
    """
    Error of a CKM on a normalized dataset, in physical units
    Returns:
        dict: mse (dB^2) and mape (percent) over denormalized losses
    """
    _check_stats(model, test)
    pred = predict_dataset_db(model, test)
    true = -denormalize(test, model.stats).frame['g'].to_numpy()
    return loss_metrics(pred, true)


def loss_metrics(pred, true):
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    error = pred - true
    return {
        'mse': float(np.mean(error ** 2)),
        'mape': float(np.mean(np.abs(error) / np.abs(true)) * 100.0),
    }


def mse_reduction(mse_without_aug, mse_with_aug):
    """Percentage MSE improvement from augmentation; negative when it hurts, 0 for a zero baseline."""
    if mse_without_aug == 0:
        return 0.0
    return 100.0 * (mse_without_aug - mse_with_aug) / mse_without_aug


def timing_metrics(model, ds, train_seconds, rows=1000):
    """Training time, per-1k-row inference time and parameter count of a fitted model."""
    sample = ds.frame.sample(n=rows, replace=len(ds) < rows, random_state=0)
    timing_set = type(ds)(sample.reset_index(drop=True), stats=ds.stats, normalized=True)
    start = time.perf_counter()
    predict_normalized(model, timing_set)
    elapsed = time.perf_counter() - start
    return {
        'train_seconds': float(train_seconds),
        'infer_seconds_per_1k': elapsed * 1000.0 / rows,
        'param_count': int(model.param_count),
    }


def save_ckm(model, path):
    return save_checkpoint(path, 'ckm', {
        'variant': model.variant,
        'encoder': network_payload(model.encoder),
        'trunk': network_payload(model.trunk),
        'params': asdict(model.params),
        'stats': model.stats.to_dict(),
        'grid': model.grid.to_dict(),
        'grid_scale': model.grid_scale,
    })


def load_ckm(path):
    data = load_checkpoint(path, 'ckm')
    model = CkmModel(
        data['variant'],
        network_from_payload(data['encoder']),
        network_from_payload(data['trunk']),
        ChannelParams(**data['params']),
        NormStats.from_dict(data['stats']),
        HeightGrid.from_dict(data['grid']),
        data['grid_scale'],
    )
    model.eval()
    return model
