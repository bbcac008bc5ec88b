"""
Wasserstein GAN augmentation of normalized channel samples.

The critic is kept Lipschitz by weight clipping after every critic update;
the generator ends in a sigmoid so its samples live on the min-max scale.
"""
import logging
import math

import numpy as np
import torch
from scipy.stats import wasserstein_distance

from app.services.dataset_service import FEATURES, Dataset, _frame, denormalize, normalize
from app.services.neural_service import (
    build_network, forward, make_adam, mlp_specs, network_payload,
    network_from_payload, save_checkpoint, load_checkpoint, as_tensor,
)
from app.utils.errors import TrainingDivergedError
from app.utils.init_utils import torch_generator

logger = logging.getLogger(__name__)


def critic_loss(real_scores, fake_scores):
    """mean(fake) - mean(real); minimizing it maximizes the critic's Wasserstein estimate."""
    return as_tensor(fake_scores).mean() - as_tensor(real_scores).mean()


def generator_loss(fake_scores):
    return -as_tensor(fake_scores).mean()


def clip_weights(net, c):
    """Clamp every weight and bias of net into [-c, c] in place; returns net."""
    with torch.no_grad():
        for p in net.parameters():
            p.clamp_(-c, c)
    return net


def max_abs_weight(net):
    return max(float(p.abs().max()) for p in net.parameters())


def build_generator(cfg, output_dim=len(FEATURES), seed=0):
    return build_network(cfg.latent_dim, mlp_specs(cfg.hidden_sizes, output_dim, output_activation='sigmoid'), seed=seed)


def build_critic(cfg, input_dim=len(FEATURES), seed=0):
    return build_network(input_dim, mlp_specs(cfg.hidden_sizes, 1), seed=seed)


def train_wgan(real, cfg):
    """
    Train a generator/critic pair on normalized samples
    Args:
        real: normalized Dataset, or an (m, k) array of values in [0, 1]
        cfg (WganConfig): training configuration
    Returns:
        tuple: (generator Network, list of per-iteration loss records)
    """
    values = real.values() if isinstance(real, Dataset) else np.asarray(real, dtype=float)
    if isinstance(real, Dataset) and not real.normalized:
        raise ValueError("train_wgan needs a normalized dataset")
    if len(values) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {len(values)}")
    data = as_tensor(values)
    n_rows, n_features = data.shape

    generator = build_generator(cfg, n_features, seed=cfg.seed)
    critic = build_critic(cfg, n_features, seed=cfg.seed + 1)
    clip_weights(critic, cfg.clip_value)
    gen_optimizer = make_adam(generator.parameters(), cfg.lr)
    critic_optimizer = make_adam(critic.parameters(), cfg.lr)
    rng = torch_generator(cfg.seed)
    generator.train()
    critic.train()

    def noise():
        return torch.randn(cfg.batch_size, cfg.latent_dim, generator=rng, dtype=data.dtype)

    history = []
    for iteration in range(cfg.iterations):
        # critic steps; the generator is frozen (its output is detached)
        for _ in range(cfg.n_critic):
            batch = data[torch.randint(0, n_rows, (cfg.batch_size,), generator=rng)]
            with torch.no_grad():
                fake = generator(noise())
            loss_c = critic_loss(critic(batch), critic(fake))
            critic_optimizer.zero_grad()
            loss_c.backward()
            critic_optimizer.step()
            clip_weights(critic, cfg.clip_value)
            assert max_abs_weight(critic) <= cfg.clip_value

        # generator step; only generator parameters are stepped
        loss_g = generator_loss(critic(generator(noise())))
        gen_optimizer.zero_grad()
        loss_g.backward()
        gen_optimizer.step()

        record = {
            'iteration': iteration,
            'critic_loss': float(loss_c),
            'generator_loss': float(loss_g),
            'wasserstein_estimate': abs(float(loss_c)),
        }
        if not (math.isfinite(record['critic_loss']) and math.isfinite(record['generator_loss'])):
            raise TrainingDivergedError(f"WGAN loss became non-finite at iteration {iteration}: {record}")
        history.append(record)
        if iteration % cfg.log_every == 0 or iteration == cfg.iterations - 1:
            logger.info(
                f"WGAN iteration {iteration}: critic {record['critic_loss']:.6f}, "
                f"generator {record['generator_loss']:.6f}"
            )

    generator.eval()
    return generator, history


def generate_samples(gen, n, stats, seed, cfg):
    """
    Draw n synthetic rows, denormalized to physical units
    Args:
        gen (Network): trained generator
        n (int): number of rows requested
        stats (NormStats): extrema of the real data
        seed (int): seed of the latent draws
        cfg (WganConfig): latent size, candidate oversampling, retry cap and distance tolerance
    Returns:
        tuple: (Dataset, shortfall) where shortfall counts rows still missing
        after the retry cap
    """
    rng = torch_generator(seed)
    lower = np.asarray(stats.minimum)
    upper = np.asarray(stats.maximum)
    d_index = FEATURES.index('d')
    accepted = []
    missing = n

    for _ in range(cfg.max_retries + 1):
        if missing <= 0:
            break
        draws = int(math.ceil(missing * cfg.candidate_factor))
        z = torch.randn(draws, cfg.latent_dim, generator=rng, dtype=torch.float64)
        raw = forward(gen, z).numpy()
        rows = denormalize(Dataset(_frame(raw), stats=stats, normalized=True)).values()
        rows = np.clip(rows, lower, upper)
        recomputed = np.linalg.norm(rows[:, 3:6] - rows[:, 0:3], axis=1)
        relative = np.abs(recomputed - rows[:, d_index]) / np.maximum(recomputed, 1e-9)
        keep = relative <= cfg.distance_tolerance
        rows = rows[keep][:missing]
        rows[:, d_index] = recomputed[keep][:missing]
        accepted.append(rows)
        missing -= len(rows)

    values = np.concatenate(accepted) if accepted else np.zeros((0, len(FEATURES)))
    shortfall = max(missing, 0)
    if shortfall:
        logger.warning(f"Distance consistency filter left {shortfall} of {n} synthetic rows unfilled")
    return Dataset(_frame(values[:n])), shortfall


def feature_wasserstein1(real, synth):
    """Per-feature 1-D Wasserstein distance between two datasets on their own scale."""
    a, b = real.values(), synth.values()
    return {
        name: float(wasserstein_distance(a[:, i], b[:, i])) if len(a) and len(b) else float('nan')
        for i, name in enumerate(FEATURES)
    }


def _corr_sign(ds):
    corr = np.corrcoef(ds.frame['d'], ds.frame['g'])[0, 1]
    return int(np.sign(corr)) if np.isfinite(corr) else 0


def quality_report(real, synth, stats):
    """
    Fidelity of synthetic rows against the real raw rows
    Args:
        real (Dataset): raw real rows
        synth (Dataset): raw synthetic rows
        stats (NormStats): real-data extrema used to put both on the [0, 1] scale
    Returns:
        dict: per-feature normalized W1, means, stds, corr(d, g) signs, in-range fraction
    """
    real_n, _ = normalize(real, stats)
    synth_n, _ = normalize(synth, stats)
    values = synth.values()
    in_range = np.all((values >= np.asarray(stats.minimum) - 1e-9) & (values <= np.asarray(stats.maximum) + 1e-9), axis=1)
    w1 = feature_wasserstein1(real_n, synth_n)
    return {
        'rows_real': len(real),
        'rows_synthetic': len(synth),
        'wasserstein1': w1,
        'features_below_0.1': int(sum(v < 0.1 for v in w1.values())),
        'mean_real': real.frame.mean().to_dict(),
        'mean_synthetic': synth.frame.mean().to_dict(),
        'std_real': real.frame.std().to_dict(),
        'std_synthetic': synth.frame.std().to_dict(),
        'corr_sign_real': _corr_sign(real),
        'corr_sign_synthetic': _corr_sign(synth),
        'corr_sign_match': _corr_sign(real) == _corr_sign(synth),
        'in_range_fraction': float(in_range.mean()) if len(values) else 1.0,
    }


def save_generator(gen, path, cfg):
    return save_checkpoint(path, 'wgan-generator', {
        'network': network_payload(gen),
        'latent_dim': cfg.latent_dim,
    })


def load_generator(path):
    data = load_checkpoint(path, 'wgan-generator')
    gen = network_from_payload(data['network'])
    gen.eval()
    return gen, data['latent_dim']
