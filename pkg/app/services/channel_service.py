"""
Air-to-ground channel: free-space loss, the elevation-angle LoS sigmoid model,
the geometric ground truth used to synthesize measurements, and the link
budget (received power, Shannon rate). Powers and losses stay in dB/dBm;
only rate_bps converts to linear.
"""
import logging
import math

import numpy as np
import torch

from app.services.geometry_service import elevation_angle_deg, segments_blocked

logger = logging.getLogger(__name__)


def distance(q, q_n):
    """Euclidean distance between UAV and GU positions."""
    delta = np.asarray(q, dtype=float) - np.asarray(q_n, dtype=float)
    d = np.linalg.norm(delta, axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def fspl_db(d, params):
    """Free-space path loss 20 log10(4 pi f_c d / c); d is clamped to the distance floor."""
    d = np.maximum(np.asarray(d, dtype=float), params.distance_floor)
    loss = 20.0 * np.log10(4.0 * math.pi * params.carrier_hz * d / params.light_speed)
    return float(loss) if loss.ndim == 0 else loss


def los_probability(theta_deg, params):
    return 1.0 / (1.0 + params.a * np.exp(-params.b * (np.asarray(theta_deg, dtype=float) - params.a)))


def expected_loss_db(q, q_n, params):
    """
    Mean A2G loss weighted by the elevation-dependent LoS probability
    Args:
        q: UAV position(s), shape (..., 3)
        q_n: GU position(s), shape (..., 3)
        params (ChannelParams): model constants
    Returns:
        float or ndarray: loss in dB
    """
    theta = elevation_angle_deg(q, q_n)
    loss = params.amplitude_db * los_probability(theta, params) + fspl_db(distance(q, q_n), params) + params.eps_nlos
    return float(loss) if np.ndim(loss) == 0 else loss


def expected_loss_db_tensor(q, q_n, params):
    """Differentiable torch version of expected_loss_db over (..., 3) tensors."""
    delta = q - q_n
    horizontal = torch.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + 1e-12)
    vertical = torch.abs(delta[..., 2])
    theta = torch.rad2deg(torch.atan2(vertical, horizontal))
    d = torch.clamp(torch.linalg.norm(delta, dim=-1), min=params.distance_floor)
    fspl = 20.0 * torch.log10(4.0 * math.pi * params.carrier_hz * d / params.light_speed)
    sigmoid = 1.0 / (1.0 + params.a * torch.exp(-params.b * (theta - params.a)))
    return params.amplitude_db * sigmoid + fspl + params.eps_nlos


def ground_truth_loss_db(q, q_n, env, params, rng):
    """
    Simulated measurement: geometric LoS/NLoS decision plus Gaussian shadowing
    Args:
        q: UAV position(s), shape (..., 3)
        q_n: GU position(s), shape (..., 3)
        env (Environment): scene providing the blockage truth
        params (ChannelParams): model constants
        rng (numpy.random.Generator): seeded random source, one normal draw per link
    Returns:
        float or ndarray: loss in dB
    """
    blocked = segments_blocked(q, q_n, env)
    base = fspl_db(distance(q, q_n), params)
    mean = np.where(blocked, params.eps_nlos, params.eps_los)
    sigma = np.where(blocked, params.shadow_sigma_nlos, params.shadow_sigma_los)
    loss = base + mean + sigma * rng.standard_normal(np.shape(blocked))
    return float(loss) if np.ndim(loss) == 0 else loss


def received_power_dbm(p_t, loss):
    return p_t - loss


def rate_bps(p_r, budget, bandwidth=None):
    """Shannon rate B log2(1 + SNR), SNR formed in the linear domain from dBm values."""
    bandwidth = budget.bandwidth_hz if bandwidth is None else bandwidth
    snr = np.power(10.0, (np.asarray(p_r, dtype=float) - budget.noise_dbm) / 10.0)
    rate = bandwidth * np.log2(1.0 + snr)
    return float(rate) if np.ndim(rate) == 0 else rate
