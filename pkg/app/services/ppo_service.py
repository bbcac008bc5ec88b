"""
PPO trajectory planner: diagonal Gaussian policy squashed into the action box,
GAE advantages and the clipped surrogate objective.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from torch import nn

from app.services.mdp_service import check_feasibility, run_episode
from app.services.neural_service import (
    Network, as_tensor, make_adam, mlp_specs, network_payload, network_from_payload,
    save_checkpoint, load_checkpoint, snapshot,
)
from app.utils.errors import PipelineError, TrainingDivergedError
from app.utils.init_utils import torch_generator

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
RATIO_TOLERANCE = 1e-9


class PolicyNet(nn.Module):
    """State -> Gaussian mean in pre-squash space, with a learnable state-independent log-std."""

    def __init__(self, trunk, low, high, init_log_std=-0.5):
        super().__init__()
        self.trunk = trunk
        self.log_std = nn.Parameter(torch.full((trunk.output_dim,), float(init_log_std), dtype=torch.float64))
        self.register_buffer('low', as_tensor(low))
        self.register_buffer('high', as_tensor(high))

    @property
    def action_dim(self):
        return self.trunk.output_dim

    def mean(self, obs):
        return self.trunk(as_tensor(obs))

    def squash(self, u):
        """Map pre-squash values into [low, high] through tanh."""
        return self.low + (self.high - self.low) * (torch.tanh(u) + 1.0) / 2.0

    def squash_log_det(self, u):
        # log d(squash)/du = log((high - low) / 2) + log(1 - tanh(u)^2), written stably
        log_jac = 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))
        return (torch.log((self.high - self.low) / 2.0) + log_jac).sum(-1)

    def gaussian_log_prob(self, obs, u):
        mean = self.mean(obs)
        z = (u - mean) * torch.exp(-self.log_std)
        return (-0.5 * z ** 2 - self.log_std - 0.5 * LOG_2PI).sum(-1)

    def log_prob(self, obs, u):
        """Log-density of the squashed action produced by pre-squash sample u."""
        return self.gaussian_log_prob(obs, u) - self.squash_log_det(u)


class ValueNet(nn.Module):
    def __init__(self, network):
        super().__init__()
        self.network = network

    def forward(self, obs):
        return self.network(as_tensor(obs)).squeeze(-1)


def build_policy(obs_dim, low, high, cfg, seed=0):
    trunk = Network(obs_dim, mlp_specs(cfg.hidden_sizes, len(low), hidden_activation='tanh'), seed=seed)
    return PolicyNet(trunk, low, high, cfg.init_log_std)


def build_value(obs_dim, cfg, seed=0):
    return ValueNet(Network(obs_dim, mlp_specs(cfg.hidden_sizes, 1, hidden_activation='tanh'), seed=seed))


def sample_pre_squash(policy, obs, rng, deterministic=False):
    """
    Draw a pre-squash action
    Args:
        policy (PolicyNet): policy
        obs: observation vector
        rng (torch.Generator): random stream
        deterministic (bool): return the mean instead of a sample
    Returns:
        tuple: (pre-squash tensor, log-probability float)
    """
    with torch.no_grad():
        mean = policy.mean(as_tensor(obs)[None, :])[0]
        if deterministic:
            u = mean
        else:
            noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
            u = mean + torch.exp(policy.log_std) * noise
        log_prob = float(policy.log_prob(as_tensor(obs)[None, :], u[None, :])[0])
    return u, log_prob


def sample_action(policy, obs, rng, deterministic=False):
    """Squashed action and its log-probability."""
    u, log_prob = sample_pre_squash(policy, obs, rng, deterministic)
    with torch.no_grad():
        action = policy.squash(u)
    return action.numpy(), log_prob


def gae(rewards, values, bootstrap_value, gamma, lam, dones=None):
    """
    Generalized advantage estimation
    Args:
        rewards: (T,) rewards
        values: (T,) value estimates of the visited states
        bootstrap_value (float): value of the state after the last step
        gamma (float): discount
        lam (float): GAE parameter; 1 gives the discounted TD-residual sum, 0 gives one-step residuals
        dones: optional (T,) flags; a done step does not bootstrap past itself
    Returns:
        tuple: (advantages, returns) as float arrays
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} differ in length")
    dones = np.zeros_like(rewards) if dones is None else np.asarray(dones, dtype=float)
    advantages = np.zeros_like(rewards)
    next_value = float(bootstrap_value)
    running = 0.0
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def clipped_objective(ratio, advantage, clip_eps):
    """min(r A, clip(r, 1 - eps, 1 + eps) A), elementwise."""
    if isinstance(ratio, torch.Tensor) or isinstance(advantage, torch.Tensor):
        ratio, advantage = as_tensor(ratio), as_tensor(advantage)
        return torch.minimum(ratio * advantage, torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * advantage)
    return min(ratio * advantage, float(np.clip(ratio, 1 - clip_eps, 1 + clip_eps)) * advantage)


@dataclass
class Rollout:
    observations: List[np.ndarray] = field(default_factory=list)
    pre_squash: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    bootstrap_value: float = 0.0

    def __len__(self):
        lengths = {len(self.observations), len(self.pre_squash), len(self.actions), len(self.rewards),
                   len(self.log_probs), len(self.values), len(self.dones)}
        if len(lengths) != 1:
            raise ValueError(f"rollout sequences have unequal lengths {sorted(lengths)}")
        return lengths.pop()


def episode_seed(base_seed, index):
    return int(np.random.SeedSequence(base_seed, spawn_key=(index,)).generate_state(1)[0])


def surrogate_loss(policy, value, batch, cfg):
    """Negative clipped surrogate plus weighted value MSE over a minibatch."""
    new_log_prob = policy.log_prob(batch['obs'], batch['u'])
    ratio = torch.exp(new_log_prob - batch['old_log_prob'])
    policy_loss = -clipped_objective(ratio, batch['advantages'], cfg.clip_eps).mean()
    value_loss = torch.mean((value(batch['obs']) - batch['returns']) ** 2)
    return policy_loss + cfg.value_coef * value_loss, ratio


def ratio_deviation(policy, rollout):
    """Largest |ratio - 1| of the freshly collected batch under the current policy."""
    with torch.no_grad():
        obs = as_tensor(np.array(rollout.observations))
        u = as_tensor(np.array(rollout.pre_squash))
        ratio = torch.exp(policy.log_prob(obs, u) - as_tensor(rollout.log_probs))
    return float(torch.max(torch.abs(ratio - 1.0)))


@dataclass
class PpoResult:
    policy: PolicyNet
    value: ValueNet
    curve: List[dict]


def train_ppo(env_factory, oracle, cfg):
    """
    Train a policy with PPO against the UAV environment
    Args:
        env_factory: callable oracle -> UavMdp
        oracle: channel oracle used for the training episodes
        cfg (PpoConfig): training configuration
    Returns:
        PpoResult: policy, value network and per-episode learning curve
    """
    mdp = env_factory(oracle)
    policy = build_policy(mdp.observation_dim, mdp.action_low, mdp.action_high, cfg, seed=cfg.seed)
    value = build_value(mdp.observation_dim, cfg, seed=cfg.seed + 1)
    params = list(policy.parameters()) + list(value.parameters())
    optimizer = make_adam(params, cfg.lr)
    rng = torch_generator(cfg.seed)
    curve = []
    episode = 0
    obs = mdp.reset(episode_seed(cfg.seed, episode))
    episode_return = 0.0
    last_good = {'policy': snapshot(policy), 'value': snapshot(value)}

    while episode < cfg.episodes:
        rollout = Rollout()
        for _ in range(cfg.rollout_length):
            u, log_prob = sample_pre_squash(policy, obs, rng)
            with torch.no_grad():
                action = policy.squash(u).numpy()
                v = float(value(as_tensor(obs)[None, :])[0])
            next_obs, r, done, info = mdp.step(action)
            rollout.observations.append(obs)
            rollout.pre_squash.append(u.numpy())
            rollout.actions.append(action)
            rollout.rewards.append(r)
            rollout.log_probs.append(log_prob)
            rollout.values.append(v)
            rollout.dones.append(done)
            episode_return += r
            obs = next_obs
            if done:
                curve.append({
                    'episode': episode,
                    'return': episode_return,
                    'length': mdp.state.step,
                    'success': bool(info['success']),
                })
                episode += 1
                episode_return = 0.0
                if episode >= cfg.episodes:
                    break
                obs = mdp.reset(episode_seed(cfg.seed, episode))
        with torch.no_grad():
            rollout.bootstrap_value = 0.0 if rollout.dones[-1] else float(value(as_tensor(obs)[None, :])[0])

        _update(policy, value, optimizer, params, rollout, cfg, rng, last_good)
        last_good = {'policy': snapshot(policy), 'value': snapshot(value)}
        recent = [c['return'] for c in curve[-10:]]
        if recent:
            logger.info(f"PPO after {episode} episodes: mean return (last {len(recent)}) {np.mean(recent):.3f}")

    return PpoResult(policy, value, curve)


def _update(policy, value, optimizer, params, rollout, cfg, rng, last_good):
    n = len(rollout)
    deviation = ratio_deviation(policy, rollout)
    if deviation > RATIO_TOLERANCE:
        raise PipelineError(f"stale rollout: first-epoch ratio deviates from 1 by {deviation:.3e}")

    advantages, returns = gae(
        rollout.rewards, rollout.values, rollout.bootstrap_value, cfg.gamma, cfg.gae_lambda, rollout.dones
    )
    if cfg.normalize_advantages and n > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    data = {
        'obs': as_tensor(np.array(rollout.observations)),
        'u': as_tensor(np.array(rollout.pre_squash)),
        'old_log_prob': as_tensor(rollout.log_probs),
        'advantages': as_tensor(advantages),
        'returns': as_tensor(returns),
    }
    for _ in range(cfg.update_epochs):
        order = torch.randperm(n, generator=rng)
        for begin in range(0, n, cfg.minibatch_size):
            index = order[begin:begin + cfg.minibatch_size]
            loss, _ = surrogate_loss(policy, value, {k: v[index] for k, v in data.items()}, cfg)
            if not torch.isfinite(loss):
                policy.load_state_dict(last_good['policy'])
                value.load_state_dict(last_good['value'])
                raise TrainingDivergedError("PPO loss became non-finite", last_good_state=last_good)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()


def policy_controller(policy, deterministic=True, seed=0):
    rng = torch_generator(seed)

    def control(obs, state):
        action, _ = sample_action(policy, obs, rng, deterministic=deterministic)
        return action
    return control


class RandomPolicy:
    """Uniform actions inside the action box."""

    def __init__(self, low, high, seed=0):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs, state):
        return self.rng.uniform(self.low, self.high)


def evaluate_controller(make_controller, env_factory, oracle, n_episodes, seed):
    """
    Score a controller over n episodes
    Args:
        make_controller: callable episode seed -> controller (observation, state) -> action
        env_factory: callable oracle -> UavMdp
        oracle: channel oracle used for scoring
        n_episodes (int): number of episodes
        seed (int): base seed
    Returns:
        dict: mean flight time (s), mean throughput (bits/s), success rate and per-episode summaries
    """
    mdp = env_factory(oracle)
    episodes = []
    for index in range(n_episodes):
        s = episode_seed(seed, index)
        traj = run_episode(mdp, make_controller(s), seed=s)
        feasible = not check_feasibility(traj, mdp.cfg, mdp.link)
        episodes.append({**traj.summary(), 'feasible': feasible, 'success': bool(traj.success and feasible)})
    return {
        'mean_flight_time': float(np.mean([e['t_end'] for e in episodes])),
        'mean_throughput': float(np.mean([e['throughput'] for e in episodes])),
        'success_rate': float(np.mean([e['success'] for e in episodes])),
        'mean_return': float(np.mean([e['total_reward'] for e in episodes])),
        'episodes': episodes,
    }


def evaluate_policy(policy, env_factory, oracle, n_episodes, seed):
    """Deterministic (mean-action) evaluation of a trained policy."""
    return evaluate_controller(lambda s: policy_controller(policy, True, s), env_factory, oracle, n_episodes, seed)


def evaluate_random(env_factory, oracle, n_episodes, seed):
    mdp = env_factory(oracle)
    return evaluate_controller(
        lambda s: RandomPolicy(mdp.action_low, mdp.action_high, s), env_factory, oracle, n_episodes, seed
    )


def save_policy(policy, value, path, metadata=None):
    return save_checkpoint(path, 'ppo-policy', {
        'trunk': network_payload(policy.trunk),
        'log_std': policy.log_std.detach().clone(),
        'low': policy.low.tolist(),
        'high': policy.high.tolist(),
        'value': network_payload(value.network),
        'metadata': metadata or {},
    })


def load_policy(path):
    """Returns (PolicyNet, ValueNet, metadata)."""
    data = load_checkpoint(path, 'ppo-policy')
    policy = PolicyNet(network_from_payload(data['trunk']), data['low'], data['high'])
    with torch.no_grad():
        policy.log_std.copy_(data['log_std'])
    value = ValueNet(network_from_payload(data['value']))
    policy.eval()
    value.eval()
    return policy, value, data.get('metadata', {})
