"""PPO actor-critic mapping channel forecasts to bounded parameter moves.

The actor emits per-block adjustment deltas squashed into per-component
boxes; a safety filter then clamps the resulting absolute parameters into
their allowed operating ranges, so no sampled action can push the link
outside safe settings. Transitions are used once per update and discarded
(on-policy buffer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .channel import ControlState, Telemetry
from .tcn import Forecast, Normalizer

LOG2PI = math.log(2.0 * math.pi)

ACTION_ORDER = ("d_mu_s", "d_mu_w", "d_pz", "d_theta_c", "d_phi_c")
ACTION_CAPS = np.array([0.05, 0.05, 0.05, 0.02, 0.05])

PROTOCOL_MASKS = {
    "bb84": np.array([1.0, 1.0, 1.0, 1.0, 0.0]),
    "e91": np.array([0.0, 0.0, 1.0, 1.0, 0.0]),
    "cow": np.array([1.0, 0.0, 0.0, 0.0, 1.0]),
}

# Absolute safe operating boxes enforced after every action.
SAFE_MU_S = (0.1, 1.0)
SAFE_MU_W = (0.02, 0.3)
SAFE_MU_GAP = 0.05  # mu_w stays below mu_s by at least this margin
SAFE_PZ = (0.5, 0.95)
SAFE_THETA_C = (-0.6, 0.6)
SAFE_PHI_C = (-math.pi, math.pi)

# Fixed layout of the observation vector; see observe().
OBS_ORDER = (
    "fc_q_mu", "fc_e_mu", "fc_v", "fc_eta", "fc_y0",
    "tm_q_mu", "tm_e_mu", "tm_v", "tm_eta", "tm_y0",
    "ctrl_mu_s", "ctrl_mu_w", "ctrl_p_z", "ctrl_theta_c", "ctrl_phi_c",
)
OBS_DIM = len(OBS_ORDER)
OBS_Z_CLIP = 4.0


class DivergenceError(RuntimeError):
    """A policy update produced a non-finite loss and was rolled back."""


@dataclass
class PpoConfig:
    gamma: float = 0.9
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    rollout: int = 256
    minibatch: int = 64
    entropy_weight: float = 0.01
    log_std_init: float = -0.7
    hidden: Tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.rollout < self.minibatch:
            raise ValueError("rollout length must be >= minibatch size")


@dataclass
class RewardConfig:
    """Weights of the composite throughput-vs-error feedback signal."""

    w_rate: float = 1.0
    w_err: float = 0.5
    skr_ref: float = 5.0e5
    qber_ref: float = 0.11
    abort_penalty: float = 1.0

    def __post_init__(self) -> None:
        if self.w_rate <= 0 or self.w_err <= 0:
            raise ValueError("reward weights must be positive")
        if self.skr_ref <= 0:
            raise ValueError("skr_ref must be positive")


@dataclass(frozen=True)
class Action:
    d_mu_s: float = 0.0
    d_mu_w: float = 0.0
    d_pz: float = 0.0
    d_theta_c: float = 0.0
    d_phi_c: float = 0.0
    mask: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def as_vector(self) -> np.ndarray:
        return np.array([self.d_mu_s, self.d_mu_w, self.d_pz,
                         self.d_theta_c, self.d_phi_c])

    @classmethod
    def from_vector(cls, vec: np.ndarray, mask: np.ndarray) -> "Action":
        vec = np.asarray(vec, dtype=float) * mask
        return cls(*[float(x) for x in vec], mask=tuple(float(m) for m in mask))


@dataclass(frozen=True)
class ActionSample:
    action: Action
    log_prob: float
    value: float
    pre_squash: np.ndarray
    fallback: bool = False


class RolloutBuffer:
    """On-policy transition store, cleared after each update."""

    def __init__(self):
        self.obs: List[np.ndarray] = []
        self.pre_squash: List[np.ndarray] = []
        self.log_probs: List[float] = []
        self.values: List[float] = []
        self.rewards: List[float] = []
        self.masks: List[np.ndarray] = []

    def add(self, obs, pre_squash, log_prob, value, reward, mask) -> None:
        self.obs.append(np.asarray(obs, dtype=float))
        self.pre_squash.append(np.asarray(pre_squash, dtype=float))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.masks.append(np.asarray(mask, dtype=float))

    def __len__(self) -> int:
        return len(self.rewards)

    def clear(self) -> None:
        self.__init__()


def _mlp(sizes: Sequence[int], rng: np.random.Generator,
         out_scale: float = 1.0) -> List[nn.DenseLayer]:
    layers = [nn.DenseLayer.create(a, b, rng) for a, b in zip(sizes, sizes[1:])]
    layers[-1].w.data *= out_scale
    return layers


class ActorCritic:
    """Gaussian policy with tanh squashing plus a state-value critic."""

    def __init__(self, cfg: PpoConfig, obs_dim: int = OBS_DIM, act_dim: int = 5,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.Generator(np.random.Philox(key=0))
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        h1, h2 = cfg.hidden
        self.actor = _mlp((obs_dim, h1, h2, act_dim), rng, out_scale=0.01)
        self.critic = _mlp((obs_dim, h1, h2, 1), rng)
        self.log_std = nn.Var(np.full(act_dim, cfg.log_std_init))
        self.act_calls = 0

    def actor_params(self) -> List[nn.Var]:
        out: List[nn.Var] = []
        for layer in self.actor:
            out += layer.params()
        out.append(self.log_std)
        return out

    def critic_params(self) -> List[nn.Var]:
        out: List[nn.Var] = []
        for layer in self.critic:
            out += layer.params()
        return out

    def forward_actor(self, obs: nn.Var) -> nn.Var:
        h = obs
        for layer in self.actor[:-1]:
            h = nn.tanh(layer(h))
        return self.actor[-1](h)

    def forward_critic(self, obs: nn.Var) -> nn.Var:
        h = obs
        for layer in self.critic[:-1]:
            h = nn.tanh(layer(h))
        return nn.index(self.critic[-1](h), (slice(None), 0))

    def sigma(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std.data, -5.0, 2.0))

    def snapshot(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.actor_params() + self.critic_params()]

    def restore(self, snap: List[np.ndarray]) -> None:
        for p, s in zip(self.actor_params() + self.critic_params(), snap):
            p.data = s.copy()

    def state_arrays(self) -> dict:
        arrays = {}
        for name, layers in (("actor", self.actor), ("critic", self.critic)):
            for i, layer in enumerate(layers):
                arrays[f"{name}{i}.w"] = layer.w.data
                arrays[f"{name}{i}.b"] = layer.b.data
        arrays["log_std"] = self.log_std.data
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for name, layers in (("actor", self.actor), ("critic", self.critic)):
            for i, layer in enumerate(layers):
                layer.w.data = arrays[f"{name}{i}.w"]
                layer.b.data = arrays[f"{name}{i}.b"]
        self.log_std.data = arrays["log_std"]


def observe(forecast: Forecast, telem: Telemetry, ctrl: ControlState,
            normalizer: Normalizer) -> np.ndarray:
    """Fixed-order observation: normalized forecast, normalized current
    estimates, and control parameters scaled to [-1, 1]."""
    from .tcn import telemetry_features

    z_fc = np.clip(forecast.y_norm, -OBS_Z_CLIP, OBS_Z_CLIP) / OBS_Z_CLIP
    z_tm = np.clip(normalizer.normalize(telemetry_features(telem)),
                   -OBS_Z_CLIP, OBS_Z_CLIP) / OBS_Z_CLIP

    def scale(x, box):
        lo, hi = box
        return 2.0 * (min(max(x, lo), hi) - lo) / (hi - lo) - 1.0

    ctrl_part = np.array([
        scale(ctrl.mu_s, SAFE_MU_S),
        scale(ctrl.mu_w, SAFE_MU_W),
        scale(ctrl.p_z, SAFE_PZ),
        scale(ctrl.theta_c, SAFE_THETA_C),
        scale(ctrl.phi_c, SAFE_PHI_C),
    ])
    return np.concatenate([z_fc, z_tm, ctrl_part])


def act(nets: ActorCritic, obs: np.ndarray, rng: np.random.Generator,
        protocol: str = "bb84", deterministic: bool = False) -> ActionSample:
    """Sample a squashed-Gaussian action and evaluate the critic.

    Never raises on bad network output: a non-finite mean or value falls
    back to the zero action with the ``fallback`` flag set.
    """
    nets.act_calls += 1
    mask = PROTOCOL_MASKS[protocol]
    obs_v = nn.Var(np.asarray(obs, dtype=float)[None, :])
    mean = nets.forward_actor(obs_v).data[0]
    value = float(nets.forward_critic(obs_v).data[0])
    noise = rng.standard_normal(nets.act_dim)
    if not (np.all(np.isfinite(mean)) and math.isfinite(value)):
        return ActionSample(Action.from_vector(np.zeros(nets.act_dim), mask),
                            0.0, 0.0, np.zeros(nets.act_dim), fallback=True)
    sigma = nets.sigma()
    u = mean if deterministic else mean + sigma * noise
    z = (u - mean) / sigma
    logp_terms = -0.5 * z**2 - np.log(sigma) - 0.5 * LOG2PI
    log_prob = float(np.sum(logp_terms * mask))
    deltas = np.tanh(u) * ACTION_CAPS
    return ActionSample(Action.from_vector(deltas, mask), log_prob, value, u)


def apply_action(ctrl: ControlState, action: Action) -> ControlState:
    """Integrate the deltas and clamp the result into the safe boxes."""
    mu_s = min(max(ctrl.mu_s + action.d_mu_s, SAFE_MU_S[0]), SAFE_MU_S[1])
    mu_w = min(max(ctrl.mu_w + action.d_mu_w, SAFE_MU_W[0]), SAFE_MU_W[1])
    mu_w = min(mu_w, mu_s - SAFE_MU_GAP)
    p_z = min(max(ctrl.p_z + action.d_pz, SAFE_PZ[0]), SAFE_PZ[1])
    theta_c = min(max(ctrl.theta_c + action.d_theta_c, SAFE_THETA_C[0]), SAFE_THETA_C[1])
    phi_c = min(max(ctrl.phi_c + action.d_phi_c, SAFE_PHI_C[0]), SAFE_PHI_C[1])
    return ControlState(mu_s=mu_s, mu_w=mu_w, p_z=p_z, theta_c=theta_c, phi_c=phi_c)


def reward(skr_bps: float, qber: float, aborted: bool, cfg: RewardConfig) -> float:
    """Composite feedback: normalized rate minus weighted normalized error."""
    if skr_bps < 0:
        raise ValueError("skr_bps must be >= 0")
    if not 0.0 <= qber <= 0.5:
        raise ValueError("qber must be in [0, 0.5]")
    r = cfg.w_rate * (skr_bps / cfg.skr_ref) - cfg.w_err * (qber / cfg.qber_ref)
    if aborted:
        r -= cfg.abort_penalty
    return r


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Truncated discounted return per step, terminal bootstrap value zero."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def advantages(rewards: Sequence[float], values: Sequence[float],
               gamma: float) -> np.ndarray:
    """Raw discounted-return advantages (standardization happens at update)."""
    if len(rewards) == 0:
        raise ValueError("empty rollout")
    if len(rewards) != len(values):
        raise ValueError("rewards and values must have equal length")
    return discounted_returns(rewards, gamma) - np.asarray(values, dtype=float)


def _gaussian_log_prob(mean: nn.Var, log_std: nn.Var, u: np.ndarray,
                       mask: np.ndarray) -> nn.Var:
    """Masked diagonal-Gaussian log density of pre-squash actions (B,)."""
    ls = nn.clip(log_std, -5.0, 2.0)
    inv_sigma = nn.exp(nn.mul(ls, nn.Var(-1.0)))
    z = nn.mul(nn.Var(u) - mean, inv_sigma)
    terms = nn.mul(nn.square(z), nn.Var(-0.5)) - ls - nn.Var(0.5 * LOG2PI)
    return nn.vsum(nn.mul(terms, nn.Var(mask)), axis=1)


def ppo_update(buffer: RolloutBuffer, cfg: PpoConfig, nets: ActorCritic,
               opt_actor: Optional[nn.Adam] = None,
               opt_critic: Optional[nn.Adam] = None) -> Dict[str, float]:
    """Clipped-surrogate policy update plus squared-error critic fit.

    Runs ``cfg.epochs`` passes of shuffled minibatches, then clears the
    buffer. On a non-finite loss the parameters are restored to their
    pre-update snapshot and :class:`DivergenceError` is raised.
    """
    if len(buffer) < cfg.minibatch:
        raise ValueError("buffer shorter than one minibatch")
    opt_actor = opt_actor or nn.Adam(nets.actor_params(), lr=cfg.lr)
    opt_critic = opt_critic or nn.Adam(nets.critic_params(), lr=cfg.lr)
    obs = np.stack(buffer.obs)
    u = np.stack(buffer.pre_squash)
    masks = np.stack(buffer.masks)
    logp_old = np.asarray(buffer.log_probs)
    returns = discounted_returns(buffer.rewards, cfg.gamma)
    adv = returns - np.asarray(buffer.values)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    snap = nets.snapshot()
    rng = np.random.Generator(np.random.Philox(key=len(buffer)))
    policy_losses, value_losses, entropies = [], [], []
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(buffer))
            for start in range(0, len(order), cfg.minibatch):
                sel = order[start:start + cfg.minibatch]
                obs_v = nn.Var(obs[sel])
                mean = nets.forward_actor(obs_v)
                logp = _gaussian_log_prob(mean, nets.log_std, u[sel], masks[sel])
                ratio = nn.exp(logp - nn.Var(logp_old[sel]))
                adv_v = nn.Var(adv[sel])
                surr = nn.minimum(nn.mul(ratio, adv_v),
                                  nn.mul(nn.clip(ratio, 1.0 - cfg.clip_eps,
                                                 1.0 + cfg.clip_eps), adv_v))
                ls = nn.clip(nets.log_std, -5.0, 2.0)
                entropy = nn.vsum(nn.mul(ls + nn.Var(0.5 * (LOG2PI + 1.0)),
                                         nn.Var(masks[sel].mean(axis=0))))
                policy_loss = nn.neg(nn.vmean(surr)) - nn.mul(entropy, nn.Var(cfg.entropy_weight))
                v_pred = nets.forward_critic(nn.Var(obs[sel]))
                value_loss = nn.vmean(nn.square(v_pred - nn.Var(returns[sel])))
                if not (np.isfinite(policy_loss.data) and np.isfinite(value_loss.data)):
                    raise DivergenceError("non-finite PPO loss")
                nn.backward(policy_loss)
                opt_actor.step()
                nn.backward(value_loss)
                opt_critic.step()
                policy_losses.append(float(policy_loss.data))
                value_losses.append(float(value_loss.data))
                entropies.append(float(entropy.data))
    except (DivergenceError, nn.NonFiniteGradientError):
        nets.restore(snap)
        buffer.clear()
        raise
    report = {
        "mean_reward": float(np.mean(buffer.rewards)),
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
        "entropy": float(np.mean(entropies)),
    }
    buffer.clear()
    return report


def save_policy(path: str, nets: ActorCritic) -> None:
    meta = {
        "kind": "ppo",
        "obs_dim": nets.obs_dim,
        "act_dim": nets.act_dim,
        "hidden": list(nets.cfg.hidden),
    }
    nn.save_checkpoint(path, nets.state_arrays(), meta)


def load_policy(path: str, cfg: Optional[PpoConfig] = None) -> ActorCritic:
    arrays, meta = nn.load_checkpoint(path)
    cfg = cfg or PpoConfig()
    cfg = PpoConfig(**{**cfg.__dict__, "hidden": tuple(meta["hidden"])})
    nets = ActorCritic(cfg, obs_dim=int(meta["obs_dim"]), act_dim=int(meta["act_dim"]))
    nets.load_state_arrays(arrays)
    return nets
