"""Multi-agent actor-critic controller (MADDPG) and the rule-based controller.

Networks are small fully connected MLPs written directly in numpy with
hand-derived backpropagation.  Each building owns an actor that sees only
its own observation; each critic scores the joint observation and joint
action of the whole community.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientData, ShapeMismatch, StorageError
from .scenario import BuildingSpec
from .supervisor import battery_cmd_range
from .telemetry import OBS_FIELDS
from .twin import Action

ACT_DIM = 2  # (battery_cmd, ev_cmd)
EV_CONNECTED = OBS_FIELDS.index("ev_connected")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    batch: int = 256
    sigma: float = 0.3
    sigma_decay: float = 0.995
    episodes: int = 15
    lambda_peak: float = 0.01
    lambda_ev: float = 1.0
    seed: int = 42
    buffer_capacity: int = 100_000
    hidden: int = 64
    train_every: int = 2
    warmup: int = 1024
    reward_scale: float = 1.0
    bound_penalty: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        for name in ("lr_actor", "lr_critic", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch", "episodes", "buffer_capacity", "hidden", "train_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sigma < 0 or not 0 < self.sigma_decay <= 1:
            raise ValueError("sigma must be >= 0 and sigma_decay in (0, 1]")
        if self.bound_penalty < 0:
            raise ValueError("bound_penalty must be >= 0")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# MLP with exact backpropagation


def init_mlp(sizes, rng: np.random.Generator, final_scale: float = 3e-3) -> list[np.ndarray]:
    """He-uniform hidden layers, small uniform output layer; biases zero.

    Returns a flat list ``[W0, b0, W1, b1, ...]``.
    """
    params = []
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        lim = final_scale if i == n - 1 else math.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def mlp_forward(params, x: np.ndarray, tanh_out: bool):
    """ReLU hidden layers; output is tanh or linear.  Returns (y, cache)."""
    acts = [x]
    h = x
    n = len(params) // 2
    for i in range(n):
        z = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = np.maximum(z, 0.0)
        else:
            h = np.tanh(z) if tanh_out else z
        acts.append(h)
    return h, acts


def mlp_backward(params, cache, gy: np.ndarray, tanh_out: bool):
    """Gradients of ``sum(gy * y)`` w.r.t. every parameter and the input."""
    n = len(params) // 2
    grads = [None] * len(params)
    g = gy * (1.0 - cache[-1] ** 2) if tanh_out else gy
    for i in range(n - 1, -1, -1):
        h_in = cache[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params[2 * i].T
        if i > 0:
            g = g * (cache[i] > 0.0)
    return grads, g


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target, online, tau: float):
    """In-place ``target <- tau*online + (1-tau)*target``; returns ``target``."""
    if len(target) != len(online) or any(t.shape != o.shape for t, o in zip(target, online)):
        raise ShapeMismatch("target and online parameter shapes differ")
    for t, o in zip(target, online):
        t *= 1.0 - tau
        t += tau * o
    return target


# ---------------------------------------------------------------------------
# policy parameters


@dataclass
class AgentParams:
    actor: list
    critic: list
    actor_target: list
    critic_target: list


@dataclass
class PolicyParams:
    agent_ids: tuple
    obs_dim: int
    act_dim: int
    obs_scale: np.ndarray
    action_low: np.ndarray  # (n_agents, act_dim)
    action_high: np.ndarray
    agents: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def critic_in(self) -> int:
        return self.n_agents * (self.obs_dim + self.act_dim)

    def shapes(self) -> list:
        a = self.agents[0]
        return [list(p.shape) for p in a.actor], [list(p.shape) for p in a.critic]


def action_limits(buildings) -> tuple[np.ndarray, np.ndarray]:
    """Legal command ranges per building (zero for absent assets)."""
    lo = np.zeros((len(buildings), ACT_DIM))
    hi = np.zeros((len(buildings), ACT_DIM))
    for i, b in enumerate(buildings):
        if b.battery is not None:
            lo[i, 0], hi[i, 0] = -1.0, 1.0
        if b.charger is not None:
            lo[i, 1], hi[i, 1] = (-1.0 if b.charger.v2g_enabled else 0.0), 1.0
    return lo, hi


def init_policy(agent_ids, obs_dim: int, obs_scale, action_low, action_high, seed: int,
                hidden: int = 64) -> PolicyParams:
    rng = np.random.default_rng(seed)
    n = len(agent_ids)
    pol = PolicyParams(tuple(agent_ids), obs_dim, ACT_DIM, np.asarray(obs_scale, dtype=float),
                       np.asarray(action_low, dtype=float), np.asarray(action_high, dtype=float))
    for _ in range(n):
        actor = init_mlp((obs_dim, hidden, hidden, ACT_DIM), rng)
        critic = init_mlp((n * (obs_dim + ACT_DIM), hidden, hidden, 1), rng)
        pol.agents.append(AgentParams(actor, critic, [p.copy() for p in actor],
                                      [p.copy() for p in critic]))
    return pol


# ---------------------------------------------------------------------------
# acting


@dataclass(frozen=True)
class NoiseState:
    """Exploration noise source; the draw is a pure function of (seed, step, agent)."""

    seed: int
    step: int
    sigma: float


def act(policy: PolicyParams, agent: int, obs, explore: bool = False,
        noise_state: NoiseState | None = None) -> np.ndarray:
    """Deterministic actor output for one agent, optionally with Gaussian noise.

    The result is clipped to the agent's legal ranges and the EV command is
    zero whenever the observation says no vehicle is plugged in.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (policy.obs_dim,):
        raise ShapeMismatch(f"observation has shape {obs.shape}, expected ({policy.obs_dim},)")
    a, _ = mlp_forward(policy.agents[agent].actor, obs * policy.obs_scale, tanh_out=True)
    if explore and noise_state is not None and noise_state.sigma > 0:
        rng = np.random.default_rng([noise_state.seed, noise_state.step, agent])
        a = a + noise_state.sigma * rng.standard_normal(a.shape)
    a = np.clip(a, policy.action_low[agent], policy.action_high[agent])
    if policy.obs_dim == len(OBS_FIELDS) and obs[EV_CONNECTED] == 0.0:
        a[1] = 0.0
    return a


def rbc_act(frame, building: BuildingSpec, ev, dt_h: float) -> Action:
    """Rule-based controller: charge the EV flat out, self-consume PV with the battery.

    ``ev`` carries ``connected``, ``soc`` and ``soc_target`` (or is None).
    The battery charges from the PV surplus and discharges only to cover
    the building's own deficit, so it never exports.
    """
    ev_cmd = 0.0
    if ev is not None and ev.connected and ev.soc < ev.soc_target:
        ev_cmd = 1.0
    bat_cmd = 0.0
    b = building.battery
    if b is not None:
        load = frame.value(building.id, "load_kwh", 0.0)
        pv = frame.value(building.id, "pv_kwh", 0.0)
        full = b.rated_kw * dt_h
        surplus = pv - load
        if surplus > 0:
            bat_cmd = min(surplus / full, 1.0)
        elif surplus < 0:
            # discharge at most the AC energy the deficit needs
            bat_cmd = -min(-surplus / full, 1.0)
        soc = frame.value(building.id, "battery_soc", b.soc_init)
        lo, hi = battery_cmd_range(b, soc, dt_h)
        bat_cmd = min(max(bat_cmd, lo), hi)
    return Action(bat_cmd, ev_cmd)


def reward(outcome, lambda_peak: float = 0.01, lambda_ev: float = 1.0) -> np.ndarray:
    """Per-agent reward: own cost, shared quadratic import peak, own shortfall."""
    n = len(outcome.cost)
    peak = lambda_peak * max(0.0, outcome.community_kwh) ** 2 / n
    return -np.asarray(outcome.cost, dtype=float) - peak - lambda_ev * np.asarray(outcome.unmet_kwh)


# ---------------------------------------------------------------------------
# experience replay


@dataclass(frozen=True)
class Transition:
    """One joint step.  ``low``/``high`` are the command ranges the supervisor
    allowed at that step (state dependent); None means the static ranges."""

    obs: np.ndarray  # (n_agents, obs_dim)
    actions: np.ndarray  # (n_agents, act_dim)
    rewards: np.ndarray  # (n_agents,)
    next_obs: np.ndarray
    done: bool
    low: np.ndarray | None = None  # (n_agents, act_dim)
    high: np.ndarray | None = None
    next_low: np.ndarray | None = None
    next_high: np.ndarray | None = None


@dataclass(frozen=True)
class Batch:
    obs: np.ndarray  # (B, n_agents, obs_dim)
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray  # (B,)
    low: np.ndarray  # (B, n_agents, act_dim)
    high: np.ndarray
    next_low: np.ndarray
    next_high: np.ndarray

    def __len__(self):
        return len(self.done)

    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[i], self.actions[i], self.rewards[i], self.next_obs[i],
                           bool(self.done[i]), self.low[i], self.high[i], self.next_low[i],
                           self.next_high[i]) for i in range(len(self))]


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored as contiguous arrays."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, act_dim: int = ACT_DIM,
                 low=None, high=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.default_low = np.full((n_agents, act_dim), -1.0) if low is None else np.asarray(low, float)
        self.default_high = np.full((n_agents, act_dim), 1.0) if high is None else np.asarray(high, float)
        self.low = np.zeros((capacity, n_agents, act_dim))
        self.high = np.zeros((capacity, n_agents, act_dim))
        self.next_low = np.zeros((capacity, n_agents, act_dim))
        self.next_high = np.zeros((capacity, n_agents, act_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents, act_dim))
        self.rewards = np.zeros((capacity, n_agents))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition) -> None:
        i = self._pos
        if np.shape(t.obs) != self.obs.shape[1:] or np.shape(t.actions) != self.actions.shape[1:]:
            raise ShapeMismatch("transition does not match the buffer layout")
        self.obs[i] = t.obs
        self.actions[i] = t.actions
        self.rewards[i] = t.rewards
        self.next_obs[i] = t.next_obs
        self.done[i] = float(t.done)
        self.low[i] = self.default_low if t.low is None else t.low
        self.high[i] = self.default_high if t.high is None else t.high
        self.next_low[i] = self.default_low if t.next_low is None else t.next_low
        self.next_high[i] = self.default_high if t.next_high is None else t.next_high
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                     self.done[idx], self.low[idx], self.high[idx], self.next_low[idx],
                     self.next_high[idx])


def sample_indices(size: int, batch: int, seed: int, call_index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, call_index])
    return rng.integers(0, size, size=batch)


def replay_sample(buffer: ReplayBuffer, batch: int, seed: int, call_index: int = 0) -> Batch:
    """Uniform sample with replacement, a pure function of (seed, call_index)."""
    if buffer.size < 1:
        raise InsufficientData("replay buffer is empty")
    return buffer.take(sample_indices(buffer.size, batch, seed, call_index))


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Holds the optimizers and counters of one MADDPG training run."""

    def __init__(self, policy: PolicyParams, cfg: TrainConfig):
        self.policy = policy
        self.cfg = cfg
        self.actor_opt = [Adam(a.actor, cfg.lr_actor) for a in policy.agents]
        self.critic_opt = [Adam(a.critic, cfg.lr_critic) for a in policy.agents]
        self.buffer = ReplayBuffer(cfg.buffer_capacity, policy.n_agents, policy.obs_dim,
                                   policy.act_dim, policy.action_low, policy.action_high)
        self.updates = 0

    def train_step(self) -> dict:
        cfg = self.cfg
        if self.buffer.size < cfg.batch:
            raise InsufficientData(f"buffer holds {self.buffer.size} < batch {cfg.batch}")
        batch = replay_sample(self.buffer, cfg.batch, cfg.seed, self.updates)
        losses = update_on_batch(self.policy, self.actor_opt, self.critic_opt, batch, cfg)
        self.updates += 1
        return losses


def legal_action(raw: np.ndarray, low: np.ndarray, high: np.ndarray):
    """Clip a batch of actor outputs to per-sample ranges; returns (actions, live mask).

    The mask is zero where the range is a single point (absent or unplugged
    asset, or a pinned command), since the output has no effect there.
    """
    a = np.minimum(np.maximum(raw, low), high)
    return a, (high > low).astype(float)


def train_step(trainer: Trainer) -> dict:
    return trainer.train_step()


def _joint(obs_scaled: np.ndarray, actions: np.ndarray) -> np.ndarray:
    b = obs_scaled.shape[0]
    return np.concatenate([obs_scaled.reshape(b, -1), actions.reshape(b, -1)], axis=1)


def update_on_batch(policy: PolicyParams, actor_opt, critic_opt, batch: Batch,
                    cfg: TrainConfig, update_targets: bool = True) -> dict:
    """One MADDPG update of every agent on ``batch``; returns mean losses."""
    n, od, ad = policy.n_agents, policy.obs_dim, policy.act_dim
    bsz = len(batch)
    obs = batch.obs * policy.obs_scale
    nobs = batch.next_obs * policy.obs_scale
    # target joint action from the target actors
    next_act = np.empty((bsz, n, ad))
    for j, ag in enumerate(policy.agents):
        raw, _ = mlp_forward(ag.actor_target, nobs[:, j], tanh_out=True)
        # the critic only knows commands the supervisor would let through
        next_act[:, j] = np.minimum(np.maximum(raw, batch.next_low[:, j]), batch.next_high[:, j])
    x_next = _joint(nobs, next_act)
    x = _joint(obs, batch.actions)
    act_off = n * od
    critic_losses, actor_losses = [], []
    for i, ag in enumerate(policy.agents):
        q_next, _ = mlp_forward(ag.critic_target, x_next, tanh_out=False)
        y = cfg.reward_scale * batch.rewards[:, i] + cfg.gamma * (1.0 - batch.done) * q_next[:, 0]
        q, cache = mlp_forward(ag.critic, x, tanh_out=False)
        err = q[:, 0] - y
        critic_losses.append(float(np.mean(err * err)))
        grads, _ = mlp_backward(ag.critic, cache, (2.0 / bsz) * err[:, None], tanh_out=False)
        critic_opt[i].step(ag.critic, grads)

        # actor: ascend Q_i with the own action replaced by the actor output
        mu, a_cache = mlp_forward(ag.actor, obs[:, i], tanh_out=True)
        a_pi, mask = legal_action(mu, batch.low[:, i], batch.high[:, i])
        x_pi = x.copy()
        x_pi[:, act_off + i * ad: act_off + (i + 1) * ad] = a_pi
        q_pi, c_cache = mlp_forward(ag.critic, x_pi, tanh_out=False)
        actor_losses.append(float(-np.mean(q_pi)))
        _, gx = mlp_backward(ag.critic, c_cache, np.full((bsz, 1), -1.0 / bsz), tanh_out=False)
        # straight-through the clip, plus a pull back into the legal range
        g_mu = gx[:, act_off + i * ad: act_off + (i + 1) * ad] * mask
        g_mu = g_mu + (cfg.bound_penalty * 2.0 / bsz) * (mu - a_pi) * mask
        a_grads, _ = mlp_backward(ag.actor, a_cache, g_mu, tanh_out=True)
        actor_opt[i].step(ag.actor, a_grads)
    if update_targets:
        for ag in policy.agents:
            soft_update(ag.actor_target, ag.actor, cfg.tau)
            soft_update(ag.critic_target, ag.critic, cfg.tau)
    return {"critic_loss": float(np.mean(critic_losses)), "actor_loss": float(np.mean(actor_losses))}


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"RECPOL01"


def _arrays(policy: PolicyParams):
    for ag in policy.agents:
        for group in (ag.actor, ag.critic, ag.actor_target, ag.critic_target):
            yield from group


def save_checkpoint(path, policy: PolicyParams, config_hash: str = "") -> None:
    """Write a JSON header followed by little-endian float64 arrays."""
    actor_shapes, critic_shapes = policy.shapes()
    header = {
        "agent_ids": list(policy.agent_ids),
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "actor_shapes": actor_shapes,
        "critic_shapes": critic_shapes,
        "config_hash": config_hash,
        "obs_scale": policy.obs_scale.tolist(),
        "action_low": policy.action_low.tolist(),
        "action_high": policy.action_high.tolist(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _arrays(policy)]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, agent_ids=None, obs_dim: int | None = None) -> PolicyParams:
    """Read a checkpoint; refuse it when shapes disagree with the expectation."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ShapeMismatch(f"{path} is not a policy checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    ids = tuple(header["agent_ids"])
    if agent_ids is not None and tuple(agent_ids) != ids:
        raise ShapeMismatch(f"checkpoint agents {ids} do not match {tuple(agent_ids)}")
    if obs_dim is not None and obs_dim != header["obs_dim"]:
        raise ShapeMismatch(f"checkpoint obs_dim {header['obs_dim']} != {obs_dim}")
    n, od, ad = len(ids), header["obs_dim"], header["act_dim"]
    actor_shapes = [tuple(s) for s in header["actor_shapes"]]
    critic_shapes = [tuple(s) for s in header["critic_shapes"]]
    if actor_shapes[0][0] != od or actor_shapes[-1][-1] != ad or critic_shapes[0][0] != n * (od + ad):
        raise ShapeMismatch("checkpoint layer shapes are inconsistent with its dimensions")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(data):
            raise ShapeMismatch("checkpoint is truncated")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float).reshape(shape)
        off = end
        return arr

    pol = PolicyParams(ids, od, ad, np.array(header["obs_scale"], dtype=float),
                       np.array(header["action_low"], dtype=float),
                       np.array(header["action_high"], dtype=float))
    for _ in ids:
        groups = [[take(s) for s in shapes]
                  for shapes in (actor_shapes, critic_shapes, actor_shapes, critic_shapes)]
        pol.agents.append(AgentParams(*groups))
    if off != len(data):
        raise ShapeMismatch("checkpoint has trailing bytes")
    for a in _arrays(pol):
        if not np.all(np.isfinite(a)):
            raise ShapeMismatch("checkpoint contains non-finite weights")
    return pol
