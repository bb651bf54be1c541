"""Training loop, greedy evaluation and the checkpoint file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .agents import (ddpg_update, dqn_update, epsilon_greedy, hard_update, linear_epsilon)
from .nn import Adam, Network, conv_actor_layers, conv_critic_layers, conv_q_layers
from .replay import ReplayBuffer

MAGIC = b"NBVCKPT1"


class TrainingDivergedError(RuntimeError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "dqn"            # "dqn" or "ddpg"
    gamma: float = 0.99
    lr: float = 1e-4
    actor_lr: Optional[float] = None  # ddpg actor; defaults to lr
    batch_size: int = 32
    replay_capacity: int = 50_000
    warmup: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    target_sync: int = 1_000          # hard sync period in updates (dqn)
    tau_soft: float = 0.005           # soft target rate (ddpg)
    noise_sigma: float = 0.2          # ddpg exploration noise, fraction of the action range
    total_steps: int = 200_000
    train_every: int = 1
    grad_clip: Optional[float] = 10.0
    reward_scale: float = 1.0         # multiplies rewards before they enter the replay buffer
    hidden: int = 256
    layers: Optional[list] = None     # explicit layer list overriding the default image net
    critic_layers: Optional[list] = None
    dtype: str = "float32"
    checkpoint_every: int = 0         # env steps; 0 saves only at the end
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("dqn", "ddpg"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.reward_scale > 0.0:
            raise ValueError("reward_scale must be positive")
        if self.batch_size < 1 or self.replay_capacity < 1 or self.total_steps < 0:
            raise ValueError("batch_size and replay_capacity must be positive, total_steps non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CurveRow:
    episode: int
    cumulative_reward: float
    steps: int
    coverage: float


# --------------------------------------------------------------------------
# Agents
# --------------------------------------------------------------------------

def _continuous(env) -> bool:
    return bool(getattr(getattr(env, "config", None), "continuous", False))


class DqnAgent:
    algorithm = "dqn"

    def __init__(self, qnet: Network, target: Network | None = None, lr: float = 1e-4):
        self.qnet = qnet
        self.target = target if target is not None else qnet.clone()
        self.opt = Adam(qnet.n_params, lr, dtype=qnet.dtype)

    @classmethod
    def create(cls, state_shape, n_actions: int, cfg: TrainConfig) -> "DqnAgent":
        layers = cfg.layers if cfg.layers is not None else conv_q_layers(n_actions, cfg.hidden)
        return cls(Network(layers, state_shape, cfg.dtype, seed=cfg.seed), lr=cfg.lr)

    def networks(self) -> dict[str, Network]:
        return {"q": self.qnet, "q_target": self.target}

    def optimizers(self) -> dict[str, Adam]:
        return {"q": self.opt}

    def q_values(self, state) -> np.ndarray:
        return self.qnet.forward(np.asarray(state)[None])[0]

    def greedy_action(self, state) -> int:
        return int(np.argmax(self.q_values(state)))

    def check_env(self, env) -> None:
        if tuple(self.qnet.input_shape) != tuple(env.state_shape):
            raise ArchitectureMismatchError(
                f"network input {self.qnet.input_shape} does not match environment state {env.state_shape}")
        if self.qnet.output_shape != (env.n_actions,) or _continuous(env):
            raise ArchitectureMismatchError("Q-network head does not match the discrete action space")


class DdpgAgent:
    algorithm = "ddpg"

    def __init__(self, actor: Network, critic: Network, lr: float = 1e-4, actor_lr: float | None = None):
        self.actor, self.critic = actor, critic
        self.actor_t, self.critic_t = actor.clone(), critic.clone()
        self.actor_opt = Adam(actor.n_params, actor_lr or lr, dtype=actor.dtype)
        self.critic_opt = Adam(critic.n_params, lr, dtype=critic.dtype)

    @classmethod
    def create(cls, state_shape, action_high, cfg: TrainConfig) -> "DdpgAgent":
        high = [float(a) for a in action_high]
        actor_layers = cfg.layers if cfg.layers is not None else conv_actor_layers(high, cfg.hidden)
        critic_layers = cfg.critic_layers if cfg.critic_layers is not None else conv_critic_layers(len(high), cfg.hidden)
        actor = Network(actor_layers, state_shape, cfg.dtype, seed=cfg.seed)
        critic = Network(critic_layers, state_shape, cfg.dtype, seed=cfg.seed + 1)
        return cls(actor, critic, cfg.lr, cfg.actor_lr)

    def networks(self) -> dict[str, Network]:
        return {"actor": self.actor, "critic": self.critic, "actor_target": self.actor_t,
                "critic_target": self.critic_t}

    def optimizers(self) -> dict[str, Adam]:
        return {"actor": self.actor_opt, "critic": self.critic_opt}

    def greedy_action(self, state) -> np.ndarray:
        return self.actor.forward(np.asarray(state)[None])[0].astype(np.float64)

    def check_env(self, env) -> None:
        if tuple(self.actor.input_shape) != tuple(env.state_shape):
            raise ArchitectureMismatchError(
                f"network input {self.actor.input_shape} does not match environment state {env.state_shape}")
        if not _continuous(env) or self.actor.output_shape != (3,):
            raise ArchitectureMismatchError("actor head does not match the continuous action space")


def make_agent(env, cfg: TrainConfig):
    if cfg.algorithm == "dqn":
        return DqnAgent.create(env.state_shape, env.n_actions, cfg)
    return DdpgAgent.create(env.state_shape, env.action_high, cfg)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
# Layout: 8-byte magic "NBVCKPT1", little-endian uint64 header length, UTF-8
# JSON header, then raw little-endian arrays back to back. The header lists
# every array as {name, dtype, shape, offset, nbytes} relative to the data
# section, plus network descriptors, optimiser step counts, RNG states and
# counters.

def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    table, blobs, off = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": len(raw)})
        blobs.append(raw)
        off += len(raw)
    head = json.dumps({**header, "arrays": table}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    base = 16 + n
    arrays = {}
    for e in header.pop("arrays"):
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def _agent_state(agent) -> tuple[dict, dict[str, np.ndarray]]:
    header = {"algorithm": agent.algorithm,
              "networks": {k: n.descriptor() for k, n in agent.networks().items()},
              "adam_t": {k: o.t for k, o in agent.optimizers().items()}}
    arrays = {f"net_{k}": n.theta for k, n in agent.networks().items()}
    for k, o in agent.optimizers().items():
        arrays[f"adam_{k}_m"] = o.m
        arrays[f"adam_{k}_v"] = o.v
    return header, arrays


def _restore_agent(header: dict, arrays: dict[str, np.ndarray], cfg: TrainConfig | None = None):
    nets = {k: Network.from_descriptor(d) for k, d in header["networks"].items()}
    for k, n in nets.items():
        n.set_params(arrays[f"net_{k}"])
    lr = cfg.lr if cfg else 1e-4
    if header["algorithm"] == "dqn":
        agent = DqnAgent(nets["q"], nets["q_target"], lr)
    else:
        agent = DdpgAgent(nets["actor"], nets["critic"], lr, cfg.actor_lr if cfg else None)
        agent.actor_t, agent.critic_t = nets["actor_target"], nets["critic_target"]
    for k, o in agent.optimizers().items():
        o.m[...] = arrays[f"adam_{k}_m"]
        o.v[...] = arrays[f"adam_{k}_v"]
        o.t = int(header["adam_t"][k])
    return agent


def save_agent(path, agent) -> None:
    header, arrays = _agent_state(agent)
    write_checkpoint(path, header, arrays)


def load_agent(path):
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"]) if "config" in header else None
    return _restore_agent(header, arrays, cfg)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    agent: object
    curve: list[CurveRow] = field(default_factory=list)
    steps: int = 0
    updates: int = 0


def write_curve_csv(curve: Sequence[CurveRow], path) -> None:
    lines = ["episode,cumulative_reward,steps,coverage"]
    lines += [f"{r.episode},{r.cumulative_reward!r},{r.steps},{r.coverage!r}" for r in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Trainer:
    def __init__(self, env, cfg: TrainConfig, checkpoint: str | Path | None):
        self.env, self.cfg, self.ckpt_path = env, cfg, checkpoint
        self.rng = np.random.default_rng(cfg.seed)
        self.agent = make_agent(env, cfg)
        if cfg.algorithm == "dqn":
            self.replay = ReplayBuffer(cfg.replay_capacity, env.state_shape)
        else:
            self.replay = ReplayBuffer(cfg.replay_capacity, env.state_shape, (3,), np.float64)
        self.step = self.updates = 0
        self.curve: list[CurveRow] = []
        self.next_ckpt = cfg.checkpoint_every or math.inf

    # state (de)serialisation ------------------------------------------------
    def save(self, path) -> None:
        header, arrays = _agent_state(self.agent)
        header.update({"config": self.cfg.to_dict(), "step": self.step, "updates": self.updates,
                       "rng": self.rng.bit_generator.state,
                       "env_rng": self.env.rng.bit_generator.state if hasattr(self.env, "rng") else None,
                       "curve": [asdict(r) for r in self.curve]})
        arrays.update(self.replay.arrays())
        write_checkpoint(path, header, arrays)

    def load(self, path) -> None:
        header, arrays = read_checkpoint(path)
        if header["algorithm"] != self.cfg.algorithm:
            raise ArchitectureMismatchError("checkpoint algorithm differs from the configuration")
        self.agent = _restore_agent(header, arrays, self.cfg)
        self.agent.check_env(self.env)
        self.replay.load_arrays(arrays)
        self.step, self.updates = int(header["step"]), int(header["updates"])
        self.rng.bit_generator.state = header["rng"]
        if header.get("env_rng") is not None:
            self.env.rng.bit_generator.state = header["env_rng"]
        self.curve = [CurveRow(**r) for r in header["curve"]]
        if self.cfg.checkpoint_every:
            self.next_ckpt = (self.step // self.cfg.checkpoint_every + 1) * self.cfg.checkpoint_every

    # acting -------------------------------------------------------------------
    def act(self, state):
        cfg = self.cfg
        if cfg.algorithm == "dqn":
            eps = linear_epsilon(self.step, cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
            if eps > 0.0 and self.rng.random() < eps:
                return int(self.rng.integers(self.env.n_actions))
            return self.agent.greedy_action(state)
        high = np.asarray(self.env.action_high, dtype=np.float64)
        if self.step < cfg.warmup:
            return self.rng.uniform(-high, high)
        a = self.agent.greedy_action(state) + self.rng.normal(0.0, cfg.noise_sigma, 3) * high
        return np.clip(a, -high, high)

    def learn(self) -> float:
        cfg = self.cfg
        batch = self.replay.sample(cfg.batch_size, self.rng, np.dtype(cfg.dtype))
        ag = self.agent
        if cfg.algorithm == "dqn":
            loss = dqn_update(ag.qnet, ag.target, batch, cfg.gamma, ag.opt, cfg.grad_clip)
        else:
            a_loss, loss = ddpg_update(ag.actor, ag.critic, ag.actor_t, ag.critic_t, batch, cfg.gamma,
                                       cfg.tau_soft, ag.actor_opt, ag.critic_opt, cfg.grad_clip)
            if not math.isfinite(a_loss):
                loss = math.nan
        self.updates += 1
        if cfg.algorithm == "dqn" and self.updates % cfg.target_sync == 0:
            hard_update(ag.target, ag.qnet)
        return loss

    def run(self, on_episode: Callable[[CurveRow], None] | None = None) -> TrainResult:
        cfg, env = self.cfg, self.env
        while self.step < cfg.total_steps:
            state, info = env.reset()
            ret, n, done = 0.0, 0, False
            while not done and self.step < cfg.total_steps:
                action = self.act(state)
                nxt, reward, done, info = env.step(action)
                self.replay.add(state, action, reward * cfg.reward_scale, nxt, bool(info.get("terminal", done)))
                state = nxt
                ret += reward
                n += 1
                self.step += 1
                if self.step >= cfg.warmup and self.step % cfg.train_every == 0 and len(self.replay) >= cfg.batch_size:
                    loss = self.learn()
                    if not math.isfinite(loss):
                        diag = Path(str(self.ckpt_path or "diverged") + ".diverged")
                        self.save(diag)
                        raise TrainingDivergedError(
                            f"non-finite loss at step {self.step} (update {self.updates}); state saved to {diag}")
            if not done:
                break  # budget ran out mid-episode; the partial episode is not recorded
            row = CurveRow(len(self.curve) + 1, ret, n, float(info.get("coverage", math.nan)))
            self.curve.append(row)
            if self.ckpt_path and self.step >= self.next_ckpt:
                self.save(self.ckpt_path)
                self.next_ckpt = (self.step // cfg.checkpoint_every + 1) * cfg.checkpoint_every
            if on_episode:
                on_episode(row)
        if self.ckpt_path:
            self.save(self.ckpt_path)
        return TrainResult(self.agent, self.curve, self.step, self.updates)


def train(env, config: TrainConfig, checkpoint=None, resume=None,
          on_episode: Callable[[CurveRow], None] | None = None) -> TrainResult:
    """Train an agent on ``env`` (anything with reset/step/state_shape and n_actions or action_high).

    ``checkpoint`` is written every ``checkpoint_every`` steps (at the next
    episode boundary) and at the end; ``resume`` continues from such a file,
    including replay contents and all random-number streams.
    """
    t = _Trainer(env, config, checkpoint)
    if resume is not None:
        t.load(resume)
    return t.run(on_episode)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalResult:
    logs: list
    solved_ratio: float
    median_steps: float
    median_distance: float
    coverage_curve: list[float]

    def to_dict(self) -> dict:
        return {"solved_ratio": self.solved_ratio, "median_steps": self.median_steps,
                "median_distance": self.median_distance, "coverage_curve": self.coverage_curve,
                "episodes": len(self.logs)}


def run_greedy(agent, env, scene=None):
    """One greedy episode; returns the environment's EpisodeLog."""
    state, _ = env.reset(scene) if scene is not None else env.reset()
    done = False
    while not done:
        state, _, done, _ = env.step(agent.greedy_action(state))
    return env.log


def evaluate(agent, env, scenes: Sequence | None = None, episodes: int = 1, log_dir=None) -> EvalResult:
    """Greedy rollouts on each scene (or ``episodes`` resets of ``env``)."""
    from ..env import coverage_curve

    if isinstance(agent, (str, Path)):
        agent = load_agent(agent)
    agent.check_env(env)
    targets = list(scenes) if scenes is not None else [None] * episodes
    if not targets:
        raise ValueError("nothing to evaluate")
    logs = []
    for i, sc in enumerate(targets):
        log = run_greedy(agent, env, sc)
        logs.append(log)
        if log_dir is not None:
            name = getattr(sc, "name", None) or f"episode_{i:04d}"
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            log.write(Path(log_dir) / f"{name}.jsonl")
    solved = [l.solved for l in logs]
    return EvalResult(logs, sum(solved) / len(logs), float(np.median([l.steps for l in logs])),
                      float(np.median([l.distance for l in logs])), coverage_curve(logs))
