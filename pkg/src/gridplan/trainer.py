"""Training loop: TD targets, weighted loss, priority refresh, target sync.

One thread owns everything. Replay stores fixed-length observation windows
driven from zero recurrent state, and rollouts query the network the same
way: a sliding window of the last seq_len frames (repeat-padded at episode
start) re-driven from zeros. Acting and learning therefore evaluate the
identical function; the incremental `qnet.step` path exists for streaming
use but is not what the trainer optimizes against.

Determinism: a single seed fans out through numpy SeedSequence spawns to
network init, action selection, replay sampling and start sampling, so a
repeated run reproduces the training log byte for byte.
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .gridworld import GridEnv, flood_distances
from .metrics import EpisodeMetrics, episode_metrics, format_value
from .policy import ExplorationSchedule, greedy_action, select_action
from .qnet import (
    QNetParams,
    clone_params,
    forward,
    save_checkpoint,
    target_sync,
)
from .replay import ReplayBuffer, Transition


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted after dumping diagnostics."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    gamma: float = 0.99
    batch_size: int = 64
    seq_len: int = 10
    total_steps: int = 20_000
    warmup_steps: int = 1000
    sync_period: int = 500  # in gradient updates
    grad_clip_norm: float = 10.0
    seed: int = 0
    train_every: int = 4  # environment steps per gradient update
    optimizer: str = "sgd"  # "sgd" (plain fixed-step) or "adam"
    episode_step_limit: int | None = None  # None: 4 * (width + height)
    replay_capacity: int = 50_000
    alpha_similarity: float = 0.5
    priority_floor: float = 0.01
    priority_exponent: float = 0.6
    beta_initial: float = 0.4  # importance exponent, annealed to 1.0
    uniform_priorities: bool = False  # ablation: plain uniform replay
    randomize_starts: bool = True  # episodes start from random reachable cells
    # Positive affine reward scaling applied only inside TD computations.
    # Leaves the optimal policy unchanged while keeping Q at a scale that a
    # fixed learning rate can track; stored transitions and logged episode
    # rewards stay at the environment's native scale.
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps cannot exceed total_steps")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.train_every < 1 or self.sync_period < 1:
            raise ValueError("train_every and sync_period must be >= 1")
        if not 0.0 <= self.beta_initial <= 1.0:
            raise ValueError("beta_initial must be in [0, 1]")
        if self.reward_scale <= 0.0:
            raise ValueError("reward_scale must be positive")


class Sgd:
    """Fixed-step gradient descent on clipped gradients."""

    def __init__(self, tensors, learning_rate: float):
        self.tensors = list(tensors)
        self.learning_rate = learning_rate

    def apply(self) -> None:
        for t in self.tensors:
            t.data -= self.learning_rate * t.grad


class Adam:
    """Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8."""

    def __init__(self, tensors, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def apply(self) -> None:
        self.t += 1
        for i, tensor in enumerate(self.tensors):
            g = tensor.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            tensor.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: QNetParams):
    if cfg.optimizer == "adam":
        return Adam(params.tensors(), cfg.learning_rate)
    return Sgd(params.tensors(), cfg.learning_rate)


def clip_gradients(tensors, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = nm.global_norm(tensors)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm


def window_q(params: QNetParams, window) -> tuple[np.ndarray, np.ndarray]:
    """Q values and fused features for one observation window, no gradients."""
    obs = np.stack(window).astype(np.float64)[None]
    with nm.no_grad():
        q, diag = forward(params, obs)
    return q.data[0], diag["fused"].data[0]


def td_targets(target_params: QNetParams, transitions, gamma: float,
               reward_scale: float = 1.0) -> np.ndarray:
    """scale*r + (1 - done) * gamma * max_a Q_target(s', a), driven from zeros."""
    next_obs = np.stack([t.next_frames() for t in transitions]).astype(np.float64)
    with nm.no_grad():
        q_next, _ = forward(target_params, next_obs)
    max_next = q_next.data.max(axis=-1)
    rewards = np.array([t.reward for t in transitions]) * reward_scale
    cont = np.array([0.0 if t.done else 1.0 for t in transitions])
    return rewards + cont * gamma * max_next


def td_errors(online: QNetParams, target_params: QNetParams, transitions,
              gamma: float, reward_scale: float = 1.0) -> np.ndarray:
    """delta_i = target_i - Q_online(s_i, a_i); no gradients recorded."""
    targets = td_targets(target_params, transitions, gamma, reward_scale)
    obs = np.stack([t.frames for t in transitions]).astype(np.float64)
    with nm.no_grad():
        q_all, _ = forward(online, obs)
    actions = np.array([t.action for t in transitions])
    q_taken = q_all.data[np.arange(len(transitions)), actions]
    return targets - q_taken


def train_step(online: QNetParams, target_params: QNetParams,
               buffer: ReplayBuffer, optimizer, cfg: TrainConfig,
               beta: float, rng: np.random.Generator) -> dict:
    """One gradient update on a prioritized batch; returns a log record."""
    transitions, ids, weights = buffer.sample(cfg.batch_size, beta, rng)
    targets = td_targets(target_params, transitions, cfg.gamma,
                         cfg.reward_scale)

    obs = np.stack([t.frames for t in transitions]).astype(np.float64)
    q_all, _ = forward(online, obs)
    actions = np.array([t.action for t in transitions])
    q_taken = q_all[np.arange(len(transitions)), actions]
    diff = q_taken - nm.Tensor(targets)
    loss = nm.tmean(nm.Tensor(weights) * diff * diff)

    loss_value = loss.item()
    deltas = targets - q_taken.data
    if not np.isfinite(loss_value):
        raise TrainingDiverged(f"non-finite loss {loss_value}")

    nm.zero_grads(online.tensors())
    nm.backward(loss)
    grad_norm = clip_gradients(online.tensors(), cfg.grad_clip_norm)
    optimizer.apply()
    buffer.update_priorities(ids, deltas)
    return {
        "loss": loss_value,
        "mean_q": float(q_all.data.mean()),
        "grad_norm": grad_norm,
        "mean_abs_delta": float(np.abs(deltas).mean()),
    }


# CSV view of the log; rows also carry buffer_size for in-process consumers.
TRAINLOG_FIELDS = ("step", "loss", "mean_q", "epsilon", "temperature",
                   "episode_reward", "episode_len", "outcome")


def trainlog_to_csv(rows: list[dict]) -> str:
    lines = [",".join(TRAINLOG_FIELDS)]
    for row in rows:
        cells = []
        for name in TRAINLOG_FIELDS:
            v = row.get(name, "")
            cells.append(format_value(v) if v != "" else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: QNetParams
    log_rows: list[dict]
    env_steps: int
    episodes: int
    train_updates: int

    def log_csv(self) -> str:
        return trainlog_to_csv(self.log_rows)


def run_training(env: GridEnv, qnet_params: QNetParams, cfg: TrainConfig,
                 schedule: ExplorationSchedule | None = None,
                 dump_path=None, checkpoint_dir=None,
                 checkpoint_every: int | None = None,
                 episode_hook=None) -> TrainResult:
    """Train until cfg.total_steps environment steps; deterministic in seed.

    On a non-finite loss or non-finite acting-time Q values the run
    aborts: a checkpoint plus a JSON snapshot
    of the failure context goes to `dump_path` (when given) and
    TrainingDiverged propagates. Episodes cut off by the step limit are
    stored as not-done so the target keeps bootstrapping through them.

    `episode_hook(env_steps, episodes, params)` runs after each episode;
    returning True stops training early (used for eval-driven stopping).
    `checkpoint_dir` + `checkpoint_every` write periodic parameter
    snapshots every that many environment steps, plus a final one.
    """
    if qnet_params.cfg.seq_len != cfg.seq_len:
        raise ValueError(f"network seq_len {qnet_params.cfg.seq_len} != "
                         f"training seq_len {cfg.seq_len}")
    schedule = schedule or ExplorationSchedule()
    seq = np.random.SeedSequence(cfg.seed)
    policy_rng, buffer_rng, start_rng = (np.random.default_rng(s)
                                         for s in seq.spawn(3))
    starts = reachable_free_cells(env) if cfg.randomize_starts else None
    online = qnet_params
    target = clone_params(online)
    buffer = ReplayBuffer(cfg.replay_capacity,
                          alpha_similarity=cfg.alpha_similarity,
                          priority_floor=cfg.priority_floor,
                          priority_exponent=cfg.priority_exponent,
                          uniform=cfg.uniform_priorities)
    optimizer = make_optimizer(cfg, online)
    step_limit = cfg.episode_step_limit or 4 * (env.map.width + env.map.height)
    min_fill = max(cfg.batch_size, cfg.warmup_steps)

    log_rows: list[dict] = []
    env_steps = 0
    episodes = 0
    updates = 0
    next_checkpoint = checkpoint_every

    def maybe_checkpoint(tag):
        if checkpoint_dir is not None:
            save_checkpoint(f"{checkpoint_dir}/checkpoint_{tag}.npz", online)

    try:
        while env_steps < cfg.total_steps:
            start = None
            if starts is not None:
                start = starts[start_rng.integers(len(starts))]
            obs = env.reset(start=start)
            frame = obs.channels.astype(np.uint8)
            window = deque([frame] * cfg.seq_len, maxlen=cfg.seq_len)
            q_vec, fused = window_q(online, window)
            if not np.all(np.isfinite(q_vec)):
                raise TrainingDiverged(f"non-finite Q at step {env_steps}")
            episode_reward = 0.0
            ep_steps = 0
            done = False

            while not done and ep_steps < step_limit and env_steps < cfg.total_steps:
                action = select_action(q_vec, schedule, env_steps, episodes,
                                       policy_rng)
                stored = np.stack(window)
                res = env.step(action)
                next_frame = res.observation.channels.astype(np.uint8)
                window.append(next_frame)
                q_next, fused_next = window_q(online, window)
                if not np.all(np.isfinite(q_next)):
                    raise TrainingDiverged(f"non-finite Q at step {env_steps}")

                # Insertion-time priority from the acting network's own
                # next-state values as the bootstrap estimate.
                cont = 0.0 if res.done else 1.0
                delta_est = (res.reward * cfg.reward_scale
                             + cont * cfg.gamma * q_next.max()
                             - q_vec[action])
                buffer.push(Transition(
                    frames=stored, action=action, reward=res.reward,
                    next_frame=next_frame, done=res.done,
                    h_t=fused, h_next=fused_next), delta_est)

                q_vec, fused = q_next, fused_next
                episode_reward += res.reward
                ep_steps += 1
                env_steps += 1
                done = res.done

                if len(buffer) >= min_fill and env_steps % cfg.train_every == 0:
                    frac = min(1.0, env_steps / cfg.total_steps)
                    beta = cfg.beta_initial + (1.0 - cfg.beta_initial) * frac
                    record = train_step(online, target, buffer, optimizer,
                                        cfg, beta, buffer_rng)
                    updates += 1
                    if updates % cfg.sync_period == 0:
                        target_sync(online, target)
                    log_rows.append({
                        "step": env_steps, "loss": record["loss"],
                        "mean_q": record["mean_q"],
                        "epsilon": schedule.epsilon_at(env_steps),
                        "temperature": schedule.temperature_at(episodes),
                        "buffer_size": len(buffer),
                    })

            episodes += 1
            if done:
                outcome = "goal"
            elif ep_steps >= step_limit:
                outcome = "timeout"
            else:
                outcome = "budget"
            log_rows.append({
                "step": env_steps,
                "epsilon": schedule.epsilon_at(env_steps),
                "temperature": schedule.temperature_at(episodes - 1),
                "buffer_size": len(buffer),
                "episode_reward": episode_reward,
                "episode_len": ep_steps,
                "outcome": outcome,
            })
            if next_checkpoint is not None and env_steps >= next_checkpoint:
                maybe_checkpoint(env_steps)
                next_checkpoint += checkpoint_every
            if episode_hook is not None and episode_hook(env_steps, episodes,
                                                         online):
                break
    except TrainingDiverged as exc:
        if dump_path is not None:
            save_checkpoint(str(dump_path) + ".checkpoint.npz", online)
            dump = {
                "error": str(exc), "env_steps": env_steps,
                "episodes": episodes, "updates": updates,
                "config": asdict(cfg),
            }
            with open(str(dump_path) + ".json", "w", encoding="utf-8") as fh:
                json.dump(dump, fh, indent=2, sort_keys=True)
        raise

    maybe_checkpoint("final")
    return TrainResult(params=online, log_rows=log_rows, env_steps=env_steps,
                       episodes=episodes, train_updates=updates)


# -- evaluation ---------------------------------------------------------------


def reachable_free_cells(env: GridEnv) -> list:
    """Cells on the static map with a free path to the goal (goal excluded)."""
    dist = flood_distances(env.map.blocked, env.map.goal)
    cells = [(x, y) for x in range(env.map.width) for y in range(env.map.height)
             if dist[y, x] > 0]
    return sorted(cells)


def run_greedy_episode(params: QNetParams, env: GridEnv, start=None,
                       step_limit: int | None = None) -> tuple[list, bool]:
    """Greedy rollout (no exploration); returns (visited cells, reached goal)."""
    obs = env.reset(start=start)
    frame = obs.channels.astype(np.uint8)
    window = deque([frame] * params.cfg.seq_len, maxlen=params.cfg.seq_len)
    limit = step_limit or 4 * (env.map.width + env.map.height)
    visited = [env.agent.position]
    for _ in range(limit):
        q_vec, _ = window_q(params, window)
        res = env.step(greedy_action(q_vec))
        visited.append(res.state.position)
        if res.done:
            return visited, True
        window.append(res.observation.channels.astype(np.uint8))
    return visited, False


def evaluate(params: QNetParams, env: GridEnv, episodes: int, seed: int,
             randomize_starts: bool = True,
             step_limit: int | None = None) -> list[EpisodeMetrics]:
    """Greedy evaluation episodes with optional randomized start cells.

    Starts are drawn from static cells that can reach the goal, so each
    episode has a well-defined optimal length and the per-episode success
    rate is meaningful.
    """
    starts = reachable_free_cells(env) if randomize_starts else None
    out = []
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        start = starts[rng.integers(len(starts))] if starts else None
        t0 = time.perf_counter()
        visited, success = run_greedy_episode(params, env, start=start,
                                              step_limit=step_limit)
        elapsed = time.perf_counter() - t0
        out.append(episode_metrics(env.map, visited, success, seed=seed,
                                   time_seconds=elapsed))
    return out
