"""Experiment suites: training harness, evaluation cells, reports.

A suite is a grid of cells (map x algorithm x seed, plus density for
sweeps). Each cell produces `episodes` evaluation episodes from the map's
canonical start, so a cell is a fixed navigation instance and fractional
success rates come from averaging over maps, seeds and obstacle dynamics.

Reports are a directory: `config.ini` (fully resolved), `episodes.csv`
(one row per episode, written incrementally so interrupted runs keep
completed cells), `summary.json` (aggregates recomputable from the CSV),
plus per-run training logs and checkpoints for training modes.

Cells fan out to worker processes when `workers > 1`; results are merged
in task order, which is itself sorted, so the episode CSV is byte-identical
to a serial run (the wall-clock `time_s` column excepted).
"""
from __future__ import annotations

import json
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import (
    AGENT_ALGO,
    CLASSICAL_ALGOS,
    ExperimentConfig,
    parse_config_text,
    resolved_text,
)
from .gridworld import (
    DynamicsConfig,
    GridEnv,
    GridMap,
    generate_map,
    load_map,
    map_from_text,
    map_to_text,
)
from .metrics import (
    EpisodeMetrics,
    episode_metrics,
    episode_rows_to_csv,
    summarize,
    summary_as_dict,
)
from .planners import execute_adaptive, execute_blind
from .policy import ExplorationSchedule, greedy_action
from .qnet import QNetConfig, QNetParams, clone_params, save_checkpoint
from .trainer import TrainResult, evaluate, run_training, trainlog_to_csv, window_q

VARIANT_LABELS = {"full": "full", "A1": "A1", "A2": "A2", "A3": "A3"}


def open_grid(width: int, height: int) -> GridMap:
    """Obstacle-free map, corner to corner; dynamics supply the obstacles."""
    return GridMap(width=width, height=height,
                   blocked=np.zeros((height, width), dtype=bool),
                   start=(0, 0), goal=(width - 1, height - 1))


def make_maps(cfg: ExperimentConfig) -> list[tuple[str, GridMap]]:
    """Materialize the map set: (map_id, GridMap) pairs, order fixed."""
    spec = cfg.map_spec
    if spec.family == "file":
        return [(Path(spec.file).stem, load_map(spec.file))]
    size = f"{spec.width}x{spec.height}"
    if spec.family == "open":
        return [(f"open-{size}-s{spec.seed + i}",
                 open_grid(spec.width, spec.height))
                for i in range(spec.count)]
    return [(f"{spec.family}-{size}-s{spec.seed + i}",
             generate_map(spec.family, (spec.width, spec.height),
                          spec.seed + i))
            for i in range(spec.count)]


def build_qnet_config(cfg: ExperimentConfig, grid_map: GridMap,
                      variant: str = "full") -> QNetConfig:
    net = cfg.network
    return QNetConfig(
        height=grid_map.height, width=grid_map.width,
        embed_channels=net.embed_channels, hidden_size=net.hidden_size,
        heads=net.heads, downsample=net.downsample, seq_len=net.seq_len,
        attention_scale=net.attention_scale,
        use_spatial_attention=net.use_spatial_attention and variant != "A1",
        use_long_branch=net.use_long_branch and variant != "A2",
    )


def variant_schedule(cfg: ExperimentConfig, variant: str) -> ExplorationSchedule:
    if variant == "A3":
        return ExplorationSchedule.frozen(cfg.exploration.eps_min,
                                          cfg.exploration.temp_floor)
    return cfg.exploration


def variant_train_config(cfg: ExperimentConfig, variant: str, seed: int):
    tcfg = replace(cfg.train, seed=seed)
    if variant == "A3":
        tcfg = replace(tcfg, uniform_priorities=True)
    return tcfg


# Dynamic-obstacle streams are drawn per purpose so that training episodes,
# checkpoint-selection evaluations and reported evaluations never share
# obstacle sequences; otherwise best-checkpoint selection would be scored on
# the very instances it was selected with.
TRAIN_DYNAMICS_OFFSET = 10_000
SELECT_DYNAMICS_OFFSET = 20_000


def make_env(grid_map: GridMap, cfg: ExperimentConfig,
             density: float | None = None,
             dynamics_seed: int | None = None) -> GridEnv:
    dynamics = None
    if cfg.dynamics_enabled or density is not None:
        dynamics = DynamicsConfig(
            density_target=(cfg.dynamics.density_target
                            if density is None else density),
            mutation_period=cfg.dynamics.mutation_period,
            dynamics_seed=(cfg.dynamics.dynamics_seed
                           if dynamics_seed is None else dynamics_seed),
        )
    return GridEnv(grid_map.copy(), reward=cfg.reward, dynamics=dynamics)


# -- training harness ---------------------------------------------------------


@dataclass
class TrainedAgent:
    params: QNetParams
    variant: str
    seed: int
    result: TrainResult
    best_sr: float  # best mean SR seen by the periodic evaluations
    best_step: int
    eval_history: list[tuple[int, float]]

    def info(self) -> dict:
        return {"variant": self.variant, "seed": self.seed,
                "env_steps": self.result.env_steps,
                "episodes": self.result.episodes,
                "train_updates": self.result.train_updates,
                "best_sr": self.best_sr, "best_step": self.best_step,
                "eval_history": self.eval_history}


def train_agent(cfg: ExperimentConfig, grid_map: GridMap, seed: int,
                variant: str = "full") -> TrainedAgent:
    """Train one agent with periodic greedy evaluation on the canonical start.

    The best-evaluating parameter snapshot is kept and returned, since value
    estimates on small replay buffers can oscillate after reaching a good
    policy. When `target_sr` is configured, training stops as soon as a
    periodic evaluation reaches it.
    """
    qcfg = build_qnet_config(cfg, grid_map, variant)
    params = QNetParams(qcfg, np.random.default_rng(seed))
    schedule = variant_schedule(cfg, variant)
    tcfg = variant_train_config(cfg, variant, seed)
    env = make_env(grid_map, cfg,
                   dynamics_seed=TRAIN_DYNAMICS_OFFSET + seed)
    harness = cfg.harness
    best = {"sr": -1.0, "params": None, "step": 0}
    history: list[tuple[int, float]] = []
    next_eval = harness.eval_start

    def hook(env_steps: int, episodes: int, online: QNetParams) -> bool:
        nonlocal next_eval
        if env_steps < next_eval:
            return False
        while next_eval <= env_steps:
            next_eval += harness.eval_every
        eval_env = make_env(grid_map, cfg,
                            dynamics_seed=SELECT_DYNAMICS_OFFSET + seed)
        eps = evaluate(online, eval_env, harness.eval_episodes, seed=seed,
                       randomize_starts=False)
        sr = float(np.mean([e.sr_value for e in eps]))
        history.append((env_steps, sr))
        if sr > best["sr"]:
            best.update(sr=sr, params=clone_params(online), step=env_steps)
        return harness.target_sr is not None and sr >= harness.target_sr

    result = run_training(env, params, tcfg, schedule=schedule,
                          episode_hook=hook)
    chosen = best["params"] if best["params"] is not None else result.params
    return TrainedAgent(params=chosen, variant=variant, seed=seed,
                        result=result, best_sr=best["sr"],
                        best_step=best["step"], eval_history=history)


# -- evaluation cells ----------------------------------------------------------


def agent_episode(params: QNetParams, env: GridEnv,
                  step_limit: int | None = None):
    """One greedy episode; times only the network queries (decision time)."""
    obs = env.reset()
    frame = obs.channels.astype(np.uint8)
    window = deque([frame] * params.cfg.seq_len, maxlen=params.cfg.seq_len)
    limit = step_limit or 4 * (env.map.width + env.map.height)
    visited = [env.agent.position]
    decide = 0.0
    for _ in range(limit):
        t0 = time.perf_counter()
        q_vec, _ = window_q(params, window)
        decide += time.perf_counter() - t0
        res = env.step(greedy_action(q_vec))
        visited.append(res.state.position)
        if res.done:
            return visited, True, decide
        window.append(res.observation.channels.astype(np.uint8))
    return visited, False, decide


def _episode_planner_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def run_cell(cfg: ExperimentConfig, grid_map: GridMap, map_id: str,
             algo: str, seed: int, params: QNetParams | None = None,
             density: float | None = None) -> list[tuple[str, str, EpisodeMetrics]]:
    """One (map, algorithm, seed) cell: `cfg.episodes` evaluation episodes.

    All episodes start from the map's canonical start cell; on dynamic maps
    the obstacle layer redraws per episode from the cell's seed stream.
    """
    env = make_env(grid_map, cfg, density=density, dynamics_seed=seed)
    label = map_id if density is None else f"{map_id}@d{round(density * 100):02d}"
    rows = []
    for episode in range(cfg.episodes):
        if algo == AGENT_ALGO or algo in VARIANT_LABELS:
            if params is None:
                raise ValueError(f"cell {label}/{algo} needs trained parameters")
            visited, success, decide = agent_episode(params, env)
            metric = episode_metrics(env.map, visited, success, seed=seed,
                                     time_seconds=decide)
        elif algo == "adaptive_astar":
            rec = execute_adaptive(env)
            metric = episode_metrics(env.map, rec.visited, rec.success,
                                     seed=seed, time_seconds=rec.plan_seconds)
        elif algo in CLASSICAL_ALGOS:
            rec = execute_blind(env, algo,
                                seed=_episode_planner_seed(seed, episode),
                                rrt_cfg=cfg.rrt)
            metric = episode_metrics(env.map, rec.visited, rec.success,
                                     seed=seed, time_seconds=rec.plan_seconds)
        else:
            raise ValueError(f"unknown algorithm {algo!r}")
        rows.append((label, algo, metric))
    return rows


# -- parallel plumbing ---------------------------------------------------------


def _params_to_blob(params: QNetParams) -> tuple[dict, dict]:
    return asdict(params.cfg), {name: t.data.copy()
                                for name, t in params.named().items()}


def _params_from_blob(blob) -> QNetParams:
    cfg_dict, arrays = blob
    params = QNetParams(QNetConfig(**cfg_dict), np.random.default_rng(0))
    for name, tensor in params.named().items():
        tensor.data[...] = arrays[name]
    return params


def _train_task(cfg_text: str, map_text: str, variant: str, seed: int):
    cfg = parse_config_text(cfg_text)
    agent = train_agent(cfg, map_from_text(map_text), seed, variant)
    return variant, seed, _params_to_blob(agent.params), agent.info()


def _cell_task(cfg_text: str, map_text: str, map_id: str, algo: str,
               seed: int, density, params_blob):
    cfg = parse_config_text(cfg_text)
    params = _params_from_blob(params_blob) if params_blob is not None else None
    return run_cell(cfg, map_from_text(map_text), map_id, algo, seed,
                    params=params, density=density)


def _run_tasks(fn, argument_tuples: list[tuple], workers: int):
    """Run tasks serially or on a process pool; yields results in task order."""
    if workers <= 1 or len(argument_tuples) <= 1:
        for args in argument_tuples:
            yield fn(*args)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, *zip(*argument_tuples))


# -- reports --------------------------------------------------------------------


class ReportWriter:
    """Incremental episode CSV plus a final summary JSON."""

    def __init__(self, outdir: Path, cfg: ExperimentConfig):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.rows: list[tuple[str, str, EpisodeMetrics]] = []
        (self.outdir / "config.ini").write_text(resolved_text(cfg),
                                                encoding="utf-8")
        self._csv = open(self.outdir / "episodes.csv", "w", encoding="utf-8",
                         newline="")
        self._csv.write(episode_rows_to_csv([]))
        self._csv.flush()

    def add_rows(self, rows) -> None:
        self.rows.extend(rows)
        text = episode_rows_to_csv(rows)
        self._csv.write(text[text.index("\n") + 1:])  # rows minus header
        self._csv.flush()

    def finish(self, summary_keys, extra: dict | None = None) -> dict:
        """Summarize rows grouped by `summary_keys(row) -> label`; write JSON."""
        self._csv.close()
        groups: dict[str, list[EpisodeMetrics]] = {}
        for row in self.rows:
            groups.setdefault(summary_keys(row), []).append(row[2])
        summaries = {}
        for label in sorted(groups):
            eps = groups[label]
            try:
                summaries[label] = summary_as_dict(summarize(eps))
            except ValueError:
                # single-seed groups have no seed spread to report
                summaries[label] = {
                    "mean_sr": float(np.mean([e.sr_value for e in eps])),
                    "n_episodes": len(eps),
                    "note": "single seed group, no sr_std",
                }
        report = {
            "name": self.cfg.name,
            "mode": self.cfg.mode,
            "protocol": {
                "episodes_per_cell": self.cfg.episodes,
                "seeds": self.cfg.seeds,
                "start": "canonical map start every episode",
                "sr": "per-episode min(1, progress/optimal), averaged",
                "time_s": "planner/agent decision time only",
            },
            "summaries": summaries,
            "config": resolved_text(self.cfg),
        }
        if extra:
            report.update(extra)
        with open(self.outdir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        return report


def _by_algo(row) -> str:
    return row[1]


def _by_algo_and_density(row) -> str:
    map_id, algo, _ = row
    _, _, density = map_id.partition("@")
    return f"{algo}@{density}" if density else algo


# -- suite drivers ---------------------------------------------------------------


def _train_agents(cfg: ExperimentConfig, jobs, workers: int):
    """Train (map_id, variant, seed) jobs; returns params and info dicts."""
    cfg_text = resolved_text(cfg)
    tasks = [(cfg_text, map_to_text(grid_map), variant, seed)
             for _, grid_map, variant, seed in jobs]
    agents: dict[tuple[str, str, int], QNetParams] = {}
    infos: dict[str, dict] = {}
    for (map_id, _, _, _), (variant, seed, blob, info) in zip(
            jobs, _run_tasks(_train_task, tasks, workers)):
        agents[(map_id, variant, seed)] = _params_from_blob(blob)
        infos[f"{map_id}/{variant}/s{seed}"] = info
    return agents, infos


def run_eval_suite(cfg: ExperimentConfig) -> dict:
    """Static or dynamic evaluation: maps x algos x seeds."""
    maps = make_maps(cfg)
    writer = ReportWriter(Path(cfg.output_dir), cfg)
    train_jobs = []
    if AGENT_ALGO in cfg.algos:
        train_jobs = [(map_id, grid_map, "full", seed)
                      for map_id, grid_map in maps for seed in cfg.seeds]
    agents, infos = _train_agents(cfg, train_jobs, cfg.workers)

    cfg_text = resolved_text(cfg)
    cells = []
    for map_id, grid_map in maps:
        for algo in cfg.algos:
            for seed in cfg.seeds:
                blob = None
                if algo == AGENT_ALGO:
                    blob = _params_to_blob(agents[(map_id, "full", seed)])
                cells.append((cfg_text, map_to_text(grid_map), map_id, algo,
                              seed, None, blob))
    for rows in _run_tasks(_cell_task, cells, cfg.workers):
        writer.add_rows(rows)
    return writer.finish(_by_algo, extra={"training": infos})


def run_ablation(cfg: ExperimentConfig) -> dict:
    """Architecture/exploration ablation: maps x variants x seeds."""
    maps = make_maps(cfg)
    writer = ReportWriter(Path(cfg.output_dir), cfg)
    train_jobs = [(map_id, grid_map, variant, seed)
                  for map_id, grid_map in maps
                  for variant in cfg.variants
                  for seed in cfg.seeds]
    agents, infos = _train_agents(cfg, train_jobs, cfg.workers)

    cfg_text = resolved_text(cfg)
    cells = [(cfg_text, map_to_text(grid_map), map_id, variant, seed, None,
              _params_to_blob(agents[(map_id, variant, seed)]))
             for map_id, grid_map in maps
             for variant in cfg.variants
             for seed in cfg.seeds]
    for rows in _run_tasks(_cell_task, cells, cfg.workers):
        writer.add_rows(rows)
    return writer.finish(_by_algo, extra={"training": infos})


def run_density_sweep(cfg: ExperimentConfig) -> dict:
    """Density robustness: agents train at the configured base density and
    are evaluated, along with the classical planners, at each sweep density."""
    maps = make_maps(cfg)
    writer = ReportWriter(Path(cfg.output_dir), cfg)
    train_jobs = []
    if AGENT_ALGO in cfg.algos:
        train_jobs = [(map_id, grid_map, "full", seed)
                      for map_id, grid_map in maps for seed in cfg.seeds]
    agents, infos = _train_agents(cfg, train_jobs, cfg.workers)

    cfg_text = resolved_text(cfg)
    cells = []
    for density in cfg.densities:
        for map_id, grid_map in maps:
            for algo in cfg.algos:
                for seed in cfg.seeds:
                    blob = None
                    if algo == AGENT_ALGO:
                        blob = _params_to_blob(agents[(map_id, "full", seed)])
                    cells.append((cfg_text, map_to_text(grid_map), map_id,
                                  algo, seed, density, blob))
    for rows in _run_tasks(_cell_task, cells, cfg.workers):
        writer.add_rows(rows)
    return writer.finish(_by_algo_and_density, extra={"training": infos})


def run_train_mode(cfg: ExperimentConfig) -> dict:
    """Plain training runs: one agent per (map, seed), logs and checkpoints."""
    maps = make_maps(cfg)
    writer = ReportWriter(Path(cfg.output_dir), cfg)
    infos = {}
    for map_id, grid_map in maps:
        for seed in cfg.seeds:
            agent = train_agent(cfg, grid_map, seed)
            tag = f"{map_id}_s{seed}"
            log_path = writer.outdir / f"trainlog_{tag}.csv"
            log_path.write_text(agent.result.log_csv(), encoding="utf-8")
            save_checkpoint(writer.outdir / f"checkpoint_{tag}.npz",
                            agent.params)
            infos[f"{map_id}/full/s{seed}"] = agent.info()
            writer.add_rows(run_cell(cfg, grid_map, map_id, AGENT_ALGO, seed,
                                     params=agent.params))
    return writer.finish(_by_algo, extra={"training": infos})


def run_suite(cfg: ExperimentConfig) -> dict:
    runners = {
        "train": run_train_mode,
        "eval-static": run_eval_suite,
        "eval-dynamic": run_eval_suite,
        "ablation": run_ablation,
        "density-sweep": run_density_sweep,
    }
    return runners[cfg.mode](cfg)


# -- plot data -------------------------------------------------------------------


def emit_plot_data(report_dir) -> list[Path]:
    """Derive per-figure CSVs from a report directory.

    Everything is recomputed from episodes.csv and the training logs; the
    summary JSON is never consulted, which doubles as a check that reports
    hold no hidden state.
    """
    from .metrics import episodes_from_csv

    report_dir = Path(report_dir)
    episodes_path = report_dir / "episodes.csv"
    if not episodes_path.exists():
        raise FileNotFoundError(f"no episodes.csv under {report_dir}")
    rows = episodes_from_csv(episodes_path.read_text(encoding="utf-8"))
    written: list[Path] = []

    def mean_sr(metrics):
        return float(np.mean([e.sr_value for e in metrics]))

    def mean_over_wins(metrics, attr):
        values = [getattr(e, attr) for e in metrics if e.success]
        return float(np.mean(values)) if values else float("nan")

    groups: dict[str, list[EpisodeMetrics]] = {}
    for map_id, algo, metric in rows:
        groups.setdefault(algo, []).append(metric)
    lines = ["algo,sr,ratio,time_ms,smoothness"]
    for algo in sorted(groups):
        eps = groups[algo]
        time_ms = float(np.mean([e.time_seconds for e in eps])) * 1e3
        lines.append(f"{algo},{mean_sr(eps)!r},"
                     f"{mean_over_wins(eps, 'ratio')!r},{time_ms!r},"
                     f"{mean_over_wins(eps, 'smoothness')!r}")
    path = report_dir / "fig_metrics_by_algo.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    density_groups: dict[tuple[float, str], list[EpisodeMetrics]] = {}
    for map_id, algo, metric in rows:
        _, sep, tag = map_id.partition("@d")
        if sep:
            density_groups.setdefault((float(tag) / 100.0, algo),
                                      []).append(metric)
    if density_groups:
        lines = ["density,algo,sr"]
        for density, algo in sorted(density_groups):
            lines.append(
                f"{density!r},{algo},{mean_sr(density_groups[(density, algo)])!r}")
        path = report_dir / "fig_sr_vs_density.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

    for log_path in sorted(report_dir.glob("trainlog_*.csv")):
        tag = log_path.stem.removeprefix("trainlog_")
        loss_lines = ["step,loss"]
        reward_lines = ["episode,reward"]
        episode_index = 0
        header, *data = log_path.read_text(encoding="utf-8").splitlines()
        fields = header.split(",")
        for line in data:
            record = dict(zip(fields, line.split(",")))
            if record.get("loss"):
                loss_lines.append(f"{record['step']},{record['loss']}")
            if record.get("episode_reward"):
                reward_lines.append(
                    f"{episode_index},{record['episode_reward']}")
                episode_index += 1
        for name, lines in ((f"fig_loss_{tag}.csv", loss_lines),
                            (f"fig_reward_{tag}.csv", reward_lines)):
            path = report_dir / name
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
    return written
