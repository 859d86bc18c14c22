"""Episode metrics and suite summaries.

Per-episode success rate is min(1, L_valid / L_optimal): successes clamp
to 1, failures get partial credit through geodesic progress, the optimal
distance minus the shortest-path distance still remaining from the final
position. Both distances are measured on the static base map so that a
mid-episode obstacle shuffle cannot make scores incomparable.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .gridworld import Cell, GridMap, flood_distances


@dataclass
class EpisodeMetrics:
    success: bool
    sr_value: float  # in [0, 1]
    path_len: int  # environment steps taken
    optimal_len: int  # shortest static start-goal distance
    ratio: float  # path_len / optimal_len (meaningful for successes)
    time_seconds: float
    smoothness: int  # direction changes along the executed path
    seed: int


@dataclass
class SuiteSummary:
    mean_sr: float
    mean_len: float  # over successful episodes
    mean_ratio: float  # over successful episodes
    mean_time: float
    mean_smoothness: float  # over successful episodes
    mean_optimal_len: float
    sr_std: float  # population std over per-seed group mean SRs
    n_episodes: int
    n_groups: int


def success_rate(l_valid: float, l_optimal: float) -> float:
    """min(1, l_valid / l_optimal), clamped into [0, 1].

    l_optimal = 0 (start on goal) scores 1 by convention. Negative
    progress (the episode ended farther away than it started) clamps to 0.
    """
    if l_optimal < 0 or not np.isfinite(l_optimal):
        raise ValueError(f"l_optimal must be finite and >= 0, got {l_optimal}")
    if l_optimal == 0:
        return 1.0
    return float(min(1.0, max(0.0, l_valid / l_optimal)))


def smoothness(path: list[Cell]) -> int:
    """Count of steps whose movement direction differs from the previous one.

    Zero-displacement entries (waiting in place) carry no direction and are
    skipped. A path with fewer than two actual moves has smoothness 0.
    """
    directions = []
    for a, b in zip(path[:-1], path[1:]):
        d = (b[0] - a[0], b[1] - a[1])
        if d != (0, 0):
            directions.append(d)
    return sum(1 for prev, cur in zip(directions[:-1], directions[1:])
               if cur != prev)


def episode_metrics(base_map: GridMap, visited: list[Cell], success: bool,
                    seed: int, time_seconds: float = 0.0,
                    steps: int | None = None) -> EpisodeMetrics:
    """Assemble EpisodeMetrics from an executed trajectory.

    `visited` holds the agent positions over time, initial cell first.
    Distances come from the static base map; a failed episode is scored by
    how much of the optimal distance it closed.
    """
    start, goal = visited[0], base_map.goal
    dist_from_goal = flood_distances(base_map.blocked, goal)
    l_optimal = int(dist_from_goal[start[1], start[0]])
    if l_optimal < 0:
        raise ValueError(f"start {start} cannot reach goal on the base map")
    path_len = len(visited) - 1 if steps is None else steps
    if success:
        l_valid = float(path_len)
    else:
        remaining = int(dist_from_goal[visited[-1][1], visited[-1][0]])
        if remaining < 0:
            # ended somewhere the static map cannot connect (never happens
            # with static obstacles only); score as no progress
            remaining = l_optimal
        l_valid = float(l_optimal - remaining)
    ratio = path_len / l_optimal if l_optimal > 0 else 1.0
    return EpisodeMetrics(success=success,
                          sr_value=success_rate(l_valid, l_optimal),
                          path_len=path_len, optimal_len=l_optimal,
                          ratio=float(ratio), time_seconds=float(time_seconds),
                          smoothness=smoothness(visited), seed=seed)


def summarize(episodes: list[EpisodeMetrics]) -> SuiteSummary:
    """Means over episodes; SR spread over per-seed groups.

    Length, ratio and smoothness average over successful episodes only
    (they describe completed paths); SR and time average over everything.
    The SR standard deviation is the population std of per-seed mean SRs
    and needs at least two distinct seeds.
    """
    if not episodes:
        raise ValueError("no episodes to summarize")
    seeds = sorted({e.seed for e in episodes})
    if len(seeds) < 2:
        raise ValueError("need episodes from at least two seeds for the SR std")
    group_means = [float(np.mean([e.sr_value for e in episodes if e.seed == s]))
                   for s in seeds]
    wins = [e for e in episodes if e.success]
    mean_over = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return SuiteSummary(
        mean_sr=float(np.mean([e.sr_value for e in episodes])),
        mean_len=mean_over([e.path_len for e in wins]),
        mean_ratio=mean_over([e.ratio for e in wins]),
        mean_time=float(np.mean([e.time_seconds for e in episodes])),
        mean_smoothness=mean_over([e.smoothness for e in wins]),
        mean_optimal_len=float(np.mean([e.optimal_len for e in episodes])),
        sr_std=float(np.std(group_means)),
        n_episodes=len(episodes),
        n_groups=len(seeds),
    )


def path_quality(summary: SuiteSummary) -> float:
    """Composite score SR / (ratio * (1 + smoothness / optimal_len)).

    Not a published metric: a documented, monotone-sensible aggregate
    (higher SR up, longer or jerkier paths down) used for report color.
    """
    penalty = summary.mean_ratio * (1.0 + summary.mean_smoothness
                                    / max(summary.mean_optimal_len, 1.0))
    return summary.mean_sr / penalty


# -- CSV persistence -----------------------------------------------------------

EPISODE_FIELDS = ("map_id", "algo", "seed", "success", "sr", "len",
                  "optimal_len", "ratio", "time_s", "smoothness")


def format_value(v) -> str:
    """Floats via repr (shortest exact round-trip), everything else via str."""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def episode_rows_to_csv(rows: list[tuple[str, str, EpisodeMetrics]]) -> str:
    """Serialize (map_id, algo, metrics) rows to the episode CSV schema."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(EPISODE_FIELDS)
    for map_id, algo, m in rows:
        writer.writerow([
            map_id, algo, m.seed, int(m.success), format_value(m.sr_value),
            m.path_len, m.optimal_len, format_value(m.ratio),
            format_value(m.time_seconds), m.smoothness,
        ])
    return out.getvalue()


def episodes_from_csv(text: str) -> list[tuple[str, str, EpisodeMetrics]]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for rec in reader:
        rows.append((rec["map_id"], rec["algo"], EpisodeMetrics(
            success=bool(int(rec["success"])), sr_value=float(rec["sr"]),
            path_len=int(rec["len"]), optimal_len=int(rec["optimal_len"]),
            ratio=float(rec["ratio"]), time_seconds=float(rec["time_s"]),
            smoothness=int(rec["smoothness"]), seed=int(rec["seed"]))))
    return rows


def summary_as_dict(summary: SuiteSummary) -> dict:
    """Flat dict for JSON reports; includes the non-published quality score."""
    d = dict(
        mean_sr=summary.mean_sr, mean_len=summary.mean_len,
        mean_ratio=summary.mean_ratio, mean_time=summary.mean_time,
        mean_smoothness=summary.mean_smoothness,
        mean_optimal_len=summary.mean_optimal_len, sr_std=summary.sr_std,
        n_episodes=summary.n_episodes, n_groups=summary.n_groups,
        path_quality_composite=path_quality(summary),
    )
    return d
