"""Classical planners over occupancy grids, plus execution policies.

Grid planners (A*, Dijkstra, breadth-first) operate on boolean occupancy
arrays and return 4-connected cell paths. The sampling planners (RRT and
RRT*) plan in continuous coordinates where cell (i, j) is the unit square
[i, i+1] x [j, j+1], then rasterize the polyline back onto the grid.

Execution policies turn a plan into environment steps: `execute_blind`
commits to the initial plan and gives up at the first blocked step, while
`execute_adaptive` replans from the current cell whenever the remaining
plan is invalidated by an obstacle change.
"""
from __future__ import annotations

import heapq
import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .gridworld import DISPLACEMENTS, Cell, GridEnv

GRID_ALGOS = ("astar", "dijkstra", "bfs")
SAMPLING_ALGOS = ("rrt", "rrt_star")
ALGOS = GRID_ALGOS + SAMPLING_ALGOS


@dataclass
class PlanResult:
    path: list[Cell] | None  # start..goal inclusive, 4-connected; None if no path
    expanded: int  # nodes popped (grid) or tree size (sampling)
    cost: float  # steps along the returned path, inf when no path

    @property
    def found(self) -> bool:
        return self.path is not None


def _neighbors(occ: np.ndarray, cell: Cell):
    h, w = occ.shape
    for dx, dy in DISPLACEMENTS[:4]:
        nx, ny = cell[0] + dx, cell[1] + dy
        if 0 <= nx < w and 0 <= ny < h and not occ[ny, nx]:
            yield (nx, ny)


def _walk_back(came_from: dict, goal: Cell) -> list[Cell]:
    path = [goal]
    while came_from[path[-1]] is not None:
        path.append(came_from[path[-1]])
    path.reverse()
    return path


def _endpoints_free(occ: np.ndarray, start: Cell, goal: Cell) -> bool:
    h, w = occ.shape
    for x, y in (start, goal):
        if not (0 <= x < w and 0 <= y < h) or occ[y, x]:
            return False
    return True


def astar(occ: np.ndarray, start: Cell, goal: Cell) -> PlanResult:
    """A* with the Manhattan heuristic; ties broken by insertion order."""
    if not _endpoints_free(occ, start, goal):
        return PlanResult(None, 0, math.inf)
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return PlanResult([start], 0, 0.0)
    counter = 0
    g_cost = {start: 0}
    came_from = {start: None}
    h0 = abs(start[0] - goal[0]) + abs(start[1] - goal[1])
    frontier = [(h0, counter, start)]
    closed = set()
    expanded = 0
    while frontier:
        _, _, cell = heapq.heappop(frontier)
        if cell in closed:
            continue
        closed.add(cell)
        expanded += 1
        if cell == goal:
            path = _walk_back(came_from, goal)
            return PlanResult(path, expanded, float(len(path) - 1))
        g_next = g_cost[cell] + 1
        for nxt in _neighbors(occ, cell):
            if g_next < g_cost.get(nxt, math.inf):
                g_cost[nxt] = g_next
                came_from[nxt] = cell
                counter += 1
                h = abs(nxt[0] - goal[0]) + abs(nxt[1] - goal[1])
                heapq.heappush(frontier, (g_next + h, counter, nxt))
    return PlanResult(None, expanded, math.inf)


def dijkstra(occ: np.ndarray, start: Cell, goal: Cell) -> PlanResult:
    """Uniform-cost search; identical costs to A*, more expansions."""
    if not _endpoints_free(occ, start, goal):
        return PlanResult(None, 0, math.inf)
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return PlanResult([start], 0, 0.0)
    counter = 0
    g_cost = {start: 0}
    came_from = {start: None}
    frontier = [(0, counter, start)]
    closed = set()
    expanded = 0
    while frontier:
        g, _, cell = heapq.heappop(frontier)
        if cell in closed:
            continue
        closed.add(cell)
        expanded += 1
        if cell == goal:
            path = _walk_back(came_from, goal)
            return PlanResult(path, expanded, float(len(path) - 1))
        for nxt in _neighbors(occ, cell):
            if g + 1 < g_cost.get(nxt, math.inf):
                g_cost[nxt] = g + 1
                came_from[nxt] = cell
                counter += 1
                heapq.heappush(frontier, (g + 1, counter, nxt))
    return PlanResult(None, expanded, math.inf)


def bfs(occ: np.ndarray, start: Cell, goal: Cell) -> PlanResult:
    """Breadth-first search; optimal on unit-cost grids."""
    if not _endpoints_free(occ, start, goal):
        return PlanResult(None, 0, math.inf)
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return PlanResult([start], 0, 0.0)
    came_from = {start: None}
    queue = deque([start])
    expanded = 0
    while queue:
        cell = queue.popleft()
        expanded += 1
        if cell == goal:
            path = _walk_back(came_from, goal)
            return PlanResult(path, expanded, float(len(path) - 1))
        for nxt in _neighbors(occ, cell):
            if nxt not in came_from:
                came_from[nxt] = cell
                queue.append(nxt)
    return PlanResult(None, expanded, math.inf)


# -- sampling planners ----------------------------------------------------------


@dataclass
class RrtConfig:
    step_size: float = 2.0
    goal_bias: float = 0.05
    max_iter: int = 5000
    rewire_radius: float = 4.0
    collision_resolution: float = 0.1

    def __post_init__(self):
        if self.step_size <= 0 or self.collision_resolution <= 0:
            raise ValueError("step_size and collision_resolution must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must be in [0, 1]")


def _point_free(occ: np.ndarray, x: float, y: float) -> bool:
    h, w = occ.shape
    if not (0.0 <= x < w and 0.0 <= y < h):
        return False
    return not occ[int(y), int(x)]


def _segment_free(occ: np.ndarray, a, b, resolution: float) -> bool:
    dist = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(1, math.ceil(dist / resolution))
    for i in range(n + 1):
        t = i / n
        if not _point_free(occ, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])):
            return False
    return True


def _center(cell: Cell):
    return (cell[0] + 0.5, cell[1] + 0.5)


def _rasterize(occ: np.ndarray, polyline, resolution: float,
               start: Cell, goal: Cell) -> list[Cell] | None:
    """Convert a collision-free polyline into a 4-connected cell path."""
    cells: list[Cell] = [tuple(start)]
    for a, b in zip(polyline[:-1], polyline[1:]):
        dist = math.hypot(b[0] - a[0], b[1] - a[1])
        n = max(1, math.ceil(dist / resolution))
        for i in range(n + 1):
            t = i / n
            x, y = a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])
            cell = (int(x), int(y))
            if cell != cells[-1]:
                cells.append(cell)
    if cells[-1] != tuple(goal):
        cells.append(tuple(goal))
    # bridge any diagonal or skipped transitions with shortest grid hops
    path: list[Cell] = [cells[0]]
    for cell in cells[1:]:
        prev = path[-1]
        if cell == prev:
            continue
        if abs(cell[0] - prev[0]) + abs(cell[1] - prev[1]) == 1:
            path.append(cell)
            continue
        bridge = bfs(occ, prev, cell)
        if bridge.path is None:
            return None
        path.extend(bridge.path[1:])
    return path


def _nearest(positions: list, point) -> int:
    arr = np.asarray(positions)
    d = np.hypot(arr[:, 0] - point[0], arr[:, 1] - point[1])
    return int(np.argmin(d))


def rrt(occ: np.ndarray, start: Cell, goal: Cell, cfg: RrtConfig | None = None,
        seed: int = 0) -> PlanResult:
    """Rapidly-exploring random tree, first goal connection wins."""
    cfg = cfg or RrtConfig()
    if not _endpoints_free(occ, start, goal):
        return PlanResult(None, 0, math.inf)
    if tuple(start) == tuple(goal):
        return PlanResult([tuple(start)], 0, 0.0)
    rng = np.random.default_rng(seed)
    h, w = occ.shape
    goal_pt = _center(goal)
    positions = [_center(start)]
    parents = [-1]
    for _ in range(cfg.max_iter):
        if rng.random() < cfg.goal_bias:
            sample = goal_pt
        else:
            sample = (rng.uniform(0, w), rng.uniform(0, h))
        idx = _nearest(positions, sample)
        base = positions[idx]
        dist = math.hypot(sample[0] - base[0], sample[1] - base[1])
        if dist < 1e-9:
            continue
        scale = min(1.0, cfg.step_size / dist)
        new = (base[0] + scale * (sample[0] - base[0]),
               base[1] + scale * (sample[1] - base[1]))
        if not _segment_free(occ, base, new, cfg.collision_resolution):
            continue
        positions.append(new)
        parents.append(idx)
        if (math.hypot(new[0] - goal_pt[0], new[1] - goal_pt[1]) <= cfg.step_size
                and _segment_free(occ, new, goal_pt, cfg.collision_resolution)):
            positions.append(goal_pt)
            parents.append(len(positions) - 2)
            return _extract(occ, positions, parents, len(positions) - 1,
                            cfg, start, goal)
    return PlanResult(None, len(positions), math.inf)


def rrt_star(occ: np.ndarray, start: Cell, goal: Cell, cfg: RrtConfig | None = None,
             seed: int = 0) -> PlanResult:
    """RRT* with choose-parent and rewire; runs its full iteration budget."""
    cfg = cfg or RrtConfig()
    if not _endpoints_free(occ, start, goal):
        return PlanResult(None, 0, math.inf)
    if tuple(start) == tuple(goal):
        return PlanResult([tuple(start)], 0, 0.0)
    rng = np.random.default_rng(seed)
    h, w = occ.shape
    goal_pt = _center(goal)
    positions = [_center(start)]
    parents = [-1]
    costs = [0.0]
    goal_parents: list[int] = []
    for _ in range(cfg.max_iter):
        if rng.random() < cfg.goal_bias:
            sample = goal_pt
        else:
            sample = (rng.uniform(0, w), rng.uniform(0, h))
        idx = _nearest(positions, sample)
        base = positions[idx]
        dist = math.hypot(sample[0] - base[0], sample[1] - base[1])
        if dist < 1e-9:
            continue
        scale = min(1.0, cfg.step_size / dist)
        new = (base[0] + scale * (sample[0] - base[0]),
               base[1] + scale * (sample[1] - base[1]))
        if not _segment_free(occ, base, new, cfg.collision_resolution):
            continue
        arr = np.asarray(positions)
        dists = np.hypot(arr[:, 0] - new[0], arr[:, 1] - new[1])
        near = [i for i in np.nonzero(dists <= cfg.rewire_radius)[0]]
        parent, best = idx, costs[idx] + float(dists[idx])
        for i in near:
            cand = costs[i] + float(dists[i])
            if cand < best and _segment_free(occ, positions[i], new,
                                             cfg.collision_resolution):
                parent, best = int(i), cand
        positions.append(new)
        parents.append(parent)
        costs.append(best)
        new_idx = len(positions) - 1
        for i in near:
            through = best + float(dists[i])
            if through < costs[i] and _segment_free(occ, new, positions[i],
                                                    cfg.collision_resolution):
                parents[i] = new_idx
                costs[i] = through
        if (math.hypot(new[0] - goal_pt[0], new[1] - goal_pt[1]) <= cfg.step_size
                and _segment_free(occ, new, goal_pt, cfg.collision_resolution)):
            goal_parents.append(new_idx)
    if not goal_parents:
        return PlanResult(None, len(positions), math.inf)
    best_parent = min(goal_parents, key=lambda i: costs[i] + math.hypot(
        positions[i][0] - goal_pt[0], positions[i][1] - goal_pt[1]))
    positions.append(goal_pt)
    parents.append(best_parent)
    return _extract(occ, positions, parents, len(positions) - 1, cfg, start, goal)


def _extract(occ, positions, parents, goal_idx, cfg, start, goal) -> PlanResult:
    chain = [goal_idx]
    while parents[chain[-1]] >= 0:
        chain.append(parents[chain[-1]])
    chain.reverse()
    polyline = [positions[i] for i in chain]
    path = _rasterize(occ, polyline, cfg.collision_resolution, start, goal)
    if path is None:
        return PlanResult(None, len(positions), math.inf)
    return PlanResult(path, len(positions), float(len(path) - 1))


def plan(occ: np.ndarray, start: Cell, goal: Cell, algo: str, *,
         seed: int = 0, rrt_cfg: RrtConfig | None = None) -> PlanResult:
    """Dispatch to any planner by name."""
    if algo == "astar":
        return astar(occ, start, goal)
    if algo == "dijkstra":
        return dijkstra(occ, start, goal)
    if algo == "bfs":
        return bfs(occ, start, goal)
    if algo == "rrt":
        return rrt(occ, start, goal, rrt_cfg, seed)
    if algo == "rrt_star":
        return rrt_star(occ, start, goal, rrt_cfg, seed)
    raise ValueError(f"unknown planner {algo!r}")


# -- execution policies -----------------------------------------------------------

_ACTION_OF_DISP = {d: i for i, d in enumerate(DISPLACEMENTS)}


def path_to_actions(path: list[Cell]) -> list[int]:
    actions = []
    for a, b in zip(path[:-1], path[1:]):
        disp = (b[0] - a[0], b[1] - a[1])
        if disp not in _ACTION_OF_DISP:
            raise ValueError(f"path jump {a} -> {b} is not a unit move")
        actions.append(_ACTION_OF_DISP[disp])
    return actions


@dataclass
class ExecutionRecord:
    success: bool
    visited: list[Cell]  # agent positions, initial cell first
    steps: int
    collisions: int
    replans: int
    aborted: bool  # gave up before the step budget ran out
    plan_seconds: float = 0.0  # time inside plan() calls, not env stepping


def execute_blind(env: GridEnv, algo: str, *, start: Cell | None = None,
                  seed: int = 0, rrt_cfg: RrtConfig | None = None,
                  max_steps: int | None = None) -> ExecutionRecord:
    """Plan once on the initial occupancy, then follow the plan open-loop.

    The first blocked step aborts the episode: the policy has no way to
    recover once the world diverges from the snapshot it planned on.
    """
    env.reset(start=start)
    max_steps = max_steps or 4 * (env.map.width + env.map.height)
    t0 = time.perf_counter()
    result = plan(env.occupancy(), env.agent.position, env.map.goal, algo,
                  seed=seed, rrt_cfg=rrt_cfg)
    planned = time.perf_counter() - t0
    visited = [env.agent.position]
    if result.path is None:
        return ExecutionRecord(False, visited, 0, 0, 0, aborted=True,
                               plan_seconds=planned)
    steps = collisions = 0
    for action in path_to_actions(result.path):
        if steps >= max_steps:
            break
        res = env.step(action)
        steps += 1
        visited.append(res.state.position)
        if res.info["collided"]:
            collisions += 1
            return ExecutionRecord(False, visited, steps, collisions, 0,
                                   aborted=True, plan_seconds=planned)
        if res.done:
            return ExecutionRecord(True, visited, steps, collisions, 0,
                                   aborted=False, plan_seconds=planned)
    return ExecutionRecord(False, visited, steps, collisions, 0, aborted=False,
                           plan_seconds=planned)


def execute_adaptive(env: GridEnv, *, start: Cell | None = None,
                     max_steps: int | None = None) -> ExecutionRecord:
    """A* with replanning: re-solve whenever the remaining plan is blocked.

    When no path exists on the current occupancy the policy waits in place,
    since a later obstacle reshuffle can reopen the way.
    """
    env.reset(start=start)
    max_steps = max_steps or 4 * (env.map.width + env.map.height)
    visited = [env.agent.position]
    steps = collisions = replans = 0
    planned = 0.0
    remaining: list[Cell] = []
    while steps < max_steps:
        occ = env.occupancy()
        blocked = any(occ[c[1], c[0]] for c in remaining)
        if not remaining or blocked:
            t0 = time.perf_counter()
            result = astar(occ, env.agent.position, env.map.goal)
            planned += time.perf_counter() - t0
            replans += 1
            remaining = result.path[1:] if result.path else []
        if remaining:
            nxt = remaining[0]
            action = _ACTION_OF_DISP[(nxt[0] - env.agent.position[0],
                                      nxt[1] - env.agent.position[1])]
        else:
            action = 4  # stay and wait for the world to open up
        res = env.step(action)
        steps += 1
        visited.append(res.state.position)
        if res.info["collided"]:
            collisions += 1
            remaining = []  # force a replan
        elif action != 4:
            remaining = remaining[1:]
        if res.done:
            return ExecutionRecord(True, visited, steps, collisions, replans,
                                   aborted=False, plan_seconds=planned)
    return ExecutionRecord(False, visited, steps, collisions, replans,
                           aborted=False, plan_seconds=planned)
