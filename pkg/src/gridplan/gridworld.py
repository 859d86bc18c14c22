"""Grid environments: map families, dynamic obstacles, rewards, observations.

Cells are (x, y) with x the column and y the row; occupancy arrays are
indexed [y, x]. Moves are 4-connected plus `stay`. Everything is seeded and
deterministic: same (map seed, dynamics seed, action sequence) gives the
same trajectory bit for bit.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

Cell = tuple[int, int]

FAMILIES = ("maze", "simple", "complex", "spiral", "custom")

# action indices: 0 up, 1 down, 2 left, 3 right, 4 stay
ACTION_NAMES = ("up", "down", "left", "right", "stay")
DISPLACEMENTS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTION_NAMES)


class MapError(ValueError):
    """Invalid map definition or map file."""


class GenerationError(RuntimeError):
    """Map generator could not produce a connected map."""


class MutationError(RuntimeError):
    """Dynamic layer could not be reshuffled within its density band."""


def manhattan_distance(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def flood_distances(blocked: np.ndarray, source: Cell) -> np.ndarray:
    """BFS distance map from source over free cells; -1 where unreachable."""
    h, w = blocked.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    sx, sy = source
    if blocked[sy, sx]:
        return dist
    dist[sy, sx] = 0
    queue = deque([source])
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1
        for dx, dy in DISPLACEMENTS[:4]:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


@dataclass
class GridMap:
    """Static occupancy grid with fixed start and goal."""

    width: int
    height: int
    blocked: np.ndarray  # bool (height, width)
    start: Cell
    goal: Cell
    family: str = "custom"

    def __post_init__(self):
        self.start = tuple(self.start)
        self.goal = tuple(self.goal)
        self.blocked = np.asarray(self.blocked, dtype=bool)
        if self.width < 4 or self.height < 4:
            raise MapError(f"map must be at least 4x4, got {self.width}x{self.height}")
        if self.blocked.shape != (self.height, self.width):
            raise MapError(f"occupancy shape {self.blocked.shape} != (height, width)")
        if self.family not in FAMILIES:
            raise MapError(f"unknown family {self.family!r}")
        if self.start == self.goal:
            raise MapError("start and goal must differ")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise MapError(f"{name} {cell} out of bounds")
            if self.blocked[cell[1], cell[0]]:
                raise MapError(f"{name} {cell} lies on an obstacle")
        if flood_distances(self.blocked, self.start)[self.goal[1], self.goal[0]] < 0:
            raise MapError("no free path from start to goal")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.blocked[cell[1], cell[0]]

    def free_cells(self) -> list[Cell]:
        ys, xs = np.nonzero(~self.blocked)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def copy(self) -> "GridMap":
        return GridMap(self.width, self.height, self.blocked.copy(),
                       self.start, self.goal, self.family)


# -- generators ---------------------------------------------------------------


def generate_map(family: str, size: tuple[int, int], seed: int) -> GridMap:
    """Build a connected map of the given family; deterministic in all args."""
    width, height = size
    if width < 4 or height < 4:
        raise MapError(f"map must be at least 4x4, got {width}x{height}")
    if family not in ("maze", "simple", "complex", "spiral"):
        raise MapError(f"cannot generate family {family!r}")
    builders = {"maze": _gen_maze, "simple": _gen_simple,
                "complex": _gen_complex, "spiral": _gen_spiral}
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        try:
            return builders[family](width, height, rng)
        except MapError:
            continue
    raise GenerationError(f"no connected {family} map of size {width}x{height} "
                          f"found in 1000 attempts (seed {seed})")


def _region_cell(rng, blocked, xs, ys) -> Cell:
    options = [(x, y) for x in xs for y in ys if not blocked[y, x]]
    if not options:
        raise MapError("region fully blocked")
    return options[rng.integers(len(options))]


def _gen_simple(w: int, h: int, rng) -> GridMap:
    """Open room with sparse uniform obstacles (4% density, under the 5% cap)."""
    blocked = np.zeros((h, w), dtype=bool)
    start = _region_cell(rng, blocked, range(max(1, w // 4 + 1)), range(max(1, h // 4 + 1)))
    goal = _region_cell(rng, blocked, range(w - max(1, w // 4 + 1), w),
                        range(h - max(1, h // 4 + 1), h))
    n_obstacles = int(0.04 * w * h)
    eligible = [(x, y) for x in range(w) for y in range(h) if (x, y) not in (start, goal)]
    for idx in rng.choice(len(eligible), size=n_obstacles, replace=False):
        x, y = eligible[idx]
        blocked[y, x] = True
    return GridMap(w, h, blocked, start, goal, "simple")


def _gen_maze(w: int, h: int, rng) -> GridMap:
    """Recursive-backtracker maze carved on the odd sublattice."""
    blocked = np.ones((h, w), dtype=bool)
    nx_cells, ny_cells = (w - 1) // 2, (h - 1) // 2
    if nx_cells * ny_cells < 2:
        # lattice too small for a maze: carve an L corridor instead
        for x in range(1, w - 1):
            blocked[1, x] = False
        for y in range(1, h - 1):
            blocked[y, w - 2] = False
        return GridMap(w, h, blocked, (1, 1), (w - 2, h - 2), "maze")
    nodes = [(2 * i + 1, 2 * j + 1) for i in range(nx_cells) for j in range(ny_cells)]
    start_node = nodes[rng.integers(len(nodes))]
    blocked[start_node[1], start_node[0]] = False
    stack = [start_node]
    while stack:
        x, y = stack[-1]
        neighbors = [(x + 2 * dx, y + 2 * dy) for dx, dy in DISPLACEMENTS[:4]
                     if 0 < x + 2 * dx < w and 0 < y + 2 * dy < h
                     and blocked[y + 2 * dy, x + 2 * dx]]
        if not neighbors:
            stack.pop()
            continue
        nx_, ny_ = neighbors[rng.integers(len(neighbors))]
        blocked[(y + ny_) // 2, (x + nx_) // 2] = False
        blocked[ny_, nx_] = False
        stack.append((nx_, ny_))
    start = (1, 1)
    dist = flood_distances(blocked, start)
    goal = tuple(int(v) for v in np.unravel_index(np.argmax(dist), dist.shape)[::-1])
    return GridMap(w, h, blocked, start, goal, "maze")


def _gen_complex(w: int, h: int, rng) -> GridMap:
    """Rooms connected by L-shaped corridors."""
    blocked = np.ones((h, w), dtype=bool)
    n_rooms = max(2, (w * h) // 50)
    centers = []
    for _ in range(n_rooms):
        rw = int(rng.integers(2, max(3, w // 3) + 1))
        rh = int(rng.integers(2, max(3, h // 3) + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        blocked[y0:y0 + rh, x0:x0 + rw] = False
        centers.append((x0 + rw // 2, y0 + rh // 2))
    for (x1, y1), (x2, y2) in zip(centers[:-1], centers[1:]):
        blocked[y1, min(x1, x2):max(x1, x2) + 1] = False
        blocked[min(y1, y2):max(y1, y2) + 1, x2] = False
    first, last = centers[0], centers[-1]
    start = _region_cell(rng, blocked, range(max(0, first[0] - 1), min(w, first[0] + 2)),
                         range(max(0, first[1] - 1), min(h, first[1] + 2)))
    goal = _region_cell(rng, blocked, range(max(0, last[0] - 1), min(w, last[0] + 2)),
                        range(max(0, last[1] - 1), min(h, last[1] + 2)))
    if start == goal:
        raise MapError("degenerate room layout")
    return GridMap(w, h, blocked, start, goal, "complex")


def _gen_spiral(w: int, h: int, rng) -> GridMap:
    """Single self-avoiding spiral corridor; exactly one start-goal path.

    Each carved cell has exactly one already-carved neighbor when added,
    so the free space is a simple path by construction.
    """
    corner = int(rng.integers(4))
    if rng.integers(2):
        dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]  # clockwise: right, down, left, up
    else:
        dirs = [(0, 1), (1, 0), (0, -1), (-1, 0)]  # counterclockwise
    starts = [(0, 0), (w - 1, 0), (w - 1, h - 1), (0, h - 1)]
    blocked = np.ones((h, w), dtype=bool)
    pos = starts[corner]
    d = 0
    blocked[pos[1], pos[0]] = False

    def carved_neighbors(cell):
        return sum(1 for dx, dy in DISPLACEMENTS[:4]
                   if 0 <= cell[0] + dx < w and 0 <= cell[1] + dy < h
                   and not blocked[cell[1] + dy, cell[0] + dx])

    while True:
        for turn in range(4):
            dx, dy = dirs[(d + turn) % 4]
            nxt = (pos[0] + dx, pos[1] + dy)
            if (0 <= nxt[0] < w and 0 <= nxt[1] < h and blocked[nxt[1], nxt[0]]
                    and carved_neighbors(nxt) == 1):
                d = (d + turn) % 4
                blocked[nxt[1], nxt[0]] = False
                pos = nxt
                break
        else:
            break
    return GridMap(w, h, blocked, starts[corner], pos, "spiral")


# -- map file format -----------------------------------------------------------

_CHARS = {"#": "blocked", ".": "free", "S": "start", "G": "goal"}


def map_to_text(m: GridMap) -> str:
    lines = [f"gridmap v1 {m.width} {m.height}"]
    for y in range(m.height):
        row = []
        for x in range(m.width):
            if (x, y) == m.start:
                row.append("S")
            elif (x, y) == m.goal:
                row.append("G")
            else:
                row.append("#" if m.blocked[y, x] else ".")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def map_from_text(text: str) -> GridMap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MapError("empty map file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "gridmap" or header[1] != "v1":
        raise MapError(f"bad header {lines[0]!r}, expected 'gridmap v1 <width> <height>'")
    try:
        width, height = int(header[2]), int(header[3])
    except ValueError as exc:
        raise MapError(f"bad header dimensions in {lines[0]!r}") from exc
    rows = lines[1:]
    if len(rows) != height:
        raise MapError(f"expected {height} rows, found {len(rows)}")
    blocked = np.zeros((height, width), dtype=bool)
    start = goal = None
    for y, row in enumerate(rows):
        if len(row) != width:
            raise MapError(f"row {y} has {len(row)} cells, expected {width}")
        for x, ch in enumerate(row):
            if ch not in _CHARS:
                raise MapError(f"bad cell {ch!r} at ({x}, {y})")
            if ch == "#":
                blocked[y, x] = True
            elif ch == "S":
                if start is not None:
                    raise MapError("multiple start cells")
                start = (x, y)
            elif ch == "G":
                if goal is not None:
                    raise MapError("multiple goal cells")
                goal = (x, y)
    if start is None:
        raise MapError("missing start cell")
    if goal is None:
        raise MapError("missing goal cell")
    return GridMap(width, height, blocked, start, goal, "custom")


def load_map(path) -> GridMap:
    with open(path, "r", encoding="utf-8") as fh:
        return map_from_text(fh.read())


def save_map(path, m: GridMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(map_to_text(m))


# -- reward ---------------------------------------------------------------------


@dataclass
class RewardConfig:
    """Weights and gains for the composite navigation reward."""

    w_p: float = 0.4
    w_c: float = 0.3
    w_s: float = 0.3
    eta: float = 1.0
    beta: float = 0.5
    r_goal: float = 200.0
    r_collision: float = 5.0  # penalty magnitude, applied negatively
    r_step: float = 0.2

    def __post_init__(self):
        if abs(self.w_p + self.w_c + self.w_s - 1.0) > 1e-12:
            raise ValueError(f"reward weights must sum to 1, got "
                             f"{self.w_p + self.w_c + self.w_s}")
        for name in ("w_p", "w_c", "w_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.eta < 0 or self.beta < 0:
            raise ValueError("eta and beta must be nonnegative")


def compute_reward(d_prev: float, d_now: float, collided: bool, reached_goal: bool,
                   a_t: Cell, a_tm1: Cell, a_tm2: Cell, cfg: RewardConfig,
                   moved: bool = True) -> float:
    """Composite reward: weighted progress, collision and smoothness terms,
    plus the flat per-move bonus and terminal goal bonus.

    The smoothness penalty is the Euclidean norm of the second difference
    of the last three displacement vectors. The move bonus only applies
    when the position actually changed.
    """
    progress = cfg.w_p * cfg.eta * (d_prev - d_now)
    collision = cfg.w_c * (-abs(cfg.r_collision)) if collided else 0.0
    jerk = (a_t[0] - 2 * a_tm1[0] + a_tm2[0], a_t[1] - 2 * a_tm1[1] + a_tm2[1])
    smoothness = cfg.w_s * cfg.beta * math.hypot(jerk[0], jerk[1])
    total = progress + collision - smoothness
    if moved:
        total += cfg.r_step
    if reached_goal:
        total += cfg.r_goal
    return total


# -- observations ----------------------------------------------------------------

N_CHANNELS = 4  # static obstacles, dynamic obstacles, agent, goal


@dataclass
class Observation:
    channels: np.ndarray  # (4, H, W) float64, all values in {0, 1}

    def validate(self) -> None:
        if self.channels.shape[0] != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channels")
        if not np.isin(self.channels, (0.0, 1.0)).all():
            raise ValueError("observation channels must be binary")
        for idx, name in ((2, "agent"), (3, "goal")):
            if self.channels[idx].sum() != 1.0:
                raise ValueError(f"{name} channel must contain exactly one cell")


def encode_observation(grid_map: GridMap, dynamic_cells, agent: Cell) -> Observation:
    channels = np.zeros((N_CHANNELS, grid_map.height, grid_map.width))
    channels[0] = grid_map.blocked
    for x, y in dynamic_cells:
        channels[1, y, x] = 1.0
    channels[2, agent[1], agent[0]] = 1.0
    channels[3, grid_map.goal[1], grid_map.goal[0]] = 1.0
    return Observation(channels)


def decode_observation(obs: Observation) -> tuple[Cell, Cell]:
    """Recover (agent, goal) cells from the one-hot channels."""
    ay, ax = np.unravel_index(np.argmax(obs.channels[2]), obs.channels[2].shape)
    gy, gx = np.unravel_index(np.argmax(obs.channels[3]), obs.channels[3].shape)
    return (int(ax), int(ay)), (int(gx), int(gy))


# -- dynamics ----------------------------------------------------------------------


@dataclass
class DynamicsConfig:
    density_target: float
    mutation_period: int = 10
    dynamics_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density_target <= 1.0:
            raise ValueError(f"density_target must be in [0, 1], got {self.density_target}")
        if self.mutation_period < 1:
            raise ValueError("mutation_period must be >= 1")


DENSITY_BAND = 0.02  # allowed deviation from density_target, in fraction terms


@dataclass
class AgentState:
    position: Cell
    previous_actions: tuple[Cell, Cell] = ((0, 0), (0, 0))  # (a_{t-1}, a_{t-2})
    steps_taken: int = 0
    collided: bool = False


@dataclass
class StepResult:
    state: AgentState
    observation: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def obstacle_density(grid_map: GridMap, dynamic_cells=()) -> float:
    """Blocked-cell percentage over the whole grid (static plus dynamic)."""
    blocked = int(grid_map.blocked.sum()) + sum(
        1 for c in dynamic_cells if not grid_map.blocked[c[1], c[0]])
    return 100.0 * blocked / (grid_map.width * grid_map.height)


class GridEnv:
    """Deterministic grid world; optional dynamic obstacle layer.

    The dynamic layer reshuffles every `mutation_period` completed steps,
    before the agent moves. After every reshuffle the episode stays
    solvable: agent-to-goal connectivity is rechecked and failing draws are
    redrawn, shrinking the obstacle count only within the density band.
    """

    def __init__(self, grid_map: GridMap, reward: RewardConfig | None = None,
                 dynamics: DynamicsConfig | None = None):
        self.map = grid_map
        self.reward_cfg = reward or RewardConfig()
        self.dynamics = dynamics
        self.dynamic_cells: set[Cell] = set()
        self._rng = None
        self._episode_index = 0
        if dynamics is not None:
            static_density = grid_map.blocked.sum() / (grid_map.width * grid_map.height)
            if static_density > dynamics.density_target + DENSITY_BAND:
                raise ValueError(
                    f"static density {static_density:.3f} already above "
                    f"density_target {dynamics.density_target:.3f} + band")
        self.agent: AgentState | None = None
        self._done = True

    def reset(self, start: Cell | None = None) -> Observation:
        pos = tuple(start) if start is not None else self.map.start
        if not self.map.is_free(pos):
            raise ValueError(f"start cell {pos} is not free")
        self.agent = AgentState(position=pos)
        self._done = False
        if self.dynamics is not None:
            self._rng = np.random.default_rng(
                [self.dynamics.dynamics_seed, self._episode_index])
            self._episode_index += 1
            self._mutate()
        return self.observe()

    def observe(self) -> Observation:
        return encode_observation(self.map, self.dynamic_cells, self.agent.position)

    def occupancy(self) -> np.ndarray:
        occ = self.map.blocked.copy()
        for x, y in self.dynamic_cells:
            occ[y, x] = True
        return occ

    def density(self) -> float:
        return obstacle_density(self.map, self.dynamic_cells)

    def step(self, action: int) -> StepResult:
        if self._done or self.agent is None:
            raise RuntimeError("step() on a finished episode; call reset() first")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
        mutated = False
        n = self.agent.steps_taken
        if (self.dynamics is not None and n > 0
                and n % self.dynamics.mutation_period == 0):
            self._mutate()
            mutated = True

        pos = self.agent.position
        dx, dy = DISPLACEMENTS[action]
        target = (pos[0] + dx, pos[1] + dy)
        occ = self.occupancy()
        is_move = action != 4
        blocked = is_move and (not self.map.in_bounds(target) or occ[target[1], target[0]])
        collided = bool(blocked)
        moved = is_move and not blocked
        new_pos = target if moved else pos
        disp = (dx, dy) if moved else (0, 0)

        d_prev = manhattan_distance(pos, self.map.goal)
        d_now = manhattan_distance(new_pos, self.map.goal)
        reached = new_pos == self.map.goal
        a_tm1, a_tm2 = self.agent.previous_actions
        reward = compute_reward(d_prev, d_now, collided, reached,
                                disp, a_tm1, a_tm2, self.reward_cfg, moved=moved)

        self.agent = AgentState(position=new_pos,
                                previous_actions=(disp, a_tm1),
                                steps_taken=self.agent.steps_taken + 1,
                                collided=collided)
        self._done = reached
        info = {"collided": collided, "moved": moved, "mutated": mutated,
                "reached_goal": reached}
        return StepResult(self.agent, self.observe(), reward, self._done, info)

    @property
    def done(self) -> bool:
        return self._done

    def _mutate(self) -> None:
        m = self.map
        n_total = m.width * m.height
        n_static = int(m.blocked.sum())
        target_n = int(round(self.dynamics.density_target * n_total))
        want = max(0, target_n - n_static)
        floor_n = max(0, math.ceil((self.dynamics.density_target - DENSITY_BAND) * n_total)
                      - n_static)
        agent_pos = self.agent.position if self.agent is not None else m.start
        eligible = sorted(c for c in m.free_cells()
                          if c not in (m.start, m.goal, agent_pos))
        want = min(want, len(eligible))
        n_dyn = want
        for attempt in range(2000):
            idx = self._rng.choice(len(eligible), size=n_dyn, replace=False) \
                if n_dyn else np.array([], dtype=int)
            cells = {eligible[i] for i in idx}
            occ = m.blocked.copy()
            for x, y in cells:
                occ[y, x] = True
            if flood_distances(occ, agent_pos)[m.goal[1], m.goal[0]] >= 0:
                self.dynamic_cells = cells
                return
            if attempt % 50 == 49 and n_dyn > floor_n:
                n_dyn -= 1
        raise MutationError(
            f"could not place {want} dynamic obstacles without severing "
            f"connectivity (floor {floor_n})")
