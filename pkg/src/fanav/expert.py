"""Scripted demonstrator: grid planner, pure-pursuit tracking, data collection.

The demonstrator plans a shortcut-smoothed A* path and tracks it with pure
pursuit. Run clean it reliably reaches the goal; run with action
perturbations it produces genuine collision episodes. Every finished episode
is labeled by its terminal outcome, which is what partitions the offline
dataset downstream.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NoPathError, ProtocolError
from .geometry import Circle, segment_shape_distance, wrap_angle
from .sim import (
    COLLISION,
    NONE,
    SUCCESS,
    TIMEOUT,
    Action,
    EpisodeConfig,
    EpisodeEngine,
    NavState,
    Pose,
    RobotSpec,
    World,
    clamp_action,
    sample_task,
)

CLEAN = "clean"
PERTURBED = "perturbed"


@dataclass(frozen=True)
class ExpertConfig:
    """Tuning knobs of the scripted demonstrator.

    The primary fields describe the careful demonstrator used for success
    demonstrations; mild per-step action noise decorrelates consecutive
    actions so clones cannot latch onto the velocity feedback channels.
    The ``harvest_*`` fields describe a reckless variant (thin planning
    margins, long lookahead, full speed) whose systematic corner-cutting
    produces genuine, state-attributable collision episodes; the ratio
    collector uses it to fill the collision partition.
    """

    lookahead: float = 0.45         # meters ahead along the path
    gain_heading: float = 3.0       # rad/s per rad of bearing error
    speed_scale: float = 0.85       # fraction of v_max when aligned
    noise_std: tuple[float, float] = (0.3, 1.2)    # (m/s, rad/s)
    noise_prob: float = 0.4         # chance per step of a perturbation
    plan_inflation: float = 0.08    # extra clearance beyond the robot radius
    min_separation: float = 3.0     # start-to-goal distance when sampling
    harvest_lookahead: float = 0.7
    harvest_gain: float = 2.0
    harvest_speed: float = 1.0
    harvest_noise_std: tuple[float, float] = (0.3, 1.0)
    harvest_noise_prob: float = 0.15
    harvest_inflation: float = 0.0

    def __post_init__(self):
        for prob in (self.noise_prob, self.harvest_noise_prob):
            if not (0.0 <= prob <= 1.0):
                raise ConfigError("noise probabilities must lie in [0, 1]")
        for std in (self.noise_std, self.harvest_noise_std):
            if std[0] < 0 or std[1] < 0:
                raise ConfigError("noise_std components must be non-negative")
        for scale in (self.speed_scale, self.harvest_speed):
            if not (0.0 < scale <= 1.0):
                raise ConfigError("speed scales must lie in (0, 1]")

    def harvest_profile(self) -> "ExpertConfig":
        """The reckless variant used to harvest collision episodes."""
        return replace(self, lookahead=self.harvest_lookahead,
                       gain_heading=self.harvest_gain,
                       speed_scale=self.harvest_speed,
                       noise_std=self.harvest_noise_std,
                       noise_prob=self.harvest_noise_prob,
                       plan_inflation=self.harvest_inflation)


# ---------------------------------------------------------------------------
# occupancy-grid A* with line-of-sight shortcutting
# ---------------------------------------------------------------------------

GRID_RES = 0.1

_SQRT2 = math.sqrt(2.0)
_MOVES = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
          (1, 1, _SQRT2), (1, -1, _SQRT2), (-1, 1, _SQRT2), (-1, -1, _SQRT2))


def _grid_distances(ob, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    if isinstance(ob, Circle):
        return np.maximum(0.0, np.hypot(gx - ob.cx, gy - ob.cy) - ob.r)
    dx = np.maximum(np.maximum(ob.x - gx, 0.0), gx - ob.x2)
    dy = np.maximum(np.maximum(ob.y - gy, 0.0), gy - ob.y2)
    return np.hypot(dx, dy)


def occupancy_grid(world: World, inflate: float,
                   res: float = GRID_RES) -> np.ndarray:
    """Boolean blocked-grid of cell centers, inflated by ``inflate`` meters."""
    nx = max(1, int(math.floor(world.width / res)))
    ny = max(1, int(math.floor(world.height / res)))
    xs = (np.arange(nx) + 0.5) * res
    ys = (np.arange(ny) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    blocked = ((gx < inflate) | (gx > world.width - inflate)
               | (gy < inflate) | (gy > world.height - inflate))
    for ob in world.obstacles:
        blocked |= _grid_distances(ob, gx, gy) <= inflate
    return blocked


def _cell_of(x: float, y: float, blocked: np.ndarray,
             res: float) -> tuple[int, int]:
    i = min(blocked.shape[0] - 1, max(0, int(x / res)))
    j = min(blocked.shape[1] - 1, max(0, int(y / res)))
    return i, j


def _nearest_free_cell(blocked: np.ndarray, i: int, j: int,
                       max_ring: int = 5) -> tuple[int, int] | None:
    if not blocked[i, j]:
        return i, j
    for ring in range(1, max_ring + 1):
        for di in range(-ring, ring + 1):
            for dj in range(-ring, ring + 1):
                if max(abs(di), abs(dj)) != ring:
                    continue
                a, b = i + di, j + dj
                if 0 <= a < blocked.shape[0] and 0 <= b < blocked.shape[1] \
                        and not blocked[a, b]:
                    return a, b
    return None


def _astar(blocked: np.ndarray, start: tuple[int, int],
           goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    nx, ny = blocked.shape

    def h(c):
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (dx + dy) + (_SQRT2 - 2.0) * min(dx, dy)  # octile

    g = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    heap = [(h(start), start)]
    closed = set()
    while heap:
        _, cur = heapq.heappop(heap)
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        if cur in closed:
            continue
        closed.add(cur)
        ci, cj = cur
        for di, dj, cost in _MOVES:
            a, b = ci + di, cj + dj
            if not (0 <= a < nx and 0 <= b < ny) or blocked[a, b]:
                continue
            if di and dj and (blocked[ci + di, cj] or blocked[ci, cj + dj]):
                continue  # no corner cutting
            cand = g[cur] + cost
            if cand < g.get((a, b), math.inf):
                g[(a, b)] = cand
                parent[(a, b)] = cur
                heapq.heappush(heap, (cand + h((a, b)), (a, b)))
    return None


def _segment_clear(world: World, ax, ay, bx, by, inflate: float) -> bool:
    if not (inflate <= min(ax, bx) and max(ax, bx) <= world.width - inflate
            and inflate <= min(ay, by) and max(ay, by) <= world.height - inflate):
        return False
    return all(segment_shape_distance(ob, ax, ay, bx, by) > inflate
               for ob in world.obstacles)


def _shortcut(world: World, pts: list[tuple[float, float]],
              inflate: float) -> list[tuple[float, float]]:
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segment_clear(world, *pts[i], *pts[j], inflate):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def plan_path(world: World, start: tuple[float, float],
              goal: tuple[float, float], robot_radius: float,
              inflation: float = 0.05) -> list[tuple[float, float]]:
    """Collision-free polyline from start to goal, or raise :class:`NoPathError`.

    A* runs on a 0.1 m occupancy grid inflated by ``robot_radius +
    inflation``; the grid path is then shortcut wherever straight segments
    have the same clearance.
    """
    inflate = robot_radius + inflation
    for label, (px, py) in (("start", start), ("goal", goal)):
        if not world.contains(px, py):
            raise ConfigError(f"{label} outside world bounds")
        # endpoints must be legal robot positions; the extra margin is a
        # planning preference, handled by snapping to the nearest free cell
        if world.clearance(px, py) < robot_radius:
            raise ConfigError(f"{label} inside an obstacle at robot radius")

    if _segment_clear(world, start[0], start[1], goal[0], goal[1], inflate):
        return [tuple(map(float, start)), tuple(map(float, goal))]

    blocked = occupancy_grid(world, inflate)
    s = _nearest_free_cell(blocked, *_cell_of(start[0], start[1], blocked, GRID_RES))
    t = _nearest_free_cell(blocked, *_cell_of(goal[0], goal[1], blocked, GRID_RES))
    if s is None or t is None:
        raise NoPathError("start or goal cell blocked on the planning grid")
    cells = _astar(blocked, s, t)
    if cells is None:
        raise NoPathError("no path between start and goal")
    pts = [tuple(map(float, start))]
    pts += [((i + 0.5) * GRID_RES, (j + 0.5) * GRID_RES) for i, j in cells]
    pts.append(tuple(map(float, goal)))
    return _shortcut(world, pts, inflate * 0.9)


def path_length(path: list[tuple[float, float]]) -> float:
    return sum(math.hypot(bx - ax, by - ay)
               for (ax, ay), (bx, by) in zip(path, path[1:]))


# ---------------------------------------------------------------------------
# pure-pursuit tracking
# ---------------------------------------------------------------------------

def _lookahead_point(path: list[tuple[float, float]], x: float, y: float,
                     lookahead: float) -> tuple[float, float]:
    # closest projection onto the polyline, as arc length
    best_d2 = math.inf
    best_s = 0.0
    s_acc = 0.0
    seg_lens = []
    for (ax, ay), (bx, by) in zip(path, path[1:]):
        vx, vy = bx - ax, by - ay
        L2 = vx * vx + vy * vy
        L = math.sqrt(L2)
        seg_lens.append(L)
        if L2 > 0:
            u = min(1.0, max(0.0, ((x - ax) * vx + (y - ay) * vy) / L2))
        else:
            u = 0.0
        px, py = ax + u * vx, ay + u * vy
        d2 = (x - px) ** 2 + (y - py) ** 2
        if d2 < best_d2:
            best_d2 = d2
            best_s = s_acc + u * L
        s_acc += L
    # walk lookahead meters past the projection
    target_s = best_s + lookahead
    s_acc = 0.0
    for (ax, ay), (bx, by), L in zip(path, path[1:], seg_lens):
        if target_s <= s_acc + L and L > 0:
            u = (target_s - s_acc) / L
            return ax + u * (bx - ax), ay + u * (by - ay)
        s_acc += L
    return path[-1]


def expert_action(pose: Pose, path: list[tuple[float, float]],
                  spec: RobotSpec, cfg: ExpertConfig) -> Action:
    """Pure-pursuit command toward the lookahead point on the path."""
    if not path:
        raise ProtocolError("expert_action called with an empty path")
    tx, ty = _lookahead_point(path, pose.x, pose.y, cfg.lookahead)
    phi = wrap_angle(math.atan2(ty - pose.y, tx - pose.x) - pose.heading)
    v = cfg.speed_scale * spec.v_max * max(0.0, math.cos(phi))
    w = min(spec.omega_max, max(-spec.omega_max, cfg.gain_heading * phi))
    return Action(v, w)


# ---------------------------------------------------------------------------
# episode collection
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """One finished episode: raw observations plus the outcome label."""

    traj_id: int
    outcome: str                 # SUCCESS or COLLISION (timeouts are dropped)
    states: list[NavState]       # length T+1
    actions: list[Action]        # length T
    rewards: list[float]         # length T
    start: Pose
    goal: tuple[float, float]

    def __len__(self) -> int:
        return len(self.actions)


def run_episode(world: World, spec: RobotSpec, episode_cfg: EpisodeConfig,
                expert_cfg: ExpertConfig, rng: np.random.Generator,
                mode: str, traj_id: int,
                start: Pose | None = None,
                goal: tuple[float, float] | None = None) -> Trajectory | None:
    """Run one demonstrator episode; return None on a planning dead end."""
    if mode not in (CLEAN, PERTURBED):
        raise ConfigError(f"unknown collection mode '{mode}'")
    if start is None or goal is None:
        start, goal = sample_task(world, rng, spec.radius + expert_cfg.plan_inflation
                                  + 0.02, expert_cfg.min_separation)
    try:
        path = plan_path(world, (start.x, start.y), goal, spec.radius,
                         expert_cfg.plan_inflation)
    except NoPathError:
        return None

    engine = EpisodeEngine(world, spec, episode_cfg)
    states = [engine.reset(start, goal)]
    actions: list[Action] = []
    rewards: list[float] = []
    outcome = TIMEOUT
    while not engine.done:
        a = expert_action(engine.pose, path, spec, expert_cfg)
        if mode == PERTURBED and expert_cfg.noise_prob > 0:
            if rng.uniform() < expert_cfg.noise_prob:
                dv, dw = rng.normal(0.0, 1.0, 2)
                a = Action(a.v_cmd + dv * expert_cfg.noise_std[0],
                           a.omega_cmd + dw * expert_cfg.noise_std[1])
        a = clamp_action(a, spec)
        out = engine.step(a)
        states.append(out.next_state)
        actions.append(a)
        rewards.append(out.reward)
        if out.terminal != NONE:
            outcome = out.terminal
    return Trajectory(traj_id, outcome, states, actions, rewards, start, goal)


def collect(world: World, spec: RobotSpec, episode_cfg: EpisodeConfig,
            expert_cfg: ExpertConfig, n_episodes: int, mode: str,
            seed: int, first_traj_id: int = 0) -> list[Trajectory]:
    """Collect ``n_episodes`` labeled episodes, discarding timeouts.

    Each episode draws from its own random stream derived from (seed,
    episode index), so parallel and serial collection agree exactly.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    out: list[Trajectory] = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep])
        traj = run_episode(world, spec, episode_cfg, expert_cfg, rng, mode,
                           first_traj_id + ep)
        if traj is not None and traj.outcome in (SUCCESS, COLLISION):
            out.append(traj)
    return out


def collect_to_ratio(world: World, spec: RobotSpec, episode_cfg: EpisodeConfig,
                     expert_cfg: ExpertConfig, min_transitions: int,
                     target_col_ratio: float, seed: int,
                     ratio_tol: float = 0.01,
                     max_episodes: int = 100_000) -> list[Trajectory]:
    """Collect until the dataset holds at least ``min_transitions``
    transitions at the target collision fraction.

    Three phases: the careful demonstrator (perturbed mode) fills the
    success side; the reckless harvest variant then runs until enough
    collision transitions exist (its incidental successes are kept too);
    finally whole trajectories are trimmed newest-first to land within
    ``ratio_tol`` of the target. With a zero target only clean episodes
    run and collision trajectories are dropped.
    """
    if not (0.0 <= target_col_ratio < 1.0):
        raise ConfigError("target_col_ratio must lie in [0, 1)")
    succ: list[Trajectory] = []
    coll: list[Trajectory] = []
    n_succ = n_coll = 0
    ep = 0
    stalled = 0

    def run(mode: str, cfg: ExpertConfig, guard: bool = False) -> None:
        nonlocal ep, n_succ, n_coll, stalled
        rng = np.random.default_rng([seed, ep])
        traj = run_episode(world, spec, episode_cfg, cfg, rng, mode, ep)
        ep += 1
        if guard:
            stalled = 0 if (traj is not None and traj.outcome == COLLISION) \
                else stalled + 1
            if stalled >= 500:
                raise ConfigError(
                    "500 consecutive harvest episodes without a collision; "
                    "loosen the harvest profile or lower target_col_ratio")
        if traj is None or traj.outcome == TIMEOUT:
            return
        if traj.outcome == SUCCESS:
            succ.append(traj)
            n_succ += len(traj)
        else:
            coll.append(traj)
            n_coll += len(traj)

    if target_col_ratio == 0:
        while n_succ < min_transitions:
            if ep >= max_episodes:
                raise ConfigError(
                    f"only {n_succ}/{min_transitions} success transitions "
                    f"after {max_episodes} episodes")
            run(CLEAN, expert_cfg)
        return _trim_to_ratio(succ, [], 0.0, ratio_tol, min_transitions)

    exp_target = math.ceil((1.0 - target_col_ratio) * min_transitions)
    col_target = math.ceil(target_col_ratio * min_transitions)
    while n_succ < exp_target:
        if ep >= max_episodes:
            raise ConfigError(
                f"only {n_succ}/{exp_target} success transitions after "
                f"{max_episodes} episodes")
        run(PERTURBED, expert_cfg)
    harvest = expert_cfg.harvest_profile()
    while n_coll < col_target:
        if ep >= max_episodes:
            raise ConfigError(
                f"only {n_coll}/{col_target} collision transitions after "
                f"{max_episodes} episodes")
        run(PERTURBED, harvest, guard=True)
    return _trim_to_ratio(succ, coll, target_col_ratio, ratio_tol,
                          min_transitions)


def _trim_to_ratio(succ: list[Trajectory], coll: list[Trajectory],
                   target: float, tol: float,
                   min_transitions: int) -> list[Trajectory]:
    """Drop newest whole trajectories while that improves the ratio match."""
    n_succ = sum(len(t) for t in succ)
    n_coll = sum(len(t) for t in coll)

    def ratio(ns, nc):
        return nc / (ns + nc) if ns + nc else 0.0

    improved = True
    while improved:
        improved = False
        err = abs(ratio(n_succ, n_coll) - target)
        if len(succ) > 1:
            cand = n_succ - len(succ[-1])
            if cand + n_coll >= min_transitions \
                    and abs(ratio(cand, n_coll) - target) < err:
                n_succ = cand
                succ.pop()
                improved = True
                continue
        if len(coll) > (0 if target == 0 else 1):
            cand = n_coll - len(coll[-1])
            if n_succ + cand >= min_transitions \
                    and abs(ratio(n_succ, cand) - target) < err:
                n_coll = cand
                coll.pop()
                improved = True
    realized = ratio(n_succ, n_coll)
    if abs(realized - target) > tol:
        raise ConfigError(
            f"collected ratio {realized:.4f} misses target {target:.4f} "
            f"beyond tolerance {tol:.4f}; trajectories too long to trim")
    return succ + coll


def realized_collision_ratio(trajectories: list[Trajectory]) -> float:
    n_coll = sum(len(t) for t in trajectories if t.outcome == COLLISION)
    total = sum(len(t) for t in trajectories)
    return n_coll / total if total else 0.0
