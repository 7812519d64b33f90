"""Policy evaluation: fixed task suites, SR/CR/TR metrics, trajectory export.

A suite is a persisted list of start/goal tasks for one world, so every
method is scored on identical tasks. Each trial re-runs the suite with a
small collision-checked start-pose jitter; rates are averaged over trials
(mean and population standard deviation). Success, collision and timeout
counts partition the task set, so the three rates always sum to exactly
100 percent.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FanavError, ProtocolError, ShapeError
from .data import EncoderProfile, encode_state
from .expert import ExpertConfig, expert_action, plan_path
from .nets import GaussianPolicyHead, load_checkpoint
from .sim import (
    COLLISION,
    SUCCESS,
    TIMEOUT,
    Action,
    EpisodeConfig,
    EpisodeEngine,
    NavState,
    Pose,
    RobotSpec,
    World,
    sample_task,
)

OUTCOMES = (SUCCESS, COLLISION, TIMEOUT)


@dataclass(frozen=True)
class Task:
    sx: float
    sy: float
    sheading: float
    gx: float
    gy: float

    @property
    def start(self) -> Pose:
        return Pose(self.sx, self.sy, self.sheading)

    @property
    def goal(self) -> tuple[float, float]:
        return (self.gx, self.gy)


@dataclass
class TaskSuite:
    world_name: str
    tasks: list[Task]
    episode: EpisodeConfig

    def __len__(self) -> int:
        return len(self.tasks)

    def canonical_text(self) -> str:
        lines = [f"task {t.sx:.6f} {t.sy:.6f} {t.sheading:.6f} "
                 f"{t.gx:.6f} {t.gy:.6f}" for t in self.tasks]
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.world_name.encode())
        h.update(self.canonical_text().encode())
        return h.hexdigest()


def make_suite(world: World, spec: RobotSpec, episode: EpisodeConfig,
               n_tasks: int, seed: int, min_separation: float = 3.0,
               clearance_margin: float = 0.1,
               check_feasible: bool = True) -> TaskSuite:
    """Sample collision-free, planner-feasible start/goal tasks."""
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    rng = np.random.default_rng([seed, 0x5717e])
    tasks: list[Task] = []
    clearance = spec.radius + clearance_margin
    attempts = 0
    while len(tasks) < n_tasks:
        attempts += 1
        if attempts > 200 * n_tasks:
            raise ConfigError("could not sample enough feasible tasks")
        start, goal = sample_task(world, rng, clearance, min_separation)
        if check_feasible:
            try:
                plan_path(world, (start.x, start.y), goal, spec.radius)
            except Exception:
                continue
        tasks.append(Task(start.x, start.y, start.heading, goal[0], goal[1]))
    return TaskSuite(world.name, tasks, episode)


def save_suite(suite: TaskSuite, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(suite.canonical_text())


def load_suite(path: str, world_name: str, episode: EpisodeConfig) -> TaskSuite:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] != "task" or len(parts) != 6:
                raise ConfigError(f"{path}:{lineno}: expected "
                                  "'task sx sy sh gx gy'")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric field")
            tasks.append(Task(*vals))
    if not tasks:
        raise ConfigError(f"{path}: empty suite")
    return TaskSuite(world_name, tasks, episode)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class NetworkPolicy:
    """Deterministic policy: squashed mean action of a trained head."""

    def __init__(self, head: GaussianPolicyHead, profile: EncoderProfile,
                 name: str = "policy"):
        if head.obs_dim != profile.dim:
            raise ShapeError(
                f"checkpoint expects {head.obs_dim}-dim features but the "
                f"encoder produces {profile.dim} (beam count mismatch?)")
        self.head = head
        self.profile = profile
        self.name = name

    @classmethod
    def from_checkpoint(cls, path: str) -> "NetworkPolicy":
        sections, meta = load_checkpoint(path)
        if "policy_mean" not in sections or "policy_log_std" not in sections:
            raise ConfigError(f"{path} is not a policy checkpoint")
        profile = EncoderProfile.from_dict(meta["profile"])
        head = GaussianPolicyHead(
            sections["policy_mean"].to_mlp(),
            np.asarray(meta["action_scale"], np.float64),
            log_std=sections["policy_log_std"].params,
            log_std_bounds=tuple(meta.get("log_std_bounds", (-5.0, 2.0))))
        return cls(head, profile, name=meta.get("method", "policy"))

    def reset(self, world: World, spec: RobotSpec, task: Task) -> None:
        pass

    def act(self, state: NavState, pose: Pose) -> Action:
        feats = encode_state(state, self.profile)
        v, w = self.head.mean_action(feats[None, :])[0]
        return Action(float(v), float(w))


class ExpertPilot:
    """The scripted demonstrator wrapped as an evaluation policy."""

    def __init__(self, cfg: ExpertConfig | None = None, name: str = "expert"):
        self.cfg = cfg or ExpertConfig()
        self.name = name
        self._path = None
        self._spec = None

    def reset(self, world: World, spec: RobotSpec, task: Task) -> None:
        self._spec = spec
        # fall back to tighter margins when the preferred one cannot plan
        margins = sorted({self.cfg.plan_inflation, 0.05, 0.02}, reverse=True)
        last_exc = None
        for margin in margins:
            try:
                self._path = plan_path(world, (task.sx, task.sy), task.goal,
                                       spec.radius, margin)
                return
            except FanavError as exc:
                last_exc = exc
        raise last_exc

    def act(self, state: NavState, pose: Pose) -> Action:
        if self._path is None:
            raise ProtocolError("ExpertPilot.act before reset")
        return expert_action(pose, self._path, self._spec, self.cfg)


class ZeroPolicy:
    """Stands still; times out every task. Useful as a metrics baseline."""

    name = "zero"

    def reset(self, world: World, spec: RobotSpec, task: Task) -> None:
        pass

    def act(self, state: NavState, pose: Pose) -> Action:
        return Action(0.0, 0.0)


# ---------------------------------------------------------------------------
# rollout and suite evaluation
# ---------------------------------------------------------------------------

def rollout(policy, world: World, spec: RobotSpec, episode: EpisodeConfig,
            task: Task, record: bool = True
            ) -> tuple[str, np.ndarray | None]:
    """Run one episode; returns (outcome, trajectory).

    The trajectory has one row per visited pose: (t, x, y, heading, v, w),
    starting at rest and ending at the terminal pose.
    """
    engine = EpisodeEngine(world, spec, episode)
    state = engine.reset(task.start, task.goal)
    if hasattr(policy, "reset"):
        policy.reset(world, spec, task)
    rows = [(0, task.start.x, task.start.y, task.start.heading, 0.0, 0.0)] \
        if record else None
    outcome = TIMEOUT
    while not engine.done:
        action = policy.act(state, engine.pose)
        out = engine.step(action)
        state = out.next_state
        if record:
            rows.append((engine.t, engine.pose.x, engine.pose.y,
                         engine.pose.heading, state.lin_vel, state.ang_vel))
        if out.terminal != "none":
            outcome = out.terminal
    traj = np.array(rows, np.float64) if record else None
    return outcome, traj


def _jittered_start(world: World, spec: RobotSpec, task: Task, trial: int,
                    task_idx: int, seed: int,
                    jitter: tuple[float, float]) -> Pose:
    if jitter[0] == 0 and jitter[1] == 0:
        return task.start
    rng = np.random.default_rng([seed, trial, task_idx])
    for _ in range(50):
        x = task.sx + rng.uniform(-jitter[0], jitter[0])
        y = task.sy + rng.uniform(-jitter[0], jitter[0])
        h = task.sheading + rng.uniform(-jitter[1], jitter[1])
        if world.contains(x, y) and world.clearance(x, y) >= spec.radius + 0.01:
            return Pose(x, y, h)
    return task.start


@dataclass
class EvalResult:
    """Suite metrics for one policy on one world."""

    world_name: str
    suite_digest: str
    method: str
    n_tasks: int
    n_trials: int
    outcomes: list[list[str]]            # [trial][task]
    sr_trials: list[float]
    cr_trials: list[float]
    tr_trials: list[float]
    trajectories: list[np.ndarray] = field(default_factory=list, repr=False)

    @staticmethod
    def _mean(xs) -> float:
        return float(np.mean(xs))

    @staticmethod
    def _std(xs) -> float:
        return float(np.std(xs))  # population std over trials

    @property
    def sr(self) -> float:
        return self._mean(self.sr_trials)

    @property
    def cr(self) -> float:
        return self._mean(self.cr_trials)

    @property
    def tr(self) -> float:
        return max(0.0, 100.0 - self.sr - self.cr)

    @property
    def sr_std(self) -> float:
        return self._std(self.sr_trials)

    @property
    def cr_std(self) -> float:
        return self._std(self.cr_trials)

    @property
    def tr_std(self) -> float:
        return self._std(self.tr_trials)

    def to_dict(self) -> dict:
        return {"world": self.world_name, "suite_digest": self.suite_digest,
                "method": self.method, "n_tasks": self.n_tasks,
                "n_trials": self.n_trials, "outcomes": self.outcomes,
                "sr_trials": self.sr_trials, "cr_trials": self.cr_trials,
                "tr_trials": self.tr_trials,
                "sr": self.sr, "cr": self.cr, "tr": self.tr,
                "sr_std": self.sr_std, "cr_std": self.cr_std,
                "tr_std": self.tr_std}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(d["world"], d["suite_digest"], d["method"], d["n_tasks"],
                   d["n_trials"], d["outcomes"], d["sr_trials"],
                   d["cr_trials"], d["tr_trials"])


def save_eval_result(result: EvalResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_eval_result(path: str) -> EvalResult:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalResult.from_dict(json.load(fh))


def evaluate_suite(policy, world: World, spec: RobotSpec, suite: TaskSuite,
                   n_trials: int = 3, seed: int = 0,
                   jitter: tuple[float, float] = (0.1, 0.1),
                   method: str | None = None,
                   record_trajectories: bool = True) -> EvalResult:
    """Score a policy on every task of a suite across jittered trials."""
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    if not suite.tasks:
        raise ConfigError("empty task suite")
    if suite.world_name != world.name:
        raise ProtocolError(
            f"suite was built for world '{suite.world_name}', got '{world.name}'")
    outcomes: list[list[str]] = []
    sr_t, cr_t, tr_t = [], [], []
    trajectories: list[np.ndarray] = []
    n = len(suite.tasks)
    for trial in range(n_trials):
        row = []
        for idx, task in enumerate(suite.tasks):
            start = _jittered_start(world, spec, task, trial, idx, seed, jitter)
            jt = Task(start.x, start.y, start.heading, task.gx, task.gy)
            outcome, traj = rollout(policy, world, spec, suite.episode, jt,
                                    record=record_trajectories and trial == 0)
            row.append(outcome)
            if trial == 0 and record_trajectories:
                trajectories.append(traj)
        outcomes.append(row)
        n_s = row.count(SUCCESS)
        n_c = row.count(COLLISION)
        sr = 100.0 * n_s / n
        cr = 100.0 * n_c / n
        sr_t.append(sr)
        cr_t.append(cr)
        tr_t.append(100.0 - sr - cr)
    return EvalResult(world.name, suite.digest,
                      method or getattr(policy, "name", "policy"),
                      n, n_trials, outcomes, sr_t, cr_t, tr_t, trajectories)


# ---------------------------------------------------------------------------
# trajectory export (CSV per task + one SVG overlay per suite)
# ---------------------------------------------------------------------------

_MARKER_STYLE = {
    "start": ("circle", "#3b6fd4"),
    "goal": ("circle", "#e8c02c"),
    SUCCESS: ("circle", "#e87fb4"),
    COLLISION: ("cross", "#d62718"),
    TIMEOUT: ("triangle", "#d62718"),
}


def export_trajectories(result: EvalResult, suite: TaskSuite, world: World,
                        out_dir: str) -> list[str]:
    """Write one CSV per task plus an SVG overlay; returns written paths."""
    if not result.trajectories:
        raise ConfigError("result carries no trajectories to export")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, traj in enumerate(result.trajectories):
        path = os.path.join(out_dir, f"task_{i:03d}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "x", "y", "heading", "v", "omega"))
            for row in traj:
                w.writerow((int(row[0]),) + tuple(f"{v:.6f}" for v in row[1:]))
        written.append(path)
    svg_path = os.path.join(out_dir, "overlay.svg")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(render_overlay_svg(result, suite, world))
    written.append(svg_path)
    return written


def _svg_marker(kind: str, color: str, x: float, y: float, r: float) -> str:
    if kind == "circle":
        return (f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" '
                f'fill="{color}" />')
    if kind == "cross":
        return (f'<path d="M {x - r:.2f} {y - r:.2f} L {x + r:.2f} {y + r:.2f} '
                f'M {x - r:.2f} {y + r:.2f} L {x + r:.2f} {y - r:.2f}" '
                f'stroke="{color}" stroke-width="{r / 2:.2f}" />')
    # triangle
    return (f'<path d="M {x:.2f} {y - r:.2f} L {x + r:.2f} {y + r:.2f} '
            f'L {x - r:.2f} {y + r:.2f} Z" fill="{color}" />')


def render_overlay_svg(result: EvalResult, suite: TaskSuite,
                       world: World, scale: float = 60.0) -> str:
    """World, trajectories and outcome markers as deterministic SVG text."""
    from .geometry import Circle, Rect

    W = world.width * scale
    H = world.height * scale

    def sx(x):
        return x * scale

    def sy(y):
        return H - y * scale  # flip so +y points up

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" '
           f'height="{H:.0f}" viewBox="0 0 {W:.0f} {H:.0f}">',
           f'<rect x="0" y="0" width="{W:.0f}" height="{H:.0f}" '
           'fill="#ffffff" stroke="#222222" stroke-width="3" />']
    for ob in world.obstacles:
        if isinstance(ob, Rect):
            out.append(f'<rect x="{sx(ob.x):.2f}" y="{sy(ob.y2):.2f}" '
                       f'width="{ob.w * scale:.2f}" '
                       f'height="{ob.h * scale:.2f}" fill="#9a9a9a" />')
        elif isinstance(ob, Circle):
            out.append(f'<circle cx="{sx(ob.cx):.2f}" cy="{sy(ob.cy):.2f}" '
                       f'r="{ob.r * scale:.2f}" fill="#9a9a9a" />')
    marker_r = 0.1 * scale
    trial0 = result.outcomes[0]
    for task, traj, outcome in zip(suite.tasks, result.trajectories, trial0):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in traj[:, 1:3])
        out.append(f'<polyline points="{pts}" fill="none" stroke="#5a7fb0" '
                   'stroke-width="2" opacity="0.8" />')
        kind, color = _MARKER_STYLE["start"]
        out.append(_svg_marker(kind, color, sx(traj[0, 1]), sy(traj[0, 2]),
                               marker_r))
        kind, color = _MARKER_STYLE["goal"]
        out.append(_svg_marker(kind, color, sx(task.gx), sy(task.gy), marker_r))
        kind, color = _MARKER_STYLE[outcome]
        out.append(_svg_marker(kind, color, sx(traj[-1, 1]), sy(traj[-1, 2]),
                               marker_r * 1.2))
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# cross-method comparison
# ---------------------------------------------------------------------------

def compare(results: dict[str, list[EvalResult]]
            ) -> tuple[list[dict], str, str]:
    """Aggregate per-method results over worlds into a comparison table.

    ``results`` maps method name to its per-world results. All methods must
    cover the same worlds with identical suites. Returns (rows, csv text,
    aligned text table); the overall row per method is the arithmetic mean
    across worlds.
    """
    if not results:
        raise ConfigError("no results to compare")
    methods = list(results)
    ref = results[methods[0]]
    world_order = [r.world_name for r in ref]
    digests = {r.world_name: r.suite_digest for r in ref}
    for m in methods:
        rs = results[m]
        if [r.world_name for r in rs] != world_order:
            raise ProtocolError(f"method '{m}' covers different worlds")
        for r in rs:
            if digests[r.world_name] != r.suite_digest:
                raise ProtocolError(
                    f"method '{m}' world '{r.world_name}' used a different "
                    "task suite")

    rows = []
    for m in methods:
        for r in results[m]:
            rows.append({"method": m, "world": r.world_name,
                         "sr": r.sr, "sr_std": r.sr_std,
                         "cr": r.cr, "cr_std": r.cr_std,
                         "tr": r.tr, "tr_std": r.tr_std})
        rs = results[m]
        rows.append({"method": m, "world": "overall",
                     "sr": float(np.mean([r.sr for r in rs])),
                     "sr_std": float(np.mean([r.sr_std for r in rs])),
                     "cr": float(np.mean([r.cr for r in rs])),
                     "cr_std": float(np.mean([r.cr_std for r in rs])),
                     "tr": float(np.mean([r.tr for r in rs])),
                     "tr_std": float(np.mean([r.tr_std for r in rs]))})

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "world", "sr_mean", "sr_std", "cr_mean", "cr_std",
                "tr_mean", "tr_std"))
    for r in rows:
        w.writerow((r["method"], r["world"], f"{r['sr']:.2f}",
                    f"{r['sr_std']:.2f}", f"{r['cr']:.2f}", f"{r['cr_std']:.2f}",
                    f"{r['tr']:.2f}", f"{r['tr_std']:.2f}"))
    csv_text = buf.getvalue()

    cols = world_order + ["overall"]
    lines = []
    header = f"{'method':<10}" + "".join(
        f"{w_ + ' ' + met:>18}" for met in ("SR", "CR", "TR") for w_ in cols)
    lines.append(header)
    by_key = {(r["method"], r["world"]): r for r in rows}
    for m in methods:
        cells = []
        for met, key in (("SR", "sr"), ("CR", "cr"), ("TR", "tr")):
            for w_ in cols:
                r = by_key[(m, w_)]
                cells.append(f"{r[key]:>11.2f} ±{r[key + '_std']:>4.2f}")
        lines.append(f"{m:<10}" + "".join(f"{c:>18}" for c in cells))
    text = "\n".join(lines) + "\n"
    return rows, csv_text, text
