"""Procedural room generation with a connectivity guarantee.

Obstacles (rectangles and circles) are sampled until their combined area
reaches the requested density. A layout is accepted only when the planner
can connect 20 random free-point pairs, so generated rooms never contain
unreachable pockets at the robot's inflation radius.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, GenerationError, NoPathError
from .expert import plan_path
from .geometry import Circle, Rect, Shape
from .sim import World, sample_free_point

PROBE_PAIRS = 20


def _sample_layout(width: float, height: float, density: float,
                   rng: np.random.Generator) -> tuple[Shape, ...]:
    target_area = density * width * height
    shapes: list[Shape] = []
    area = 0.0
    margin = 0.3
    while area < target_area:
        if rng.uniform() < 0.55:
            w = rng.uniform(0.4, 1.4)
            h = rng.uniform(0.4, 1.4)
            x = rng.uniform(margin, max(margin + 1e-6, width - w - margin))
            y = rng.uniform(margin, max(margin + 1e-6, height - h - margin))
            shapes.append(Rect(round(x, 3), round(y, 3), round(w, 3),
                               round(h, 3)))
            area += w * h
        else:
            r = rng.uniform(0.2, 0.55)
            cx = rng.uniform(margin + r, width - r - margin)
            cy = rng.uniform(margin + r, height - r - margin)
            shapes.append(Circle(round(cx, 3), round(cy, 3), round(r, 3)))
            area += np.pi * r * r
    return tuple(shapes)


def _connected(world: World, robot_radius: float,
               rng: np.random.Generator) -> bool:
    clearance = robot_radius + 0.15
    try:
        for _ in range(PROBE_PAIRS):
            ax, ay = sample_free_point(world, rng, clearance, max_tries=2000)
            bx, by = sample_free_point(world, rng, clearance, max_tries=2000)
            plan_path(world, (ax, ay), (bx, by), robot_radius)
    except (NoPathError, ConfigError):
        return False
    return True


def generate_world(width: float, height: float, density: float, seed: int,
                   name: str = "generated", robot_radius: float = 0.2,
                   max_attempts: int = 100) -> World:
    """Generate a connected cluttered room at the requested obstacle density.

    Identical arguments always produce the identical world; layouts failing
    the reachability probe are discarded and resampled.
    """
    if not (0.0 <= density <= 1.0):
        raise ConfigError("density must lie in [0, 1]")
    if density == 0.0:
        return World(width, height, (), name)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        shapes = _sample_layout(width, height, density, rng)
        world = World(width, height, shapes, name)
        if _connected(world, robot_radius, rng):
            return world
    raise GenerationError(
        f"no connected layout at density {density:.2f} after "
        f"{max_attempts} attempts")
