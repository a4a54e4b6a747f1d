"""Desk-scale 2-D manipulation tasks with RGB rendering and scripted experts.

Both tasks live in the unit workspace [0, 1]^2 and are positionally
controlled: an action is the target position the agent/pusher moves toward
under a per-step speed cap. Dynamics are simple deterministic kinematics,
so replaying (seed, action sequence) reproduces an episode exactly.

PushT-2D: a circular pusher must shove a T-shaped block onto a fixed goal
pose; success is goal-region coverage above a threshold. Reach-2D: the agent
must reach a target visible only in the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon

from .errors import DomainError, ProtocolError

IMAGE_HW = (84, 84)

# Render palette (RGB in [0,1]); drawing order is background, goal, block, pusher/agent.
COLOR_BACKGROUND = (1.0, 1.0, 1.0)
COLOR_GOAL = (0.55, 0.85, 0.55)
COLOR_BLOCK = (0.35, 0.35, 0.45)
COLOR_PUSHER = (0.85, 0.2, 0.2)
COLOR_TARGET = (0.3, 0.75, 0.3)
COLOR_AGENT = (0.85, 0.2, 0.2)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# T-block geometry. Two axis-aligned rectangles in the local frame (a wide bar
# on top of a stem), shifted so the local origin is the area centroid.

_BAR_W, _BAR_H = 0.28, 0.09
_STEM_W, _STEM_H = 0.09, 0.18


def _t_rects() -> tuple[np.ndarray, np.ndarray]:
    bar = np.array([[-_BAR_W / 2, 0.0], [_BAR_W / 2, _BAR_H]])
    stem = np.array([[-_STEM_W / 2, -_STEM_H], [_STEM_W / 2, 0.0]])
    a_bar = _BAR_W * _BAR_H
    a_stem = _STEM_W * _STEM_H
    cy = (a_bar * (_BAR_H / 2) + a_stem * (-_STEM_H / 2)) / (a_bar + a_stem)
    bar[:, 1] -= cy
    stem[:, 1] -= cy
    return bar, stem


T_BAR, T_STEM = _t_rects()

T_VERTICES = np.array([
    [T_BAR[0, 0], T_BAR[1, 1]],    # bar top-left
    [T_BAR[1, 0], T_BAR[1, 1]],    # bar top-right
    [T_BAR[1, 0], T_BAR[0, 1]],    # bar bottom-right
    [T_STEM[1, 0], T_STEM[1, 1]],  # stem top-right
    [T_STEM[1, 0], T_STEM[0, 1]],  # stem bottom-right
    [T_STEM[0, 0], T_STEM[0, 1]],  # stem bottom-left
    [T_STEM[0, 0], T_STEM[1, 1]],  # stem top-left
    [T_BAR[0, 0], T_BAR[0, 1]],    # bar bottom-left
])

T_MAX_RADIUS = float(np.max(np.linalg.norm(T_VERTICES, axis=1)))
T_AREA = _BAR_W * _BAR_H + _STEM_W * _STEM_H


def t_polygon_world(pos, angle) -> np.ndarray:
    return T_VERTICES @ _rot(angle).T + np.asarray(pos)


def t_contains(points: np.ndarray, pos, angle) -> np.ndarray:
    """Vectorized membership test for world points against a posed T-block."""
    local = (np.asarray(points) - np.asarray(pos)) @ _rot(angle)
    def in_rect(r):
        return ((local[..., 0] >= r[0, 0]) & (local[..., 0] <= r[1, 0]) &
                (local[..., 1] >= r[0, 1]) & (local[..., 1] <= r[1, 1]))
    return in_rect(T_BAR) | in_rect(T_STEM)


def coverage(block_pos, block_angle, goal_pos, goal_angle) -> float:
    """area(block T  intersect  goal T) / area(goal T), by polygon clipping."""
    block = Polygon(t_polygon_world(block_pos, block_angle))
    goal = Polygon(t_polygon_world(goal_pos, goal_angle))
    return float(block.intersection(goal).area / goal.area)


def _closest_point_on_boundary(point: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Nearest point to ``point`` on the closed polyline ``verts``."""
    a = verts
    b = np.roll(verts, -1, axis=0)
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-18)
    t = np.clip(((point - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
    proj = a + ab * t[:, None]
    d2 = ((proj - point) ** 2).sum(axis=1)
    return proj[int(np.argmin(d2))]


# ---------------------------------------------------------------------------
# PushT-2D


@dataclass(frozen=True)
class PushTParams:
    pusher_radius: float = 0.04
    pusher_speed: float = 0.06      # max commanded motion per env step
    substep: float = 0.01           # pusher motion resolved in chunks of this length
    rot_gain: float = 2.2           # penetration-to-rotation coupling
    slide_factor: float = 0.65      # off-center pushes trade translation for rotation
    goal_pos: tuple[float, float] = (0.5, 0.5)
    goal_angle: float = math.pi / 4
    success_threshold: float = 0.90
    max_steps: int = 400
    init_margin: float = 0.24       # block centroid sampled in [m, 1-m]^2
    init_max_coverage: float = 0.25


@dataclass
class PushTState:
    pusher: np.ndarray
    block_pos: np.ndarray
    block_angle: float

    def copy(self) -> "PushTState":
        return PushTState(self.pusher.copy(), self.block_pos.copy(), self.block_angle)


def _resolve_contact(state: PushTState, params: PushTParams) -> bool:
    """Push the block out of the pusher circle; returns True if contact happened."""
    verts = t_polygon_world(state.block_pos, state.block_angle)
    c = state.pusher
    q = _closest_point_on_boundary(c, verts)
    d = float(np.linalg.norm(q - c))
    inside = bool(t_contains(c[None], state.block_pos, state.block_angle)[0])
    rp = params.pusher_radius
    if not inside and d >= rp:
        return False
    if d < 1e-12:
        n = np.array([1.0, 0.0])
        pen = rp
    elif inside:
        n = (c - q) / d
        pen = rp + d
    else:
        n = (q - c) / d
        pen = rp - d

    lever = q - state.block_pos
    lever_norm = float(np.linalg.norm(lever))
    # off-center pushes convert part of the penetration into rotation
    if lever_norm > 1e-9:
        lever_hat = lever / lever_norm
        kappa = lever_hat[0] * n[1] - lever_hat[1] * n[0]
    else:
        kappa = 0.0
    state.block_pos = state.block_pos + pen * n * (1.0 - params.slide_factor * abs(kappa))
    state.block_angle = wrap_angle(state.block_angle + params.rot_gain * pen * kappa)

    m = T_MAX_RADIUS
    state.block_pos = np.clip(state.block_pos, m, 1.0 - m)
    return True


def pusht_move(state: PushTState, target: np.ndarray, params: PushTParams) -> bool:
    """Move the pusher toward ``target`` (speed-capped), resolving contacts.

    Mutates ``state``; returns whether any contact occurred. Motion is split
    into substeps so the pusher cannot tunnel through the thin stem.
    """
    delta = target - state.pusher
    dist = float(np.linalg.norm(delta))
    if dist > params.pusher_speed:
        delta = delta * (params.pusher_speed / dist)
        dist = params.pusher_speed
    contact = False
    n_sub = max(1, int(math.ceil(dist / params.substep)))
    step_vec = delta / n_sub
    rp = params.pusher_radius
    for _ in range(n_sub):
        state.pusher = np.clip(state.pusher + step_vec, rp, 1.0 - rp)
        if _resolve_contact(state, params):
            contact = True
    return contact


class PushT2DEnv:
    """Kinematic block-pushing task. Actions are target pusher positions."""

    name = "pusht2d"
    action_dim = 2
    lowdim_dim = 2
    n_cameras = 1

    def __init__(self, params: PushTParams | None = None):
        self.params = params or PushTParams()
        self.state: PushTState | None = None
        self._done = True
        self._steps = 0
        self._max_coverage = 0.0
        self._n_clamped = 0

    @property
    def max_steps(self) -> int:
        return self.params.max_steps

    def reset(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        p = self.params
        while True:
            pos = rng.uniform(p.init_margin, 1.0 - p.init_margin, 2)
            angle = float(rng.uniform(-math.pi, math.pi))
            if coverage(pos, angle, p.goal_pos, p.goal_angle) < p.init_max_coverage:
                break
        while True:
            pusher = rng.uniform(0.08, 0.92, 2)
            verts = t_polygon_world(pos, angle)
            q = _closest_point_on_boundary(pusher, verts)
            inside = bool(t_contains(pusher[None], pos, angle)[0])
            if not inside and np.linalg.norm(q - pusher) > p.pusher_radius + 0.02:
                break
        self.state = PushTState(pusher, pos, angle)
        self._done = False
        self._steps = 0
        self._max_coverage = coverage(pos, angle, p.goal_pos, p.goal_angle)
        self._n_clamped = 0
        return self._obs()

    def step(self, action) -> tuple[dict, bool, dict]:
        if self._done or self.state is None:
            raise ProtocolError("step() on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.isfinite(action).all():
            raise DomainError("non-finite action")
        clipped = np.clip(action, 0.0, 1.0)
        clamped = bool((clipped != action).any())
        if clamped:
            self._n_clamped += 1

        st = self.state
        contact = pusht_move(st, clipped, self.params)
        self._steps += 1
        cov = coverage(st.block_pos, st.block_angle, self.params.goal_pos, self.params.goal_angle)
        self._max_coverage = max(self._max_coverage, cov)
        success = self._max_coverage >= self.params.success_threshold
        self._done = success or self._steps >= self.params.max_steps
        info = {
            "coverage": cov,
            "max_coverage": self._max_coverage,
            "success": success,
            "contact": contact,
            "clamped": clamped,
            "n_clamped": self._n_clamped,
            "steps": self._steps,
        }
        return self._obs(), self._done, info

    def _obs(self) -> dict:
        st = self.state
        return {
            "frame": self.render(),
            "lowdim": st.pusher.astype(np.float32),
            "state": st.copy(),
        }

    def render(self) -> np.ndarray:
        return render_pusht(self.state, self.params)


def _pixel_grid() -> np.ndarray:
    h, w = IMAGE_HW
    xs = (np.arange(w) + 0.5) / w
    ys = 1.0 - (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)  # [H, W, 2]


_GRID = _pixel_grid()


def render_pusht(state: PushTState, params: PushTParams) -> np.ndarray:
    """Deterministic rasterization to float32 [3, 84, 84] in [0, 1]."""
    img = np.empty((*IMAGE_HW, 3), dtype=np.float32)
    img[:] = COLOR_BACKGROUND
    goal_mask = t_contains(_GRID, params.goal_pos, params.goal_angle)
    img[goal_mask] = COLOR_GOAL
    block_mask = t_contains(_GRID, state.block_pos, state.block_angle)
    img[block_mask] = COLOR_BLOCK
    pusher_mask = ((_GRID - state.pusher) ** 2).sum(-1) <= params.pusher_radius ** 2
    img[pusher_mask] = COLOR_PUSHER
    return img.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Reach-2D


@dataclass(frozen=True)
class ReachParams:
    speed: float = 0.05
    success_radius: float = 0.03
    max_steps: int = 40
    agent_radius: float = 0.035     # render size
    target_radius: float = 0.05     # render size
    init_low: float = 0.15
    init_high: float = 0.85
    min_separation: float = 0.25


class Reach2DEnv:
    """Move to a target that is visible only in the rendered frame."""

    name = "reach2d"
    action_dim = 2
    lowdim_dim = 2
    n_cameras = 1

    def __init__(self, params: ReachParams | None = None):
        self.params = params or ReachParams()
        self.agent = None
        self.target = None
        self._done = True
        self._steps = 0
        self._success = False
        self._n_clamped = 0

    @property
    def max_steps(self) -> int:
        return self.params.max_steps

    def reset(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        p = self.params
        while True:
            agent = rng.uniform(p.init_low, p.init_high, 2)
            target = rng.uniform(p.init_low, p.init_high, 2)
            if np.linalg.norm(agent - target) >= p.min_separation:
                break
        self.agent, self.target = agent, target
        self._done = False
        self._steps = 0
        self._success = False
        self._n_clamped = 0
        return self._obs()

    def step(self, action) -> tuple[dict, bool, dict]:
        if self._done or self.agent is None:
            raise ProtocolError("step() on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.isfinite(action).all():
            raise DomainError("non-finite action")
        clipped = np.clip(action, 0.0, 1.0)
        clamped = bool((clipped != action).any())
        if clamped:
            self._n_clamped += 1

        delta = clipped - self.agent
        dist = float(np.linalg.norm(delta))
        if dist > self.params.speed:
            delta = delta * (self.params.speed / dist)
        self.agent = np.clip(self.agent + delta, 0.0, 1.0)
        self._steps += 1
        reached = float(np.linalg.norm(self.agent - self.target)) <= self.params.success_radius
        self._success = self._success or reached
        self._done = self._success or self._steps >= self.params.max_steps
        info = {
            "distance": float(np.linalg.norm(self.agent - self.target)),
            "success": self._success,
            "clamped": clamped,
            "n_clamped": self._n_clamped,
            "steps": self._steps,
        }
        return self._obs(), self._done, info

    def _obs(self) -> dict:
        return {
            "frame": self.render(),
            "lowdim": self.agent.astype(np.float32),
            "state": {"agent": self.agent.copy(), "target": self.target.copy()},
        }

    def render(self) -> np.ndarray:
        img = np.empty((*IMAGE_HW, 3), dtype=np.float32)
        img[:] = COLOR_BACKGROUND
        tmask = ((_GRID - self.target) ** 2).sum(-1) <= self.params.target_radius ** 2
        img[tmask] = COLOR_TARGET
        amask = ((_GRID - self.agent) ** 2).sum(-1) <= self.params.agent_radius ** 2
        img[amask] = COLOR_AGENT
        return img.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Scripted experts


def reach_expert_action(state: dict, rng: np.random.Generator, noise: float = 0.005) -> np.ndarray:
    """Proportional controller: command the target position with a little jitter."""
    action = state["target"] + rng.normal(0.0, noise, 2)
    return np.clip(action, 0.0, 1.0)


@dataclass(frozen=True)
class PushTExpertParams:
    approach_gap: float = 0.02
    push_through: float = 0.08     # max surface sweep depth per engagement
    orbit_step: float = 0.5         # radians advanced per step while circling
    orbit_clearance: float = 0.03
    pos_tol: float = 0.008          # switch to rotation below this position error
    ang_tol: float = 0.04
    rot_lateral_gain: float = 0.12  # angle error -> lateral contact offset (m/rad)
    rot_lateral_max: float = 0.05
    bar_lever: float = 0.11         # rotation pushes act this far out along the bar
    noise: float = 0.004


def _ray_to_boundary(origin: np.ndarray, direction: np.ndarray, pos, angle,
                     max_dist: float = 0.6) -> np.ndarray | None:
    """First point where origin + t*direction enters the posed T-block."""
    ts = np.arange(0.0, max_dist, 0.004)
    pts = origin[None] + direction[None] * ts[:, None]
    hits = t_contains(pts, pos, angle)
    idx = np.argmax(hits)
    if not hits[idx]:
        return None
    lo = ts[max(idx - 1, 0)]
    hi = ts[idx]
    for _ in range(12):
        mid = (lo + hi) / 2
        if t_contains((origin + direction * mid)[None], pos, angle)[0]:
            hi = mid
        else:
            lo = mid
    return origin + direction * hi


def pusht_expert_action(state: PushTState, params: PushTParams,
                        rng: np.random.Generator,
                        expert: PushTExpertParams | None = None,
                        debug: dict | None = None) -> np.ndarray:
    """Greedy contact-point pusher with two phases.

    While the block is far from the goal it pushes through a boundary point
    behind the block (laterally offset so the push also twists the block
    toward the goal angle); once centered it switches to tangential pushes at
    a bar end to finish the rotation. Stateless: the contact target is
    recomputed from the current state every step.
    """
    ep = expert or PushTExpertParams()
    goal_pos = np.asarray(params.goal_pos)
    pos_err = goal_pos - state.block_pos
    ang_err = wrap_angle(params.goal_angle - state.block_angle)
    pe = float(np.linalg.norm(pos_err))

    # angle errors wreck coverage far more than small offsets, so rotation
    # takes priority unless the block is grossly misplaced
    rotate = abs(ang_err) > ep.ang_tol and (pe <= ep.pos_tol or
                                            (abs(ang_err) > 0.5 and pe < 0.2))
    # candidate push lines: (direction, lateral chord offset), best first
    candidates: list[tuple[np.ndarray, float]] = []
    u = pos_err / pe if pe > 1e-9 else np.array([1.0, 0.0])
    lateral = -float(np.clip(ep.rot_lateral_gain * ang_err, -ep.rot_lateral_max, ep.rot_lateral_max))
    if rotate:
        # tangential pushes at the bar ends, nearest end first
        rot = _rot(state.block_angle)
        ends = []
        for sx in (-1.0, 1.0):
            lever_world = rot @ np.array([sx * ep.bar_lever, float(T_BAR[:, 1].mean())])
            lhat = lever_world / max(float(np.linalg.norm(lever_world)), 1e-9)
            v = np.array([-lhat[1], lhat[0]]) * np.sign(ang_err)  # +90deg gives positive torque
            anchor = state.block_pos + lever_world
            ends.append((float(np.linalg.norm(anchor - state.pusher)), v, lever_world))
        for _, v, lever_world in sorted(ends, key=lambda e: e[0]):
            # aim the chord through the lever point: offset of that line from center
            off = float(lever_world[0] * v[1] - lever_world[1] * v[0])
            candidates.append((v, -off))
    # translation chords; when the block is pinned against a wall the straight
    # back-side slot may be unreachable, so rotated directions follow
    for off in (lateral, lateral / 2, 0.0, -lateral, 0.08, -0.08):
        candidates.append((u, off))
    for ang in (0.45, -0.45, 0.9, -0.9):
        ca, sa = math.cos(ang), math.sin(ang)
        candidates.append((np.array([ca * u[0] - sa * u[1], sa * u[0] + ca * u[1]]), 0.0))

    contact = approach = push_dir = None
    for v, off in candidates:
        perp = np.array([-v[1], v[0]])
        origin = state.block_pos - v * (T_MAX_RADIUS + 0.1) + perp * off
        cand = _ray_to_boundary(origin, v, state.block_pos, state.block_angle)
        if cand is None:
            continue
        appr = _placeable_approach(cand, v, state, params, ep)
        if contact is None:
            contact, approach, push_dir = cand, appr, v
        if _approach_reachable(cand, v, appr, state, params):
            contact, approach, push_dir = cand, appr, v
            break

    if contact is None:  # no ray hit anything (cannot happen for sane states)
        return np.clip(state.block_pos + rng.normal(0.0, ep.noise, 2), 0.0, 1.0)
    c = state.pusher

    # engaged = anywhere inside the corridor between staging point and contact
    rel = c - contact
    proj = float(np.dot(rel, -push_dir))
    lat = abs(float(push_dir[0] * rel[1] - push_dir[1] * rel[0]))
    corridor_len = float(np.linalg.norm(approach - contact)) + 0.05
    engaged = -0.03 <= proj <= corridor_len and lat < 0.04
    # block displacement tracks how far the pusher SURFACE sweeps past the
    # boundary, so command the center depth = target - radius; proportional
    # targets keep nudges from overshooting into a costly re-approach
    if rotate:
        depth = min(ep.push_through, max(0.012, 0.4 * abs(ang_err)))
    else:
        depth = min(ep.push_through, max(0.006, 0.85 * pe))
    push_through = depth - params.pusher_radius
    noise = ep.noise if pe > 0.03 else ep.noise * 0.5
    if engaged:
        action = contact + push_dir * push_through
        branch = "push"
    elif _segment_clear(c, approach, state, params):
        action = approach
        branch = "direct"
    else:
        action = _orbit_waypoint(c, approach, state, params, ep)
        branch = "orbit"
    if debug is not None:
        debug.update(branch=branch, rotate=rotate, contact=contact, approach=approach,
                     push_dir=push_dir, proj=proj, lat=lat, push_through=push_through)
    action = action + rng.normal(0.0, noise, 2)
    return np.clip(action, 0.0, 1.0)


_NAV_CLEARANCE = 0.008  # extra standoff beyond the pusher radius while navigating


def _placeable_approach(contact: np.ndarray, push_dir: np.ndarray, state: PushTState,
                        params: PushTParams, ep: PushTExpertParams) -> np.ndarray:
    """Staging point behind the contact where the pusher circle actually fits.

    Near the T's concave notch the nominal standoff can still overlap the bar,
    so the point is backed off along the push line until it clears.
    """
    verts = t_polygon_world(state.block_pos, state.block_angle)
    limit = params.pusher_radius + _NAV_CLEARANCE
    for extra in np.arange(0.0, 0.13, 0.015):
        a = contact - push_dir * (params.pusher_radius + ep.approach_gap + extra)
        a = np.clip(a, params.pusher_radius, 1.0 - params.pusher_radius)
        if t_contains(a[None], state.block_pos, state.block_angle)[0]:
            continue
        if np.linalg.norm(_closest_point_on_boundary(a, verts) - a) >= limit:
            return a
    return np.clip(contact - push_dir * (params.pusher_radius + ep.approach_gap),
                   params.pusher_radius, 1.0 - params.pusher_radius)


def _approach_reachable(contact: np.ndarray, push_dir: np.ndarray, approach: np.ndarray,
                        state: PushTState, params: PushTParams) -> bool:
    """Whether the staging point can be entered from well outside the block."""
    far = np.clip(contact - push_dir * 0.30, params.pusher_radius, 1.0 - params.pusher_radius)
    return _segment_clear(far, approach, state, params)


def _segment_clear(a: np.ndarray, b: np.ndarray, state: PushTState,
                   params: PushTParams) -> bool:
    """True when the straight pusher path a->b does not touch the block."""
    n = max(2, int(np.linalg.norm(b - a) / 0.01) + 2)
    ts = np.linspace(0.0, 1.0, n)
    pts = a[None] + (b - a)[None] * ts[:, None]
    if t_contains(pts, state.block_pos, state.block_angle).any():
        return False
    verts = t_polygon_world(state.block_pos, state.block_angle)
    limit = params.pusher_radius + _NAV_CLEARANCE
    for p in pts:
        q = _closest_point_on_boundary(p, verts)
        if np.linalg.norm(q - p) < limit:
            return False
    return True


def _arc_first_waypoint(c: np.ndarray, center: np.ndarray, radius: float,
                        phi_from: float, dphi_total: float, approach: np.ndarray,
                        state: PushTState, params: PushTParams) -> np.ndarray | None:
    """First waypoint of the circling path if the whole arc is traversable."""
    n = max(1, int(math.ceil(abs(dphi_total) / 0.35)))
    prev = c
    first = None
    for i in range(1, n + 1):
        phi = phi_from + dphi_total * i / n
        wp = center + radius * np.array([math.cos(phi), math.sin(phi)])
        wp = np.clip(wp, params.pusher_radius, 1.0 - params.pusher_radius)
        if not _segment_clear(prev, wp, state, params):
            return None
        if first is None:
            first = wp
        prev = wp
    if not _segment_clear(prev, approach, state, params):
        return None
    return first if first is not None else approach


def _orbit_waypoint(c: np.ndarray, approach: np.ndarray, state: PushTState,
                    params: PushTParams, ep: PushTExpertParams) -> np.ndarray:
    """Circle around the block toward the approach point's staging bearing.

    The whole candidate arc is collision-checked (walls can pinch off one
    side entirely), shorter way first, before widening the circle or backing
    away as a last resort.
    """
    center = state.block_pos
    radius = T_MAX_RADIUS + params.pusher_radius + ep.orbit_clearance
    phi_c = math.atan2(c[1] - center[1], c[0] - center[0])
    phi_a = math.atan2(approach[1] - center[1], approach[0] - center[0])
    dphi = wrap_angle(phi_a - phi_c)
    short = dphi if dphi != 0.0 else ep.orbit_step
    long = short - math.copysign(2.0 * math.pi, short)

    # if the pusher sits well inside the orbit circle, slide radially outward first
    r_c = float(np.linalg.norm(c - center))
    if r_c < radius - 0.03:
        out = (c - center) / max(r_c, 1e-9)
        wp = np.clip(center + out * radius, params.pusher_radius, 1.0 - params.pusher_radius)
        if _segment_clear(c, wp, state, params):
            return wp

    for r in (radius, radius * 1.25):
        for dphi_total in (short, long):
            wp = _arc_first_waypoint(c, center, r, phi_c, dphi_total, approach, state, params)
            if wp is not None:
                return wp
    # everything blocked: back straight away from the block
    away = c - center
    away = away / max(float(np.linalg.norm(away)), 1e-9)
    wp = np.clip(c + away * params.pusher_speed, params.pusher_radius, 1.0 - params.pusher_radius)
    if float(np.linalg.norm(wp - c)) > 0.25 * params.pusher_speed:
        return wp
    # pinched between block and wall: slide along the wall, away from the
    # block's bearing, until the pinch opens up
    tangent = np.array([-away[1], away[0]])
    if float(np.dot(c - center, tangent)) < 0:
        tangent = -tangent
    return np.clip(c + tangent * params.pusher_speed, params.pusher_radius, 1.0 - params.pusher_radius)


ENV_REGISTRY = {
    "pusht2d": PushT2DEnv,
    "reach2d": Reach2DEnv,
}


def make_env(task: str, **param_overrides):
    if task not in ENV_REGISTRY:
        raise DomainError(f"unknown task {task!r} (expected one of {sorted(ENV_REGISTRY)})")
    cls = ENV_REGISTRY[task]
    params_cls = PushTParams if task == "pusht2d" else ReachParams
    params = params_cls(**param_overrides) if param_overrides else None
    return cls(params)
