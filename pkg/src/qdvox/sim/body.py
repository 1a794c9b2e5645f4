"""Voxel lattice construction, stepping, observation and episode rollout."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import materials as mat
from ..errors import EmptyMorphology, NumericBlowup
from . import kernels as _default_kernels

N_FEATURES = 6


@dataclass(frozen=True)
class TaskConfig:
    """Physics constants and the reward shape of the walking task.

    Lengths are in voxel units and times in seconds. ``gravity`` is a
    magnitude pointing in -y.
    """

    dt: float = 0.005
    episode_steps: int = 200
    gravity: float = 9.8
    ground_friction: float = 0.6
    ground_contact: bool = True
    goal_x: float = 20.0
    c_time: float = 0.01
    c_offset: float = 0.02
    goal_bonus: float = 1.0
    actuation_range: tuple = (0.6, 1.6)
    voxel_mass: float = 1.0
    edge_stiffness: float = 400.0
    diag_stiffness: float = 200.0
    soft_scale: float = 0.5
    rigid_scale: float = 2.0
    damping: float = 0.4

    def __post_init__(self):
        lo, hi = self.actuation_range
        object.__setattr__(self, "actuation_range", (float(lo), float(hi)))
        if not lo < 1.0 < hi:
            raise ValueError(f"actuation_range must straddle 1.0, got {self.actuation_range}")
        if not self.c_offset > self.c_time:
            raise ValueError("c_offset must exceed c_time")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def replace(self, **changes) -> "TaskConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SoftBody:
    """Point masses, springs and the voxel-to-corner map of one robot.

    ``rest0`` holds unactuated rest lengths; ``rest`` the lengths in force for
    the current step. ``act_vox`` is -1 for springs no voxel actuates.
    ``corners`` lists each voxel's corners counter-clockwise starting
    bottom-left.
    """

    width: int
    height: int
    pos: np.ndarray
    vel: np.ndarray
    mass: np.ndarray
    si: np.ndarray
    sj: np.ndarray
    rest0: np.ndarray
    rest: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    act_vox: np.ndarray
    act_mode: np.ndarray
    corners: np.ndarray
    vox_cell: np.ndarray
    vox_mat: np.ndarray
    rest_area: np.ndarray
    lattice: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return len(self.mass)

    @property
    def n_springs(self) -> int:
        return len(self.si)

    @property
    def inv_mass(self) -> np.ndarray:
        return 1.0 / self.mass

    def com(self) -> np.ndarray:
        return self.mass @ self.pos / self.mass.sum()

    def momentum(self) -> np.ndarray:
        return self.mass @ self.vel

    def copy(self) -> "SoftBody":
        return dataclasses.replace(
            self,
            **{f.name: getattr(self, f.name).copy()
               for f in dataclasses.fields(self)
               if isinstance(getattr(self, f.name), np.ndarray)},
        )


def _material_scale(material: int, cfg: TaskConfig) -> float:
    if material == mat.PASSIVE_SOFT:
        return cfg.soft_scale
    if material == mat.PASSIVE_RIGID:
        return cfg.rigid_scale
    return 1.0


def _grid_of(morphology) -> np.ndarray:
    return np.asarray(getattr(morphology, "grid", morphology))


def build_body(morphology, cfg: Optional[TaskConfig] = None) -> SoftBody:
    """Build the corner-shared mass-spring lattice for a voxel grid.

    Grid row 0 is the top of the robot. The body is placed with its lowest
    voxel row resting on y = 0 and its leftmost voxel column at x = 0.
    """
    cfg = cfg or TaskConfig()
    grid = _grid_of(morphology)
    height, width = grid.shape
    cells = [(r, c) for r in range(height) for c in range(width) if grid[r, c] != mat.EMPTY]
    if not cells:
        raise EmptyMorphology("morphology has no voxels")
    min_c = min(c for _, c in cells)
    max_r = max(r for r, _ in cells)

    lattice: dict = {}
    masses: list = []
    positions: list = []

    def point(pr, pc):
        key = (pr, pc)
        if key not in lattice:
            lattice[key] = len(masses)
            masses.append(0.0)
            positions.append((float(pc - min_c), float(max_r + 1 - pr)))
        return lattice[key]

    corners = []
    for r, c in cells:
        bl, br, tr, tl = point(r + 1, c), point(r + 1, c + 1), point(r, c + 1), point(r, c)
        quad = (bl, br, tr, tl)
        for p in quad:
            masses[p] += cfg.voxel_mass / 4.0
        corners.append(quad)

    # edge springs may be shared by two voxels; diagonals never are
    edges: dict = {}
    springs = []  # (i, j, rest, k, act_vox, mode)
    for v, (r, c) in enumerate(cells):
        material = int(grid[r, c])
        scale = _material_scale(material, cfg)
        bl, br, tr, tl = corners[v]
        for a, b, horizontal in ((bl, br, True), (br, tr, False), (tl, tr, True), (bl, tl, False)):
            key = (min(a, b), max(a, b))
            along = (material == mat.ACTIVE_H and horizontal) or (material == mat.ACTIVE_V and not horizontal)
            if key in edges:
                idx = edges[key]
                i, j, rest, k, act, mode = springs[idx]
                k = 0.5 * (k + cfg.edge_stiffness * scale)
                if act < 0 and along:
                    act, mode = v, 1
                springs[idx] = (i, j, rest, k, act, mode)
            else:
                edges[key] = len(springs)
                springs.append((key[0], key[1], 1.0, cfg.edge_stiffness * scale,
                                v if along else -1, 1 if along else 0))
        active = material in mat.ACTIVE
        for a, b in ((bl, tr), (br, tl)):
            springs.append((a, b, np.sqrt(2.0), cfg.diag_stiffness * scale,
                            v if active else -1, 2 if active else 0))

    mass = np.array(masses)
    si = np.array([s[0] for s in springs], dtype=np.int64)
    sj = np.array([s[1] for s in springs], dtype=np.int64)
    stiffness = np.array([s[3] for s in springs])
    # damping is a ratio of critical damping for the spring's reduced mass
    reduced = mass[si] * mass[sj] / (mass[si] + mass[sj])
    damping = cfg.damping * 2.0 * np.sqrt(stiffness * reduced)
    rest0 = np.array([s[2] for s in springs])
    return SoftBody(
        width=width,
        height=height,
        pos=np.array(positions),
        vel=np.zeros((len(masses), 2)),
        mass=mass,
        si=si,
        sj=sj,
        rest0=rest0,
        rest=rest0.copy(),
        stiffness=stiffness,
        damping=damping,
        act_vox=np.array([s[4] for s in springs], dtype=np.int64),
        act_mode=np.array([s[5] for s in springs], dtype=np.int8),
        corners=np.array(corners, dtype=np.int64),
        vox_cell=np.array([r * width + c for r, c in cells], dtype=np.int64),
        vox_mat=np.array([int(grid[r, c]) for r, c in cells], dtype=np.int64),
        rest_area=np.ones(len(cells)),
        lattice=lattice,
    )


def step(body: SoftBody, actions, cfg: TaskConfig, kernels=None) -> SoftBody:
    """Return the body advanced by one step under per-cell actuation ratios.

    ``actions`` has one entry per bounding-box cell; entries of cells without
    an active voxel are ignored. ``None`` leaves every rest length unactuated.
    """
    kernels = kernels or _default_kernels
    out = body.copy()
    lo, hi = cfg.actuation_range
    if actions is None:
        out.rest[:] = out.rest0
    else:
        actions = np.clip(np.asarray(actions, dtype=np.float64), lo, hi)
        if actions.shape != (body.width * body.height,):
            raise ValueError(f"expected {body.width * body.height} actions, got {actions.shape}")
        _apply_actuation(out, actions)
    kernels.step_inplace(out.pos, out.vel, out.inv_mass, out.si, out.sj, out.rest,
                         out.stiffness, out.damping, cfg.gravity, cfg.dt,
                         cfg.ground_friction, cfg.ground_contact)
    rel_vol, _ = kernels.voxel_features(out.pos, out.vel, out.corners, out.rest_area)
    if not np.isfinite(out.pos).all() or not ((rel_vol > 0) & (rel_vol < 4.0)).all():
        raise NumericBlowup("non-finite coordinates or inverted voxel")
    return out


def _apply_actuation(body: SoftBody, actions: np.ndarray) -> None:
    ratio = actions[body.vox_cell[np.maximum(body.act_vox, 0)]]
    body.rest[:] = body.rest0
    axis = body.act_mode == 1
    diag = body.act_mode == 2
    body.rest[axis] = body.rest0[axis] * ratio[axis]
    body.rest[diag] = body.rest0[diag] * np.sqrt(0.5 * (ratio[diag] ** 2 + 1.0))


def observe(body: SoftBody, kernels=None) -> np.ndarray:
    """Noise-free observation: 6 features per bounding-box cell, zero where absent.

    Per voxel: relative area, corner-mean speed, one-hot over the 4 materials.
    """
    kernels = kernels or _default_kernels
    rel_vol, speed = kernels.voxel_features(body.pos, body.vel, body.corners, body.rest_area)
    obs = np.zeros(body.width * body.height * N_FEATURES)
    base = N_FEATURES * body.vox_cell
    obs[base] = rel_vol
    obs[base + 1] = speed
    obs[base + 1 + body.vox_mat] = 1.0
    return obs


def reward_step(x_before: float, x_after: float, cfg: TaskConfig) -> float:
    return (x_after - x_before) - cfg.c_time + cfg.c_offset


@dataclass
class RolloutResult:
    fitness: float
    trajectory: np.ndarray
    status: str
    steps: int
    observations: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None


_STATUS = {0: "ok", 1: "goal", 2: "blowup"}


def rollout(morphology, params, seed, cfg: Optional[TaskConfig] = None,
            obs_sigma: float = 0.01, act_sigma: float = 0.01,
            record: bool = False, kernels=None) -> RolloutResult:
    """Simulate one noisy episode of ``params`` driving ``morphology``.

    ``morphology`` may also be a prebuilt :class:`SoftBody` (copied, never
    modified) so repeated evaluations skip lattice construction.

    Observation and action noise are drawn per step from a generator seeded
    with ``seed``. A numerically unstable episode scores 0 with status
    ``"blowup"``; recorded rows then stop at the failing step.
    """
    cfg = cfg or TaskConfig()
    kernels = kernels or _default_kernels
    if isinstance(morphology, SoftBody):
        body = morphology.copy()
    else:
        body = build_body(morphology, cfg)
    n_cells = body.width * body.height
    n_in = n_cells * N_FEATURES
    W1 = np.ascontiguousarray(params.W1, dtype=np.float64)
    W2 = np.ascontiguousarray(params.W2, dtype=np.float64)
    if W1.shape[1] != n_in or W2.shape[0] != n_cells:
        raise ValueError(f"controller dims {W1.shape[1]}->{W2.shape[0]} do not fit a "
                         f"{body.width}x{body.height} box")
    steps = cfg.episode_steps
    rng = np.random.default_rng(seed)
    obs_noise = rng.normal(0.0, obs_sigma, (steps, n_in)) if obs_sigma > 0 else np.zeros((steps, n_in))
    act_noise = rng.normal(0.0, act_sigma, (steps, n_cells)) if act_sigma > 0 else np.zeros((steps, n_cells))
    rec_obs = np.zeros((steps if record else 0, n_in))
    rec_act = np.zeros((steps if record else 0, n_cells))
    traj = np.full((steps + 1, 2), np.nan)
    lo, hi = cfg.actuation_range
    status, done, fitness = kernels.run_episode(
        body.pos, body.vel, body.inv_mass, body.mass, body.si, body.sj, body.rest0,
        body.stiffness, body.damping, body.act_vox, body.act_mode, body.corners,
        body.vox_cell, body.vox_mat, body.rest_area,
        W1, np.ascontiguousarray(params.b1, dtype=np.float64),
        W2, np.ascontiguousarray(params.b2, dtype=np.float64),
        lo, hi, obs_noise, act_noise,
        cfg.dt, cfg.gravity, cfg.ground_friction, cfg.ground_contact,
        cfg.c_time, cfg.c_offset, cfg.goal_x, cfg.goal_bonus,
        record, rec_obs, rec_act, traj,
    )
    status = _STATUS[status]
    keep = done + 1 if status != "blowup" else done
    return RolloutResult(
        fitness=float(fitness),
        trajectory=traj[:keep],
        status=status,
        steps=int(done),
        observations=rec_obs[:done] if record else None,
        actions=rec_act[:done] if record else None,
    )


def write_trajectory_csv(path, trajectory: np.ndarray, header: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "com_x", "com_y"])
        for i, (x, y) in enumerate(trajectory):
            writer.writerow([i, repr(float(x)), repr(float(y))])
