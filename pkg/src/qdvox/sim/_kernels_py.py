"""Pure numpy implementation of the simulation kernels.

Mirrors ``_kernels_cy.pyx`` operation for operation. It is selected when the
compiled extension is missing or ``QDVOX_PURE_PYTHON=1`` is set.
"""
import numpy as np

STATUS_OK = 0
STATUS_GOAL = 1
STATUS_BLOWUP = 2

# spring actuation modes
MODE_NONE = 0
MODE_AXIS = 1
MODE_DIAG = 2

MAX_REL_VOLUME = 4.0


def step_inplace(pos, vel, inv_mass, si, sj, rest, stiff, damp,
                 gravity, dt, friction, ground):
    """Advance positions and velocities by one semi-implicit Euler step."""
    d = pos[sj] - pos[si]
    length = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
    ux = d[:, 0] / length
    uy = d[:, 1] / length
    rv = vel[sj] - vel[si]
    mag = stiff * (length - rest) + damp * (rv[:, 0] * ux + rv[:, 1] * uy)
    force = np.zeros_like(pos)
    np.add.at(force[:, 0], si, mag * ux)
    np.add.at(force[:, 1], si, mag * uy)
    np.add.at(force[:, 0], sj, -(mag * ux))
    np.add.at(force[:, 1], sj, -(mag * uy))

    vel[:, 0] += dt * (force[:, 0] * inv_mass)
    vel[:, 1] += dt * (force[:, 1] * inv_mass - gravity)

    if ground:
        y = pos[:, 1]
        hit = y + dt * vel[:, 1] < 0.0
        if hit.any():
            vy_new = -y[hit] / dt
            dvn = vy_new - vel[hit, 1]
            vx = vel[hit, 0]
            slip = np.minimum(np.abs(vx), friction * dvn)
            vel[hit, 0] = vx - np.sign(vx) * slip
            vel[hit, 1] = vy_new

    pos += dt * vel


def voxel_features(pos, vel, corners, rest_area):
    """Relative area and corner-mean speed of every voxel."""
    p = pos[corners]  # (nv, 4, 2)
    x = p[:, :, 0]
    y = p[:, :, 1]
    area = 0.5 * (
        (x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0])
        + (x[:, 1] * y[:, 2] - x[:, 2] * y[:, 1])
        + (x[:, 2] * y[:, 3] - x[:, 3] * y[:, 2])
        + (x[:, 3] * y[:, 0] - x[:, 0] * y[:, 3])
    )
    v = vel[corners]
    mvx = 0.25 * (v[:, 0, 0] + v[:, 1, 0] + v[:, 2, 0] + v[:, 3, 0])
    mvy = 0.25 * (v[:, 0, 1] + v[:, 1, 1] + v[:, 2, 1] + v[:, 3, 1])
    return area / rest_area, np.sqrt(mvx * mvx + mvy * mvy)


def fill_observation(obs, vox_cell, vox_mat, rel_vol, speed):
    obs[:] = 0.0
    base = 6 * vox_cell
    obs[base] = rel_vol
    obs[base + 1] = speed
    obs[base + 1 + vox_mat] = 1.0


def actuate(rest, rest0, act_vox, act_mode, vox_cell, actions):
    """Scale actuated rest lengths by the per-voxel ratio in ``actions``."""
    axis = act_mode == MODE_AXIS
    diag = act_mode == MODE_DIAG
    ratio = actions[vox_cell[np.maximum(act_vox, 0)]]
    rest[:] = rest0
    rest[axis] = rest0[axis] * ratio[axis]
    rest[diag] = rest0[diag] * np.sqrt(0.5 * (ratio[diag] * ratio[diag] + 1.0))


def body_ok(pos, rel_vol):
    if not np.isfinite(pos).all():
        return False
    return bool(((rel_vol > 0.0) & (rel_vol < MAX_REL_VOLUME)).all())


def com(pos, mass, total_mass):
    return float(np.dot(mass, pos[:, 0]) / total_mass), float(np.dot(mass, pos[:, 1]) / total_mass)


def run_episode(pos, vel, inv_mass, mass, si, sj, rest0, stiff, damp,
                act_vox, act_mode, corners, vox_cell, vox_mat, rest_area,
                W1, b1, W2, b2, lo, hi, obs_noise, act_noise,
                dt, gravity, friction, ground, c_time, c_offset, goal_x, bonus,
                record, rec_obs, rec_act, traj):
    """Run one controlled episode in place.

    Returns ``(status, steps, fitness)``. When ``record`` is true the noisy
    observation and the pre-noise action of every executed step are written to
    ``rec_obs`` and ``rec_act``. ``traj`` receives the centre of mass before the
    first step and after every executed step.
    """
    n_steps = obs_noise.shape[0]
    n_in = W1.shape[1]
    total_mass = float(mass.sum())
    half = 0.5 * (hi - lo)
    mid = lo + half
    rest = rest0.copy()
    obs = np.zeros(n_in)
    present = np.zeros(n_in, dtype=bool)
    for k in range(6):
        present[6 * vox_cell + k] = True

    cx, cy = com(pos, mass, total_mass)
    traj[0, 0] = cx
    traj[0, 1] = cy
    rel_vol, speed = voxel_features(pos, vel, corners, rest_area)
    fitness = 0.0
    for t in range(n_steps):
        fill_observation(obs, vox_cell, vox_mat, rel_vol, speed)
        obs[present] += obs_noise[t, present]
        hidden = np.tanh(W1 @ obs + b1)
        act = mid + half * np.tanh(W2 @ hidden + b2)
        if record:
            rec_obs[t] = obs
            rec_act[t] = act
        act = np.clip(act + act_noise[t], lo, hi)
        actuate(rest, rest0, act_vox, act_mode, vox_cell, act)
        step_inplace(pos, vel, inv_mass, si, sj, rest, stiff, damp,
                     gravity, dt, friction, ground)
        rel_vol, speed = voxel_features(pos, vel, corners, rest_area)
        if not body_ok(pos, rel_vol):
            return STATUS_BLOWUP, t + 1, 0.0
        nx, ny = com(pos, mass, total_mass)
        fitness += (nx - cx) - c_time + c_offset
        cx = nx
        traj[t + 1, 0] = nx
        traj[t + 1, 1] = ny
        if nx >= goal_x:
            return STATUS_GOAL, t + 1, fitness + bonus
    return STATUS_OK, n_steps, fitness
