# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulation kernels.

Same contract as ``_kernels_py``; every function here has a numpy twin there.
"""
from libc.math cimport sqrt, tanh, fabs, isfinite

import numpy as np

cdef int STATUS_OK = 0
cdef int STATUS_GOAL = 1
cdef int STATUS_BLOWUP = 2
cdef int MODE_AXIS = 1
cdef int MODE_DIAG = 2
cdef double MAX_REL_VOLUME = 4.0


cdef void _step(double[:, ::1] pos, double[:, ::1] vel, const double[::1] inv_mass,
                const long[::1] si, const long[::1] sj, const double[::1] rest,
                const double[::1] stiff, const double[::1] damp,
                double[:, ::1] force, double gravity, double dt, double friction,
                bint ground) noexcept nogil:
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t ns = si.shape[0]
    cdef Py_ssize_t s, i, j, p
    cdef double dx, dy, length, ux, uy, mag, fx, fy, y, vy_new, dvn, vx, slip

    for p in range(n):
        force[p, 0] = 0.0
        force[p, 1] = 0.0
    # two passes so the accumulation order matches np.add.at in the fallback
    for s in range(ns):
        i = si[s]
        j = sj[s]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        length = sqrt(dx * dx + dy * dy)
        ux = dx / length
        uy = dy / length
        mag = stiff[s] * (length - rest[s]) + damp[s] * (
            (vel[j, 0] - vel[i, 0]) * ux + (vel[j, 1] - vel[i, 1]) * uy)
        force[i, 0] += mag * ux
        force[i, 1] += mag * uy
    for s in range(ns):
        i = si[s]
        j = sj[s]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        length = sqrt(dx * dx + dy * dy)
        ux = dx / length
        uy = dy / length
        mag = stiff[s] * (length - rest[s]) + damp[s] * (
            (vel[j, 0] - vel[i, 0]) * ux + (vel[j, 1] - vel[i, 1]) * uy)
        force[j, 0] += -(mag * ux)
        force[j, 1] += -(mag * uy)

    for p in range(n):
        vel[p, 0] += dt * (force[p, 0] * inv_mass[p])
        vel[p, 1] += dt * (force[p, 1] * inv_mass[p] - gravity)
        if ground:
            y = pos[p, 1]
            if y + dt * vel[p, 1] < 0.0:
                vy_new = -y / dt
                dvn = vy_new - vel[p, 1]
                vx = vel[p, 0]
                slip = fabs(vx)
                if friction * dvn < slip:
                    slip = friction * dvn
                if vx > 0.0:
                    vel[p, 0] = vx - slip
                elif vx < 0.0:
                    vel[p, 0] = vx + slip
                vel[p, 1] = vy_new
        pos[p, 0] += dt * vel[p, 0]
        pos[p, 1] += dt * vel[p, 1]


cdef bint _features(const double[:, ::1] pos, const double[:, ::1] vel,
                    const long[:, ::1] corners, const double[::1] rest_area,
                    double[::1] rel_vol, double[::1] speed) noexcept nogil:
    """Fill voxel features; return False on inversion or over-expansion."""
    cdef Py_ssize_t nv = corners.shape[0]
    cdef Py_ssize_t v
    cdef long a, b, c, d
    cdef double area, mvx, mvy
    cdef bint ok = True
    for v in range(nv):
        a = corners[v, 0]
        b = corners[v, 1]
        c = corners[v, 2]
        d = corners[v, 3]
        area = 0.5 * (
            (pos[a, 0] * pos[b, 1] - pos[b, 0] * pos[a, 1])
            + (pos[b, 0] * pos[c, 1] - pos[c, 0] * pos[b, 1])
            + (pos[c, 0] * pos[d, 1] - pos[d, 0] * pos[c, 1])
            + (pos[d, 0] * pos[a, 1] - pos[a, 0] * pos[d, 1]))
        rel_vol[v] = area / rest_area[v]
        mvx = 0.25 * (vel[a, 0] + vel[b, 0] + vel[c, 0] + vel[d, 0])
        mvy = 0.25 * (vel[a, 1] + vel[b, 1] + vel[c, 1] + vel[d, 1])
        speed[v] = sqrt(mvx * mvx + mvy * mvy)
        if not (rel_vol[v] > 0.0 and rel_vol[v] < MAX_REL_VOLUME):
            ok = False
    return ok


def step_inplace(double[:, ::1] pos, double[:, ::1] vel, const double[::1] inv_mass,
                 const long[::1] si, const long[::1] sj, const double[::1] rest,
                 const double[::1] stiff, const double[::1] damp,
                 double gravity, double dt, double friction, bint ground):
    """Advance positions and velocities by one semi-implicit Euler step."""
    cdef double[:, ::1] force = np.zeros((pos.shape[0], 2))
    with nogil:
        _step(pos, vel, inv_mass, si, sj, rest, stiff, damp, force,
              gravity, dt, friction, ground)


def voxel_features(const double[:, ::1] pos, const double[:, ::1] vel,
                   const long[:, ::1] corners, const double[::1] rest_area):
    """Relative area and corner-mean speed of every voxel."""
    rel = np.empty(corners.shape[0])
    spd = np.empty(corners.shape[0])
    cdef double[::1] rel_v = rel
    cdef double[::1] spd_v = spd
    _features(pos, vel, corners, rest_area, rel_v, spd_v)
    return rel, spd


def run_episode(double[:, ::1] pos, double[:, ::1] vel, const double[::1] inv_mass,
                const double[::1] mass, const long[::1] si, const long[::1] sj,
                const double[::1] rest0, const double[::1] stiff, const double[::1] damp,
                const long[::1] act_vox, const signed char[::1] act_mode,
                const long[:, ::1] corners, const long[::1] vox_cell,
                const long[::1] vox_mat, const double[::1] rest_area,
                const double[:, ::1] W1, const double[::1] b1,
                const double[:, ::1] W2, const double[::1] b2,
                double lo, double hi,
                const double[:, ::1] obs_noise, const double[:, ::1] act_noise,
                double dt, double gravity, double friction, bint ground,
                double c_time, double c_offset, double goal_x, double bonus,
                bint record, double[:, ::1] rec_obs, double[:, ::1] rec_act,
                double[:, ::1] traj):
    """Run one controlled episode in place; returns ``(status, steps, fitness)``."""
    cdef Py_ssize_t n_steps = obs_noise.shape[0]
    cdef Py_ssize_t n_in = W1.shape[1]
    cdef Py_ssize_t n_hid = W1.shape[0]
    cdef Py_ssize_t n_out = W2.shape[0]
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t nv = corners.shape[0]
    cdef Py_ssize_t ns = si.shape[0]
    cdef Py_ssize_t t, p, v, k, h, o, s, base
    cdef double total_mass = 0.0
    cdef double half = 0.5 * (hi - lo)
    cdef double mid = lo + half
    cdef double cx = 0.0, cy = 0.0, nx, ny, acc, ratio, a
    cdef double fitness = 0.0
    cdef int status = STATUS_OK
    cdef Py_ssize_t done = n_steps

    cdef double[::1] rest = np.array(rest0, dtype=np.float64)
    cdef double[::1] obs = np.zeros(n_in)
    cdef double[::1] hidden = np.zeros(n_hid)
    cdef double[::1] act = np.zeros(n_out)
    cdef double[::1] rel_vol = np.zeros(nv)
    cdef double[::1] speed = np.zeros(nv)
    cdef double[:, ::1] force = np.zeros((n, 2))

    with nogil:
        for p in range(n):
            total_mass += mass[p]
        for p in range(n):
            cx += mass[p] * pos[p, 0]
        for p in range(n):
            cy += mass[p] * pos[p, 1]
        cx = cx / total_mass
        cy = cy / total_mass
        traj[0, 0] = cx
        traj[0, 1] = cy
        _features(pos, vel, corners, rest_area, rel_vol, speed)

        for t in range(n_steps):
            for k in range(n_in):
                obs[k] = 0.0
            for v in range(nv):
                base = 6 * vox_cell[v]
                obs[base] = rel_vol[v]
                obs[base + 1] = speed[v]
                obs[base + 1 + vox_mat[v]] = 1.0
                for k in range(6):
                    obs[base + k] += obs_noise[t, base + k]

            for h in range(n_hid):
                acc = 0.0
                for k in range(n_in):
                    acc += W1[h, k] * obs[k]
                hidden[h] = tanh(acc + b1[h])
            for o in range(n_out):
                acc = 0.0
                for h in range(n_hid):
                    acc += W2[o, h] * hidden[h]
                act[o] = mid + half * tanh(acc + b2[o])

            if record:
                for k in range(n_in):
                    rec_obs[t, k] = obs[k]
                for o in range(n_out):
                    rec_act[t, o] = act[o]

            for o in range(n_out):
                a = act[o] + act_noise[t, o]
                if a < lo:
                    a = lo
                elif a > hi:
                    a = hi
                act[o] = a

            for s in range(ns):
                if act_mode[s] == MODE_AXIS:
                    rest[s] = rest0[s] * act[vox_cell[act_vox[s]]]
                elif act_mode[s] == MODE_DIAG:
                    ratio = act[vox_cell[act_vox[s]]]
                    rest[s] = rest0[s] * sqrt(0.5 * (ratio * ratio + 1.0))
                else:
                    rest[s] = rest0[s]

            _step(pos, vel, inv_mass, si, sj, rest, stiff, damp, force,
                  gravity, dt, friction, ground)

            if not _features(pos, vel, corners, rest_area, rel_vol, speed):
                status = STATUS_BLOWUP
            for p in range(n):
                if not (isfinite(pos[p, 0]) and isfinite(pos[p, 1])):
                    status = STATUS_BLOWUP
            if status == STATUS_BLOWUP:
                done = t + 1
                fitness = 0.0
                break

            nx = 0.0
            ny = 0.0
            for p in range(n):
                nx += mass[p] * pos[p, 0]
            for p in range(n):
                ny += mass[p] * pos[p, 1]
            nx = nx / total_mass
            ny = ny / total_mass
            fitness += (nx - cx) - c_time + c_offset
            cx = nx
            traj[t + 1, 0] = nx
            traj[t + 1, 1] = ny
            if nx >= goal_x:
                status = STATUS_GOAL
                fitness += bonus
                done = t + 1
                break

    return status, done, fitness
