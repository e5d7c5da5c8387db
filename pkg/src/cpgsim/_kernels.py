"""Compiled numerical kernels for the 1 kHz control loop.

Everything here is numba-jitted and operates on flat float64 arrays so one
substep costs on the order of a microsecond; the batch runner fuses the ten
substeps of a policy tick into a single call. The typed, validated APIs in
the sibling modules delegate to these kernels, so unit tests exercise the
exact arithmetic the episode runner uses.

Leg order everywhere: FL, FR, HL, HR (front left, front right, hind left,
hind right). Leg/body frames: x forward, y leftward, z up.
"""

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

# Oscillator state rows (state array shape (6, 4), one column per leg).
RX, RDX, RY, RDY, TH, THD = 0, 1, 2, 3, 4, 5

# Model parameter vector layout.
(
    P_AX, P_AY, P_DT, P_MU_MIN, P_MU_MAX,
    P_D_STEP, P_H, P_GC, P_GP,
    P_HIP_OFFSET, P_L_THIGH, P_L_CALF,
    P_KP, P_KD, P_TAU_MAX, P_JOINT_INERTIA,
    P_TRANSMISSION, P_Z_TAU, P_PUSH_TAU, P_SLIP_ACC_MAX,
    P_BASE_HALF_LEN, P_BASE_HALF_WID, P_BASE_HALF_HEIGHT, P_THIGH_RADIUS,
    P_MAP_X0, P_MAP_Y0, P_MAP_RES,
) = range(27)
PAR_SIZE = 27

# Base state vector layout. TVX/TVY/WZ hold the twist extracted from the
# stance feet; VX/VY the total planar velocity (twist + push residual).
(
    B_X, B_Y, B_Z, B_YAW,
    B_TVX, B_TVY, B_WZ, B_VZ,
    B_PUSH_X, B_PUSH_Y, B_VX, B_VY,
) = range(12)
BASE_SIZE = 12

# Streaming accumulators, summed once per 1 kHz substep.
(
    A_ENERGY, A_SUM_ABS_QDD, A_SUM_POWER, A_N_SUB,
    A_SUM_ABS_WZ, A_SUM_SPEED, A_SUM_THDOT, A_SUM_RX,
) = range(8)
ACC_SIZE = 8


@njit(cache=True)
def amp_step(r, rd, mu, a, dt):
    """Advance one amplitude state (r, rdot) by dt under r'' = a(a/4(mu-r) - r').

    For a constant set point over the step the dynamics are linear and
    critically damped (double eigenvalue -a/2), so the step uses the exact
    one-step flow rather than an Euler approximation. This keeps long
    trajectories on the closed-form solution to float roundoff.
    """
    e = math.exp(-0.5 * a * dt)
    c = r - mu
    r_new = mu + e * (c * (1.0 + 0.5 * a * dt) + rd * dt)
    rd_new = e * (rd * (1.0 - 0.5 * a * dt) - (0.25 * a * a) * dt * c)
    return r_new, rd_new


@njit(cache=True)
def cpg_step(cs, mu_x, mu_y, omega_hz, w, phi, a_x, a_y, dt):
    """One 1 kHz step of the four-oscillator network, in place.

    Phase rates are evaluated on the pre-step state (simultaneous update),
    commanded frequencies are in Hz and converted to rad/s here. Phases stay
    unwrapped.
    """
    # the coupling reads only the TH/RX/RY rows, so THD can serve as scratch
    for i in range(4):
        c = 0.0
        for j in range(4):
            wij = w[i, j]
            if wij != 0.0:
                c += (cs[RX, j] + cs[RY, j]) * wij * math.sin(
                    cs[TH, j] - cs[TH, i] - phi[i, j]
                )
        cs[THD, i] = TWO_PI * omega_hz[i] + 0.5 * c
    for i in range(4):
        cs[RX, i], cs[RDX, i] = amp_step(cs[RX, i], cs[RDX, i], mu_x[i], a_x, dt)
        cs[RY, i], cs[RDY, i] = amp_step(cs[RY, i], cs[RDY, i], mu_y[i], a_y, dt)
        cs[TH, i] += cs[THD, i] * dt


@njit(cache=True)
def cpg_integrate(cs, mu_x, mu_y, omega_hz, w, phi, a_x, a_y, dt, n):
    for _ in range(n):
        cpg_step(cs, mu_x, mu_y, omega_hz, w, phi, a_x, a_y, dt)


@njit(cache=True)
def amplitude_trajectory(r0, rd0, mu, a, dt, n):
    """Record r after each of n steps of amp_step; used by convergence oracles."""
    out = np.empty(n)
    r = r0
    rd = rd0
    for k in range(n):
        r, rd = amp_step(r, rd, mu, a, dt)
        out[k] = r
    return out


@njit(cache=True)
def amplitude_signal(r, mu_min, mu_max):
    """Map an oscillator amplitude to [-1, 1] over the commanded range."""
    return 2.0 * (r - mu_min) / (mu_max - mu_min) - 1.0


@njit(cache=True)
def foot_target(r_x, r_y, theta, d_step, h, g_c, g_p, mu_min, mu_max):
    """Foot position (x, y, z) in the hip-aligned leg frame for one leg.

    The swing/stance branch is decided on the wrapped phase lying in (0, pi),
    which equals the exact-arithmetic condition sin(theta) > 0 but is robust
    where libm returns a signed epsilon at multiples of pi (the boundary
    belongs to stance).
    """
    wrapped = theta % TWO_PI
    s = math.sin(wrapped)
    c = math.cos(wrapped)
    x = -d_step * amplitude_signal(r_x, mu_min, mu_max) * c
    y = d_step * amplitude_signal(r_y, mu_min, mu_max) * c
    if 0.0 < wrapped < math.pi:
        z = -h + g_c * s
    else:
        z = -h + g_p * s
    return x, y, z


@njit(cache=True)
def is_swing(theta):
    wrapped = theta % TWO_PI
    return 0.0 < wrapped < math.pi


@njit(cache=True)
def leg_ik(x, y, z, d_off, l1, l2):
    """Closed-form 3-dof leg inverse kinematics, knee-backward branch.

    d_off is the signed abduction offset (+ for left legs). Returns
    (q_abduction, q_hip_pitch, q_knee, clamped) where clamped is 1 when the
    target lay outside the reachable annulus and was pulled to its boundary.
    """
    t = y * y + z * z - d_off * d_off
    clamped = 0
    if t < 0.0:
        if t < -1e-15:
            clamped = 1
        t = 0.0
    zp = -math.sqrt(t)
    q1 = math.atan2(z, y) - math.atan2(zp, d_off)
    if q1 > math.pi:
        q1 -= TWO_PI
    elif q1 <= -math.pi:
        q1 += TWO_PI
    rho2 = x * x + t
    rho = math.sqrt(rho2)
    rho_max = l1 + l2
    rho_min = abs(l1 - l2)
    if rho > rho_max:
        if rho > rho_max * (1.0 + 1e-9):
            clamped = 1
        if rho > 0.0:
            s = rho_max / rho
            x *= s
            zp *= s
        rho2 = rho_max * rho_max
    elif rho < rho_min:
        if rho < rho_min * (1.0 - 1e-9):
            clamped = 1
        if rho > 1e-12:
            s = rho_min / rho
            x *= s
            zp *= s
        else:
            x = 0.0
            zp = -rho_min
        rho2 = rho_min * rho_min
    ck = (rho2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if ck > 1.0:
        ck = 1.0
    elif ck < -1.0:
        ck = -1.0
    q3 = -math.acos(ck)
    q2 = math.atan2(-x, -zp) - math.atan2(l2 * math.sin(q3), l1 + l2 * math.cos(q3))
    return q1, q2, q3, clamped


@njit(cache=True)
def leg_fk(q1, q2, q3, d_off, l1, l2):
    """Forward kinematics of the 3-dof leg chain; inverse of leg_ik."""
    xp = -l1 * math.sin(q2) - l2 * math.sin(q2 + q3)
    zp = -l1 * math.cos(q2) - l2 * math.cos(q2 + q3)
    y = d_off * math.cos(q1) - zp * math.sin(q1)
    z = d_off * math.sin(q1) + zp * math.cos(q1)
    return xp, y, z


@njit(cache=True)
def height_at(heights, x0, y0, res, x, y):
    """Nearest-cell terrain height; out-of-bounds queries clamp to the edge."""
    ix = int(math.floor((x - x0) / res + 0.5))
    iy = int(math.floor((y - y0) / res + 0.5))
    nx, ny = heights.shape
    if ix < 0:
        ix = 0
    elif ix >= nx:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy >= ny:
        iy = ny - 1
    return heights[ix, iy]


@njit(cache=True)
def solve_base_twist(px, py, vx, vy, n):
    """Planar rigid twist (vbx, vby, wz) pinning n stance feet.

    Each foot at body position (px, py) moving at commanded body-frame
    velocity (vx, vy) contributes the no-slip equations

        vbx - wz*py = -vx
        vby + wz*px = -vy

    solved in least squares via the normal equations. A tiny ridge keeps the
    single-foot case solvable (it returns wz = 0 and the negated foot
    velocity).
    """
    a02 = 0.0
    a12 = 0.0
    a22 = 1e-12
    b0 = 0.0
    b1 = 0.0
    b2 = 0.0
    for k in range(n):
        a02 -= py[k]
        a12 += px[k]
        a22 += px[k] * px[k] + py[k] * py[k]
        b0 -= vx[k]
        b1 -= vy[k]
        b2 += py[k] * vx[k] - px[k] * vy[k]
    fn = float(n)
    denom = a22 - (a02 * a02 + a12 * a12) / fn
    wz = (b2 - (a02 * b0 + a12 * b1) / fn) / denom
    vbx = (b0 - a02 * wz) / fn
    vby = (b1 - a12 * wz) / fn
    return vbx, vby, wz


@njit(cache=True)
def check_collision(q, base, hips, sides, par, heights):
    """1 if the base box or any thigh capsule intersects the terrain."""
    bx = base[B_X]
    by = base[B_Y]
    bz = base[B_Z]
    cy = math.cos(base[B_YAW])
    sy = math.sin(base[B_YAW])
    x0 = par[P_MAP_X0]
    y0 = par[P_MAP_Y0]
    res = par[P_MAP_RES]

    hl = par[P_BASE_HALF_LEN]
    hw = par[P_BASE_HALF_WID]
    floor_z = bz - par[P_BASE_HALF_HEIGHT]
    for si in range(3):
        for sj in range(3):
            px = (si - 1) * hl
            py = (sj - 1) * hw
            wx = bx + cy * px - sy * py
            wy = by + sy * px + cy * py
            if height_at(heights, x0, y0, res, wx, wy) >= floor_z:
                return 1

    l1 = par[P_L_THIGH]
    r_th = par[P_THIGH_RADIUS]
    for i in range(4):
        q1 = q[3 * i]
        q2 = q[3 * i + 1]
        d_off = sides[i] * par[P_HIP_OFFSET]
        # thigh segment endpoints in the leg frame: abduction link tip -> knee
        sx0 = 0.0
        sy0 = d_off * math.cos(q1)
        sz0 = d_off * math.sin(q1)
        zpk = -l1 * math.cos(q2)
        sx1 = -l1 * math.sin(q2)
        sy1 = d_off * math.cos(q1) - zpk * math.sin(q1)
        sz1 = d_off * math.sin(q1) + zpk * math.cos(q1)
        for sidx in range(3):
            f = (sidx + 1) / 3.0
            lx = hips[i, 0] + sx0 + (sx1 - sx0) * f
            ly = hips[i, 1] + sy0 + (sy1 - sy0) * f
            lz = sz0 + (sz1 - sz0) * f
            wx = bx + cy * lx - sy * ly
            wy = by + sy * lx + cy * ly
            if height_at(heights, x0, y0, res, wx, wy) >= bz + lz - r_th:
                return 1
    return 0


@njit(cache=True)
def run_substeps(n_sub, cs, q, qd, base, acc, contacts,
                 mu_x, mu_y, omega_hz, w, phi, hips, sides, par, heights):
    """Advance the full robot model n_sub 1 kHz substeps under one command.

    Mutates the oscillator state cs, joint state (q, qd), base state and the
    streaming accumulators in place, leaves the latest stance flags in
    contacts, and returns 1 if the post-step pose collides with the terrain.

    Per substep: oscillators advance, foot targets map through inverse
    kinematics to joint set points tracked by a torque-limited PD with a
    second-order joint response, and the base follows the least-squares
    planar twist that pins the stance feet, scaled by the stance transmission
    factor. With no stance feet the previous twist is held.
    """
    dt = par[P_DT]
    kp = par[P_KP]
    kd = par[P_KD]
    tau_max = par[P_TAU_MAX]
    inv_inertia = 1.0 / par[P_JOINT_INERTIA]
    push_decay = math.exp(-dt / par[P_PUSH_TAU])
    kappa = par[P_TRANSMISSION]
    dv_max = par[P_SLIP_ACC_MAX] * dt

    qdes = np.empty(12)
    old_t = np.empty((4, 2))
    spx = np.empty(4)
    spy = np.empty(4)
    svx = np.empty(4)
    svy = np.empty(4)

    for _ in range(n_sub):
        # foot targets of the pre-step state anchor the sweep velocities
        for i in range(4):
            tx, ty, _tz = foot_target(
                cs[RX, i], cs[RY, i], cs[TH, i],
                par[P_D_STEP], par[P_H], par[P_GC], par[P_GP],
                par[P_MU_MIN], par[P_MU_MAX],
            )
            old_t[i, 0] = tx
            old_t[i, 1] = ty

        cpg_step(cs, mu_x, mu_y, omega_hz, w, phi, par[P_AX], par[P_AY], dt)

        cyaw = math.cos(base[B_YAW])
        syaw = math.sin(base[B_YAW])
        n_st = 0
        z_tgt_sum = 0.0
        for i in range(4):
            tx, ty, tz = foot_target(
                cs[RX, i], cs[RY, i], cs[TH, i],
                par[P_D_STEP], par[P_H], par[P_GC], par[P_GP],
                par[P_MU_MIN], par[P_MU_MAX],
            )
            d_off = sides[i] * par[P_HIP_OFFSET]
            q1, q2, q3, _cl = leg_ik(tx, ty, tz, d_off, par[P_L_THIGH], par[P_L_CALF])
            qdes[3 * i] = q1
            qdes[3 * i + 1] = q2
            qdes[3 * i + 2] = q3

            fx = hips[i, 0] + tx
            fy = hips[i, 1] + d_off + ty
            if is_swing(cs[TH, i]):
                contacts[i] = 0.0
            else:
                contacts[i] = 1.0
                spx[n_st] = fx
                spy[n_st] = fy
                svx[n_st] = (tx - old_t[i, 0]) / dt
                svy[n_st] = (ty - old_t[i, 1]) / dt
                wx = base[B_X] + cyaw * fx - syaw * fy
                wy = base[B_Y] + syaw * fx + cyaw * fy
                z_tgt_sum += height_at(
                    heights, par[P_MAP_X0], par[P_MAP_Y0], par[P_MAP_RES], wx, wy
                ) - tz
                n_st += 1

        p_sub = 0.0
        qdd_abs = 0.0
        for k in range(12):
            tau = kp * (qdes[k] - q[k]) - kd * qd[k]
            if tau > tau_max:
                tau = tau_max
            elif tau < -tau_max:
                tau = -tau_max
            qdd = tau * inv_inertia
            qd[k] += qdd * dt
            q[k] += qd[k] * dt
            p_sub += abs(tau * qd[k])
            qdd_abs += abs(qdd)
        acc[A_ENERGY] += p_sub * dt
        acc[A_SUM_POWER] += p_sub
        acc[A_SUM_ABS_QDD] += qdd_abs / 12.0

        if n_st > 0:
            tvx, tvy, twz = solve_base_twist(spx, spy, svx, svy, n_st)
            base[B_TVX] = kappa * tvx
            base[B_TVY] = kappa * tvy
            base[B_WZ] = kappa * twz

        base[B_PUSH_X] *= push_decay
        base[B_PUSH_Y] *= push_decay
        vx_new = base[B_TVX] + base[B_PUSH_X]
        vy_new = base[B_TVY] + base[B_PUSH_Y]
        dvx = vx_new - base[B_VX]
        dvy = vy_new - base[B_VY]
        dv = math.hypot(dvx, dvy)
        if dv > dv_max:
            s = dv_max / dv
            vx_new = base[B_VX] + dvx * s
            vy_new = base[B_VY] + dvy * s
        base[B_VX] = vx_new
        base[B_VY] = vy_new

        base[B_X] += (cyaw * vx_new - syaw * vy_new) * dt
        base[B_Y] += (syaw * vx_new + cyaw * vy_new) * dt
        yaw = base[B_YAW] + base[B_WZ] * dt
        if yaw > math.pi:
            yaw -= TWO_PI
        elif yaw <= -math.pi:
            yaw += TWO_PI
        base[B_YAW] = yaw

        if n_st > 0:
            z_tgt = z_tgt_sum / n_st
            vz = (z_tgt - base[B_Z]) / par[P_Z_TAU]
            base[B_VZ] = vz
            base[B_Z] += vz * dt
        else:
            base[B_VZ] = 0.0

        acc[A_N_SUB] += 1.0
        acc[A_SUM_ABS_WZ] += abs(base[B_WZ])
        acc[A_SUM_SPEED] += math.hypot(vx_new, vy_new)
        acc[A_SUM_THDOT] += 0.25 * (cs[THD, 0] + cs[THD, 1] + cs[THD, 2] + cs[THD, 3])
        acc[A_SUM_RX] += 0.25 * (cs[RX, 0] + cs[RX, 1] + cs[RX, 2] + cs[RX, 3])

    return check_collision(q, base, hips, sides, par, heights)
