"""Compiled inner loops for the two hot paths of closed-loop simulation.

Stepping the pedestrian population and sampling GRU mixture decoders are
both long chains of tiny array operations; as plain numpy they are dominated
by per-call overhead. These kernels do the same arithmetic in explicit loops.
The public wrappers live in :mod:`capo.simworld` and
:mod:`capo.predictors.gru_gmm`; the test-suite checks them against
straightforward numpy references.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

WALKING, PAUSED, CROSSING = 0, 1, 2


@njit(cache=True)
def advance_population(
    pos, vel, mode, goal, beta, side, walk_speed, epsilon, sigma, stop_p, u, normals, geo, prm
):
    """One step for a batch of populations, arrays shaped ``(B, N, ...)``.

    ``geo`` = (dt, road_half_width, band_inner, band_outer, spawn_lo, spawn_hi)
    ``prm`` = (base_rate, direction_gain, proximity_gain, min_distance, boost,
    resume_p, short_range, goal_tol, cross_speed, avoid_radius, avoid_gain).
    Returns new (pos, vel, mode, goal, beta, side).
    """
    dt, road_hw, inner, outer, lo, hi = geo[0], geo[1], geo[2], geo[3], geo[4], geo[5]
    base, g_dir, g_prox, d_min, boost = prm[0], prm[1], prm[2], prm[3], prm[4]
    resume_p, reach, goal_tol, cross_speed = prm[5], prm[6], prm[7], prm[8]
    radius, gain = prm[9], prm[10]
    B, N = beta.shape
    n_pos = np.empty_like(pos)
    n_vel = np.empty_like(vel)
    n_mode = mode.copy()
    n_goal = goal.copy()
    n_beta = beta.copy()
    n_side = side.copy()
    for b in range(B):
        for i in range(N):
            m = mode[b, i]
            px, py = pos[b, i, 0], pos[b, i, 1]
            sd = side[b, i]
            if m == PAUSED:
                n_pos[b, i, 0], n_pos[b, i, 1] = px, py
                n_vel[b, i, 0], n_vel[b, i, 1] = 0.0, 0.0
                if u[b, i, 3] < resume_p:
                    n_mode[b, i] = WALKING
                continue
            crossing_now = m == CROSSING
            starts = False
            walks = False
            if not crossing_now:
                # walking
                bt = (1.0 - epsilon[b, i]) * beta[b, i] + normals[b, i] * sigma[b, i]
                n_beta[b, i] = bt
                vx, vy = vel[b, i, 0], vel[b, i, 1]
                speed = math.sqrt(vx * vx + vy * vy)
                cos_t = -sd * vy / speed if speed > 1e-12 else 0.0
                d = abs(py) - road_hw
                p = base * (1.0 + g_dir * max(0.0, cos_t)) * (1.0 + g_prox / max(d, d_min)) * boost
                p = min(max(p, 0.0), 1.0)
                if u[b, i, 1] < stop_p[b, i]:
                    n_mode[b, i] = PAUSED
                    n_pos[b, i, 0], n_pos[b, i, 1] = px, py
                    n_vel[b, i, 0], n_vel[b, i, 1] = 0.0, 0.0
                    continue
                if u[b, i, 2] < p:
                    starts = True
                    n_mode[b, i] = CROSSING
                else:
                    walks = True
            if walks:
                gx, gy = goal[b, i, 0], goal[b, i, 1]
                dx, dy = gx - px, gy - py
                dist = math.sqrt(dx * dx + dy * dy)
                if dist > 1e-12:
                    ux, uy = dx / dist, dy / dist
                else:
                    ux, uy = 1.0, 0.0
                along = min(dist, reach)
                tx = px + along * ux + bt * -uy
                ty = py + along * uy + bt * ux
                hx, hy = tx - px, ty - py
                hn = math.sqrt(hx * hx + hy * hy)
                if hn > 1e-12:
                    hx, hy = hx / hn, hy / hn
                else:
                    hx, hy = 0.0, 0.0
                if gain > 0 and N > 1:
                    ax, ay = 0.0, 0.0
                    for j in range(N):
                        if j == i or mode[b, j] == CROSSING:
                            continue
                        ddx = px - pos[b, j, 0]
                        ddy = py - pos[b, j, 1]
                        d2 = ddx * ddx + ddy * ddy
                        if d2 < radius * radius and d2 > 1e-18:
                            dd = math.sqrt(d2)
                            s = (radius - dd) / (radius * dd)
                            ax += s * ddx
                            ay += s * ddy
                    hx, hy = hx + gain * ax, hy + gain * ay
                    hn = math.sqrt(hx * hx + hy * hy)
                    if hn > 1e-12:
                        hx, hy = hx / hn, hy / hn
                    else:
                        hx, hy = 0.0, 0.0
                step = min(walk_speed[b, i] * dt, dist)
                nx = px + hx * step
                ny = py + hy * step
                ay_ = min(max(abs(ny), inner), outer)
                ny = ay_ if ny >= 0 else -ay_
                n_pos[b, i, 0], n_pos[b, i, 1] = nx, ny
                n_vel[b, i, 0] = (nx - px) / dt
                n_vel[b, i, 1] = (ny - py) / dt
                if abs(gx - nx) <= goal_tol:
                    n_goal[b, i, 0] = lo + (hi - lo) * u[b, i, 4]
                    n_goal[b, i, 1] = sd * (inner + (outer - inner) * u[b, i, 5])
                continue
            # crossing (continuing or just started)
            ny = py - sd * (cross_speed * dt)
            n_pos[b, i, 0], n_pos[b, i, 1] = px, ny
            n_vel[b, i, 0] = 0.0
            n_vel[b, i, 1] = -sd * cross_speed
            if starts:
                n_beta[b, i] = 0.0
            if sd * ny <= -inner:
                n_side[b, i] = -sd
                n_mode[b, i] = WALKING
                n_beta[b, i] = 0.0
                n_goal[b, i, 0] = lo + (hi - lo) * u[b, i, 4]
                n_goal[b, i, 1] = -sd * (inner + (outer - inner) * u[b, i, 5])
    return n_pos, n_vel, n_mode, n_goal, n_beta, n_side


@njit(cache=True)
def _gru_rows(h, x, Wx, Wh, bx, bh):
    """GRU update for every row of ``h (R, H)`` given inputs ``x (R, I)``."""
    H = Wh.shape[0]
    gx = np.dot(x, Wx)
    gh = np.dot(h, Wh)
    R = h.shape[0]
    out = np.empty_like(h)
    for r in range(R):
        for c in range(H):
            ar = gx[r, c] + bx[c] + (gh[r, c] + bh[c])
            az = gx[r, H + c] + bx[H + c] + (gh[r, H + c] + bh[H + c])
            rg = 1.0 / (1.0 + math.exp(-ar))
            z = 1.0 / (1.0 + math.exp(-az))
            n = math.tanh(gx[r, 2 * H + c] + bx[2 * H + c] + rg * (gh[r, 2 * H + c] + bh[2 * H + c]))
            out[r, c] = n + z * (h[r, c] - n)
    return out


@njit(cache=True)
def gru_encode(feats, Wx, Wh, bx, bh):
    """Final hidden state after running a GRU over ``feats (R, L, I)``."""
    R, L = feats.shape[0], feats.shape[1]
    h = np.zeros((R, Wh.shape[0]))
    for t in range(L):
        h = _gru_rows(h, np.ascontiguousarray(feats[:, t, :]), Wx, Wh, bx, bh)
    return h


@njit(cache=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def gmm_rollout(h0, pos0, vel0, Wx, Wh, bx, bh, W, Wskip, b, uniforms, normals, consts):
    """Autoregressive mixture sampling for rows of ``h0 (R, H)``.

    ``consts`` = (dt, vel_scale, lat_scale, min_scale, n_components).
    Returns positions ``(R, T, 2)`` with ``T = uniforms.shape[0]``.
    """
    dt, vel_scale, lat_scale, min_scale = consts[0], consts[1], consts[2], consts[3]
    M = int(consts[4])
    R = h0.shape[0]
    T = uniforms.shape[0]
    out = np.empty((R, T, 2))
    x = np.empty((R, 3))
    pos = pos0.copy()
    vel = vel0.copy()
    h = h0.copy()
    cdf = np.empty(M)
    for t in range(T):
        for r in range(R):
            x[r, 0] = vel[r, 0] * (1.0 / vel_scale)
            x[r, 1] = vel[r, 1] * (1.0 / vel_scale)
            x[r, 2] = pos[r, 1] * (1.0 / lat_scale)
        h = _gru_rows(h, x, Wx, Wh, bx, bh)
        o = np.dot(h, W) + np.dot(x, Wskip)
        for r in range(R):
            mx = o[r, 0] + b[0]
            for m in range(1, M):
                mx = max(mx, o[r, m] + b[m])
            tot = 0.0
            for m in range(M):
                tot += math.exp(o[r, m] + b[m] - mx)
                cdf[m] = tot
            idx = 0
            for m in range(M):
                if uniforms[t, r] > cdf[m] / tot:
                    idx += 1
            idx = min(idx, M - 1)
            j = M + 2 * idx
            k = 3 * M + 2 * idx
            dx = (o[r, j] + b[j]) * dt + ((_softplus(o[r, k] + b[k]) + min_scale) * dt) * normals[t, r, 0]
            dy = (o[r, j + 1] + b[j + 1]) * dt + (
                (_softplus(o[r, k + 1] + b[k + 1]) + min_scale) * dt
            ) * normals[t, r, 1]
            pos[r, 0] += dx
            pos[r, 1] += dy
            vel[r, 0] = dx * (1.0 / dt)
            vel[r, 1] = dy * (1.0 / dt)
            out[r, t, 0] = pos[r, 0]
            out[r, t, 1] = pos[r, 1]
    return out
