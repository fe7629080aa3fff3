"""Hot numeric kernels.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. The module-level names (``expm``, ``expm_grid``,
``rk4``, ``rk4_trajectory``) are bound to one or the other according to
``NVSINGLET_NUMBA``; both variants stay importable for benchmarking and for
the cross-path tests.

``expm_grid(q0, q1, scales, dt, states)`` returns
``exp((q0 + scales[k] q1) dt) @ states`` for every ``k``: a power sweep over
a generator that is affine in laser power.

``expm(a, conserve)``: when the leading ``conserve`` columns of ``a`` sum to
zero over its leading ``conserve`` rows, the exact exponential has those
column sums equal to one. Squaring doubles any roundoff in them, so after
each squaring the defect is moved onto the largest entry of the column.
This keeps probability conserved to a few ulps even with 20+ squarings.
"""

import math

import numpy as np

from ._jit import USE_NUMBA, njit

# ||A||_1 after scaling, and Taylor order. Remainder bound 0.5**17/17! ~ 2e-20.
EXPM_THETA = 0.5
EXPM_ORDER = 16


def _squarings(norm):
    if norm <= EXPM_THETA:
        return 0
    return int(math.ceil(math.log2(norm / EXPM_THETA)))


# --- numba path -------------------------------------------------------------

@njit
def _matmul_nb(a, b):
    n = a.shape[0]
    m = b.shape[1]
    kk = a.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for k in range(kk):
            aik = a[i, k]
            if aik == 0.0:
                continue
            for j in range(m):
                out[i, j] += aik * b[k, j]
    return out


@njit
def _matvec_nb(a, x):
    n = a.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(a.shape[1]):
            acc += a[i, j] * x[j]
        out[i] = acc
    return out


@njit
def _restore_columns_nb(e, conserve):
    for j in range(conserve):
        total = 0.0
        big = 0
        for i in range(conserve):
            total += e[i, j]
            if e[i, j] > e[big, j]:
                big = i
        e[big, j] += 1.0 - total


@njit
def expm_nb(a, conserve=0):
    n = a.shape[0]
    norm = 0.0
    for j in range(n):
        col = 0.0
        for i in range(n):
            col += abs(a[i, j])
        if col > norm:
            norm = col
    s = 0
    if norm > EXPM_THETA:
        s = int(math.ceil(math.log2(norm / EXPM_THETA)))
    scaled = a * (2.0 ** -s)
    e = np.eye(n)
    for k in range(EXPM_ORDER, 0, -1):
        e = _matmul_nb(scaled, e) / k
        for i in range(n):
            e[i, i] += 1.0
    _restore_columns_nb(e, conserve)
    for _ in range(s):
        e = _matmul_nb(e, e)
        _restore_columns_nb(e, conserve)
    return e


@njit
def _rk4_step_nb(q, p, h):
    k1 = _matvec_nb(q, p)
    k2 = _matvec_nb(q, p + 0.5 * h * k1)
    k3 = _matvec_nb(q, p + 0.5 * h * k2)
    k4 = _matvec_nb(q, p + h * k3)
    return p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit
def rk4_nb(q, p0, h, n_steps):
    p = p0.copy()
    for _ in range(n_steps):
        p = _rk4_step_nb(q, p, h)
    return p


@njit
def rk4_trajectory_nb(q, p0, h, n_steps):
    out = np.empty((n_steps + 1, p0.shape[0]))
    out[0] = p0
    p = p0.copy()
    for k in range(n_steps):
        p = _rk4_step_nb(q, p, h)
        out[k + 1] = p
    return out


@njit
def expm_grid_nb(q0, q1, scales, dt, states):
    out = np.empty((scales.shape[0], states.shape[0], states.shape[1]))
    for k in range(scales.shape[0]):
        e = expm_nb((q0 + scales[k] * q1) * dt, q0.shape[0])
        out[k] = _matmul_nb(e, states)
    return out


# --- numpy path -------------------------------------------------------------

def _restore_columns_np(e, conserve):
    if conserve:
        block = e[..., :conserve, :conserve]
        defect = 1.0 - block.sum(axis=-2)
        big = block.argmax(axis=-2)
        np.put_along_axis(block, big[..., None, :],
                          np.take_along_axis(block, big[..., None, :], axis=-2) + defect[..., None, :], axis=-2)
    return e


def expm_np(a, conserve=0):
    n = a.shape[0]
    s = _squarings(np.abs(a).sum(axis=0).max())
    scaled = a * (2.0 ** -s)
    eye = np.eye(n)
    e = eye.copy()
    for k in range(EXPM_ORDER, 0, -1):
        e = eye + (scaled @ e) / k
    _restore_columns_np(e, conserve)
    for _ in range(s):
        e = _restore_columns_np(e @ e, conserve)
    return e


def expm_grid_np(q0, q1, scales, dt, states):
    # Batched over the grid; every matrix gets the squaring count of the largest.
    a = (q0[None] + scales[:, None, None] * q1[None]) * dt
    s = _squarings(np.abs(a).sum(axis=1).max()) if len(scales) else 0
    a = a * (2.0 ** -s)
    eye = np.eye(q0.shape[0])
    e = np.broadcast_to(eye, a.shape).copy()
    for k in range(EXPM_ORDER, 0, -1):
        e = eye + (a @ e) / k
    n = q0.shape[0]
    _restore_columns_np(e, n)
    for _ in range(s):
        e = _restore_columns_np(e @ e, n)
    return e @ states


def _rk4_matrix(q, h):
    # One classical RK4 step of a linear system is a fixed degree-4 polynomial in h*Q.
    hq = h * q
    eye = np.eye(q.shape[0])
    return eye + hq @ (eye + hq @ (eye / 2 + hq @ (eye / 6 + hq / 24)))


def rk4_np(q, p0, h, n_steps):
    m = _rk4_matrix(q, h)
    p = p0.copy()
    for _ in range(n_steps):
        p = m @ p
    return p


def rk4_trajectory_np(q, p0, h, n_steps):
    m = _rk4_matrix(q, h)
    out = np.empty((n_steps + 1, p0.shape[0]))
    out[0] = p0
    for k in range(n_steps):
        out[k + 1] = m @ out[k]
    return out


if USE_NUMBA:
    expm, expm_grid, rk4, rk4_trajectory = expm_nb, expm_grid_nb, rk4_nb, rk4_trajectory_nb
else:
    expm, expm_grid, rk4, rk4_trajectory = expm_np, expm_grid_np, rk4_np, rk4_trajectory_np

BACKEND = "numba" if USE_NUMBA else "numpy"
