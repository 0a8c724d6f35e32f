"""Compiled inner loop for phase 2.

The per-transition update touches six small networks several times; in
plain numpy most of the time goes to Python call overhead. These kernels
perform the same four-stage update (goal weights, successor features,
advantage, policy) on the flat parameter vectors of a standard
:class:`~usrlab.models.UsrModel` in one call, with Adam fused into the
gradient computation. ``tests/test_kernels.py`` checks them against the
layer-by-layer reference path in :mod:`usrlab.agent`.

Flat layouts (row-major, as produced by :class:`~usrlab.nn.Net`):
trunk ``W1 (H, 2n) | b1 (H) | W2 (H, H) | b2 (H)``; each head and the goal
network ``W (out, in) | b (out)``.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .nn import ADAM_TINY

_JIT = {"cache": True, "fastmath": True, "error_model": "numpy"}
TINY = ADAM_TINY

# indices into the Adam step-counter array
T_W, T_PSI_HEAD, T_PSI_TRUNK, T_PI_HEAD, T_PI_TRUNK = range(5)


@numba.njit(**_JIT)
def _nonzero(x):
    idx = np.empty(x.size, np.int64)
    n = 0
    for j in range(x.size):
        if x[j] != 0.0:
            idx[n] = j
            n += 1
    return idx[:n]


@numba.njit(**_JIT)
def _trunk_forward(tp, x, H, z1, h1, z2, h2):
    n_in = x.size
    nz = _nonzero(x)
    o_b1 = H * n_in
    o_w2 = o_b1 + H
    o_b2 = o_w2 + H * H
    for i in range(H):
        acc = tp[o_b1 + i]
        row = i * n_in
        for k in range(nz.size):
            acc += tp[row + nz[k]] * x[nz[k]]
        z1[i] = acc
        h1[i] = max(0.0, acc)
    for i in range(H):
        acc = tp[o_b2 + i]
        row = o_w2 + i * H
        for j in range(H):
            acc += tp[row + j] * h1[j]
        z2[i] = acc
        h2[i] = max(0.0, acc)


@numba.njit(**_JIT)
def _affine(p, x, n_out, out):
    n_in = x.size
    nz = _nonzero(x)
    o_b = n_out * n_in
    for i in range(n_out):
        acc = p[o_b + i]
        row = i * n_in
        for k in range(nz.size):
            acc += p[row + nz[k]] * x[nz[k]]
        out[i] = acc


@numba.njit(**_JIT)
def _input_grad(p, up, n_in, out):
    # out = W^T up for W (up.size, n_in) at the start of p
    for j in range(n_in):
        out[j] = 0.0
    for i in range(up.size):
        ui = up[i]
        row = i * n_in
        for j in range(n_in):
            out[j] += p[row + j] * ui


@numba.njit(**_JIT)
def _adam_row(p, m, v, ui, x, a, b, b1, b2, eps):
    # p, m, v are views of one weight row; unit-stride loop so it vectorizes
    for j in range(x.size):
        g = ui * x[j]
        mi = b1 * m[j] + (1.0 - b1) * g
        vi = b2 * v[j] + (1.0 - b2) * g * g
        mi = mi if abs(mi) > TINY else 0.0
        vi = vi if vi > TINY else 0.0
        m[j] = mi
        v[j] = vi
        p[j] -= a * mi / (math.sqrt(vi) * b + eps)


@numba.njit(**_JIT)
def _adam_affine(p, m, v, off, u, x, lr, t, b1, b2, eps):
    """Adam on W (u.size, x.size) and b at ``off`` with gradient outer(u, x) and u."""
    a = lr / (1.0 - b1**t)
    b = 1.0 / math.sqrt(1.0 - b2**t)
    n_in = x.size
    for i in range(u.size):
        lo = off + i * n_in
        _adam_row(p[lo:lo + n_in], m[lo:lo + n_in], v[lo:lo + n_in], u[i], x, a, b, b1, b2, eps)
    ob = off + u.size * n_in
    _adam_row(p[ob:ob + u.size], m[ob:ob + u.size], v[ob:ob + u.size], 1.0, u, a, b, b1, b2, eps)
    return ob + u.size


@numba.njit(**_JIT)
def _trunk_backward_adam(tp, m, v, x, z1, h1, z2, dh2, H, lr, t, b1, b2, eps):
    n_in = x.size
    o_w2 = H * n_in + H
    d2 = np.empty(H)
    for i in range(H):
        d2[i] = dh2[i] if z2[i] > 0.0 else 0.0
    d1 = np.empty(H)
    _input_grad(tp[o_w2:], d2, H, d1)
    for j in range(H):
        if not z1[j] > 0.0:
            d1[j] = 0.0
    # both layers' gradients use the pre-update weights computed above
    off = _adam_affine(tp, m, v, 0, d1, x, lr, t, b1, b2, eps)
    _adam_affine(tp, m, v, off, d2, h1, lr, t, b1, b2, eps)


@numba.njit(**_JIT)
def _psi_at(tp, sp, x, H, d, psi, z1, h1, z2, h2):
    _trunk_forward(tp, x, H, z1, h1, z2, h2)
    _affine(sp, h2, d, psi)


@numba.njit(**_JIT)
def _target(tp, sp, xn, phi_x, gamma, H, d, out):
    if gamma == 0.0:
        out[:] = phi_x
        return
    z1, h1, z2, h2 = np.empty(H), np.empty(H), np.empty(H), np.empty(H)
    psi_n = np.empty(d)
    _psi_at(tp, sp, xn, H, d, psi_n, z1, h1, z2, h2)
    for i in range(d):
        out[i] = phi_x[i] + gamma * psi_n[i]


@numba.njit(**_JIT)
def fused_update(tp, tm_psi, tv_psi, tm_pi, tv_pi, sp, sm, sv, ap, am, av, wp, wm, wv,
                 xt, xn, g, phi_next, phi_x, r, gamma, a_t, H, d, n_actions,
                 lr_w, lr_psi, lr_pi, ent, b1, b2, eps, steps, out):
    """Stages (a)-(d) of one online update; writes (L_w, L_psi, A) into ``out``.

    ``steps`` holds the Adam step counters and is advanced in place. A
    non-finite loss or advantage stops the update before any parameter
    changes that depend on it.
    """
    # (a) goal weights
    w = np.empty(d)
    _affine(wp, g, d, w)
    err = -r
    for i in range(d):
        err += phi_next[i] * w[i]
    out[0] = err * err
    if not math.isfinite(out[0]):
        return
    u = np.empty(d)
    for i in range(d):
        u[i] = 2.0 * err * phi_next[i]
    steps[T_W] += 1
    _adam_affine(wp, wm, wv, 0, u, g, lr_w, steps[T_W], b1, b2, eps)

    # (b) successor features toward a constant TD target
    target = np.empty(d)
    _target(tp, sp, xn, phi_x, gamma, H, d, target)
    z1, h1, z2, h2 = np.empty(H), np.empty(H), np.empty(H), np.empty(H)
    psi = np.empty(d)
    _psi_at(tp, sp, xt, H, d, psi, z1, h1, z2, h2)
    loss = 0.0
    for i in range(d):
        u[i] = psi[i] - target[i]
        loss += u[i] * u[i]
        u[i] *= 2.0
    out[1] = loss
    if not math.isfinite(loss):
        return
    dh2 = np.empty(H)
    _input_grad(sp, u, H, dh2)
    steps[T_PSI_HEAD] += 1
    _adam_affine(sp, sm, sv, 0, u, h2, lr_psi, steps[T_PSI_HEAD], b1, b2, eps)
    steps[T_PSI_TRUNK] += 1
    _trunk_backward_adam(tp, tm_psi, tv_psi, xt, z1, h1, z2, dh2, H, lr_psi, steps[T_PSI_TRUNK], b1, b2, eps)

    # (c) advantage at the updated parameters
    _target(tp, sp, xn, phi_x, gamma, H, d, target)
    _psi_at(tp, sp, xt, H, d, psi, z1, h1, z2, h2)
    _affine(wp, g, d, w)
    adv = 0.0
    for i in range(d):
        adv += (target[i] - psi[i]) * w[i]
    out[2] = adv
    if not math.isfinite(adv):
        return

    # (d) policy ascent; the trunk is unchanged since the forward pass in (c)
    logits = np.empty(n_actions)
    _affine(ap, h2, n_actions, logits)
    mx = logits.max()
    total = 0.0
    for i in range(n_actions):
        total += math.exp(logits[i] - mx)
    log_total = math.log(total)
    dl = np.empty(n_actions)
    entropy = 0.0
    p = np.empty(n_actions)
    logp = np.empty(n_actions)
    for i in range(n_actions):
        logp[i] = logits[i] - mx - log_total
        p[i] = math.exp(logits[i] - mx) / total
        entropy -= p[i] * logp[i]
    any_nonzero = False
    for i in range(n_actions):
        dl[i] = adv * p[i]
        if i == a_t:
            dl[i] -= adv
        if ent != 0.0:
            dl[i] += ent * p[i] * (logp[i] + entropy)
        if dl[i] != 0.0:
            any_nonzero = True
    if not any_nonzero:
        return
    _input_grad(ap, dl, H, dh2)
    steps[T_PI_HEAD] += 1
    _adam_affine(ap, am, av, 0, dl, h2, lr_pi, steps[T_PI_HEAD], b1, b2, eps)
    steps[T_PI_TRUNK] += 1
    _trunk_backward_adam(tp, tm_pi, tv_pi, xt, z1, h1, z2, dh2, H, lr_pi, steps[T_PI_TRUNK], b1, b2, eps)


@numba.njit(**_JIT)
def policy(tp, ap, x, H, n_actions):
    """pi(. | s, g) for the concatenated input ``x``."""
    z1, h1, z2, h2 = np.empty(H), np.empty(H), np.empty(H), np.empty(H)
    _trunk_forward(tp, x, H, z1, h1, z2, h2)
    logits = np.empty(n_actions)
    _affine(ap, h2, n_actions, logits)
    mx = logits.max()
    e = np.exp(logits - mx)
    return e / e.sum()
