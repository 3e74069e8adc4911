"""Compiled inner loops for the two-pass wave scan.

Shapes: ``p`` (B,T); ``theta``/``phi`` (B,T,G); ``ur``/``ui`` (B,T,D);
``gate`` (D,); ``pi``/``pj`` (G,) disjoint rotation pairs; initial states
(B,D) complex.  Gradients use the ``dRe + i dIm`` convention.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _rotate(v, out, ang, pi, pj):
    for m in range(pi.shape[0]):
        c = np.cos(ang[m])
        s = np.sin(ang[m])
        a = v[pi[m]]
        b = v[pj[m]]
        out[pi[m]] = c * a - s * b
        out[pj[m]] = s * a + c * b


@nb.njit(cache=True, inline="always")
def _rotate_t(v, out, ang, pi, pj):
    for m in range(pi.shape[0]):
        c = np.cos(ang[m])
        s = np.sin(ang[m])
        a = v[pi[m]]
        b = v[pj[m]]
        out[pi[m]] = c * a + s * b
        out[pj[m]] = -s * a + c * b


@nb.njit(cache=True)
def scan_forward(p, theta, phi, ur, ui, gate, pi, pj, h1_0, h2_0):
    B, T, D = ur.shape
    h1 = np.empty((B, T, D), dtype=np.complex128)
    h2 = np.empty((B, T, D), dtype=np.complex128)
    z = np.empty(D, dtype=np.complex128)
    w = np.empty(D, dtype=np.complex128)
    for b in range(B):
        # pass 1
        prev = h1_0[b].copy()
        for t in range(T):
            pt = p[b, t]
            for d in range(D):
                z[d] = prev[d]
            _rotate(prev, z, theta[b, t], pi, pj)
            for d in range(D):
                h1[b, t, d] = (1.0 - pt) * z[d] + pt * (ur[b, t, d] + 1j * ui[b, t, d])
                prev[d] = h1[b, t, d]
        # pass 2: injection corrected by gate * (GivensH(h1) - h1)
        prev = h2_0[b].copy()
        for t in range(T):
            pt = p[b, t]
            for d in range(D):
                z[d] = prev[d]
                w[d] = h1[b, t, d]
            _rotate(prev, z, theta[b, t], pi, pj)
            _rotate(h1[b, t], w, phi[b, t], pi, pj)
            for d in range(D):
                u2 = (ur[b, t, d] + 1j * ui[b, t, d]) + gate[d] * (w[d] - h1[b, t, d])
                h2[b, t, d] = (1.0 - pt) * z[d] + pt * u2
                prev[d] = h2[b, t, d]
    return h1, h2


@nb.njit(cache=True)
def scan_backward(p, theta, phi, ur, ui, gate, pi, pj, h1_0, h2_0, h1, h2, g2):
    B, T, D = ur.shape
    G = pi.shape[0]
    dp = np.zeros((B, T))
    dtheta = np.zeros((B, T, G))
    dphi = np.zeros((B, T, G))
    dur = np.zeros((B, T, D))
    dui = np.zeros((B, T, D))
    dgate = np.zeros(D)
    g1 = np.zeros((B, T, D), dtype=np.complex128)
    carry = np.empty(D, dtype=np.complex128)
    gh = np.empty(D, dtype=np.complex128)
    gz = np.empty(D, dtype=np.complex128)
    gd = np.empty(D, dtype=np.complex128)
    tmp = np.empty(D, dtype=np.complex128)
    z = np.empty(D, dtype=np.complex128)
    w = np.empty(D, dtype=np.complex128)
    for b in range(B):
        # pass 2, reverse time
        carry[:] = 0.0
        for t in range(T - 1, -1, -1):
            pt = p[b, t]
            prev = h2_0[b] if t == 0 else h2[b, t - 1]
            for d in range(D):
                z[d] = prev[d]
                w[d] = h1[b, t, d]
            _rotate(prev, z, theta[b, t], pi, pj)
            _rotate(h1[b, t], w, phi[b, t], pi, pj)
            acc = 0.0
            for d in range(D):
                gh[d] = g2[b, t, d] + carry[d]
                delta = w[d] - h1[b, t, d]
                u2 = (ur[b, t, d] + 1j * ui[b, t, d]) + gate[d] * delta
                acc += (np.conj(gh[d]) * (u2 - z[d])).real
                gu = pt * gh[d]
                dur[b, t, d] += gu.real
                dui[b, t, d] += gu.imag
                dgate[d] += (np.conj(gu) * delta).real
                gd[d] = gate[d] * gu
                gz[d] = (1.0 - pt) * gh[d]
            dp[b, t] += acc
            for m in range(G):
                i = pi[m]
                j = pj[m]
                dtheta[b, t, m] += (np.conj(gz[i]) * (-z[j]) + np.conj(gz[j]) * z[i]).real
                dphi[b, t, m] += (np.conj(gd[i]) * (-w[j]) + np.conj(gd[j]) * w[i]).real
            # d delta / d h1 = R(phi) - I
            for d in range(D):
                tmp[d] = gd[d]
            _rotate_t(gd, tmp, phi[b, t], pi, pj)
            for d in range(D):
                g1[b, t, d] = tmp[d] - gd[d]
                carry[d] = gz[d]
            _rotate_t(gz, carry, theta[b, t], pi, pj)
        # pass 1, reverse time
        carry[:] = 0.0
        for t in range(T - 1, -1, -1):
            pt = p[b, t]
            prev = h1_0[b] if t == 0 else h1[b, t - 1]
            for d in range(D):
                z[d] = prev[d]
            _rotate(prev, z, theta[b, t], pi, pj)
            acc = 0.0
            for d in range(D):
                gh[d] = g1[b, t, d] + carry[d]
                u = ur[b, t, d] + 1j * ui[b, t, d]
                acc += (np.conj(gh[d]) * (u - z[d])).real
                gu = pt * gh[d]
                dur[b, t, d] += gu.real
                dui[b, t, d] += gu.imag
                gz[d] = (1.0 - pt) * gh[d]
            dp[b, t] += acc
            for m in range(G):
                i = pi[m]
                j = pj[m]
                dtheta[b, t, m] += (np.conj(gz[i]) * (-z[j]) + np.conj(gz[j]) * z[i]).real
            for d in range(D):
                carry[d] = gz[d]
            _rotate_t(gz, carry, theta[b, t], pi, pj)
    return dp, dtheta, dphi, dur, dui, dgate


@nb.njit(cache=True)
def apply_rotations(h, ang, pi, pj):
    """Rotate each row of ``h`` (N,D) by its angles ``ang`` (N,G)."""
    out = h.copy()
    for n in range(h.shape[0]):
        _rotate(h[n], out[n], ang[n], pi, pj)
    return out
