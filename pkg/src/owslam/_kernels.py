"""Numba kernels for batched field sampling and volume rendering.

Grids are indexed ``[ix, iy, iz]``; colour grids carry a trailing channel axis.
Sample distances padded with ``inf`` are ignored. All loops are serial so
results are bit-reproducible.
"""
import math

import numpy as np
from numba import njit

DEPTH_EPS = 1e-8
STD_EPS = 1e-12
# finite-math flags are left out: inf padding must stay observable
FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def locate(lo, hi, shape, px, py, pz, idx, frac):
    """Cell lookup; returns False for points outside the box."""
    p = (px, py, pz)
    for d in range(3):
        n = shape[d]
        g = (p[d] - lo[d]) / (hi[d] - lo[d]) * (n - 1)
        if not (g >= 0.0 and g <= n - 1):
            return False
        i = int(math.floor(g))
        if i > n - 2:
            i = n - 2
        idx[d] = i
        frac[d] = g - i
    return True


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def corner_weights(frac, w):
    fx, fy, fz = frac[0], frac[1], frac[2]
    for c in range(8):
        wx = fx if (c & 1) else 1.0 - fx
        wy = fy if (c & 2) else 1.0 - fy
        wz = fz if (c & 4) else 1.0 - fz
        w[c] = wx * wy * wz


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def interp_scalar(grid, idx, w):
    acc = 0.0
    for c in range(8):
        acc += w[c] * grid[idx[0] + (c & 1), idx[1] + ((c >> 1) & 1), idx[2] + ((c >> 2) & 1)]
    return acc


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def interp_vec3(grid, idx, w, out):
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for c in range(8):
        i, j, k = idx[0] + (c & 1), idx[1] + ((c >> 1) & 1), idx[2] + ((c >> 2) & 1)
        for ch in range(3):
            out[ch] += w[c] * grid[i, j, k, ch]


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def sphere_coords(dx, dy, dz, H, W, out_idx, out_frac):
    """Bilinear lookup on the (polar, azimuth) grid with azimuth wrap-around."""
    z = min(1.0, max(-1.0, dz))
    theta = math.acos(z)
    rho = math.sqrt(dx * dx + dy * dy)
    if rho < 1e-15:
        phi = 0.0
    else:
        c = min(1.0, max(-1.0, dx / rho))
        phi = math.acos(c)
        if dy < 0.0:
            phi = -phi
    u = theta / math.pi * (H - 1)
    i0 = int(math.floor(u))
    if i0 > H - 2:
        i0 = H - 2
    if i0 < 0:
        i0 = 0
    a = u - i0
    v = (phi + math.pi) / (2.0 * math.pi) * W
    j = int(math.floor(v))
    b = v - j
    out_idx[0] = i0
    out_idx[1] = j % W
    out_idx[2] = (j + 1) % W
    out_frac[0] = a
    out_frac[1] = b


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def sphere_raw(sphere, sidx, sfrac, out):
    i0, j0, j1 = sidx[0], sidx[1], sidx[2]
    a, b = sfrac[0], sfrac[1]
    for ch in range(3):
        out[ch] = ((1 - a) * (1 - b) * sphere[i0, j0, ch] + (1 - a) * b * sphere[i0, j1, ch]
                   + a * (1 - b) * sphere[i0 + 1, j0, ch] + a * b * sphere[i0 + 1, j1, ch])


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def sample_points(dens, cols, has_col, lo, hi, pts, out_sigma, out_col, out_inside):
    shape = dens.shape
    idx = np.zeros(3, np.int64)
    frac = np.zeros(3)
    w = np.zeros(8)
    c = np.zeros(3)
    for n in range(pts.shape[0]):
        ok = locate(lo, hi, shape, pts[n, 0], pts[n, 1], pts[n, 2], idx, frac)
        out_inside[n] = ok
        if not ok:
            out_sigma[n] = 0.0
            for ch in range(3):
                out_col[n, ch] = 0.5
            continue
        corner_weights(frac, w)
        out_sigma[n] = softplus(interp_scalar(dens, idx, w))
        if has_col:
            interp_vec3(cols, idx, w, c)
            for ch in range(3):
                out_col[n, ch] = sigmoid(c[ch])
        else:
            for ch in range(3):
                out_col[n, ch] = 0.5


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def sample_sphere(sphere, dirs, out):
    H, W = sphere.shape[0], sphere.shape[1]
    sidx = np.zeros(3, np.int64)
    sfrac = np.zeros(2)
    raw = np.zeros(3)
    for n in range(dirs.shape[0]):
        sphere_coords(dirs[n, 0], dirs[n, 1], dirs[n, 2], H, W, sidx, sfrac)
        sphere_raw(sphere, sidx, sfrac, raw)
        for ch in range(3):
            out[n, ch] = sigmoid(raw[ch])


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def _march(o, d, betas_row, far, dens, cols, has_col, lo, hi,
           sig, col, delta, inside, cidx, cw, xraw, craw, idx, frac, w, c):
    """Evaluate samples along one ray; fills per-sample buffers, returns count."""
    S = betas_row.shape[0]
    shape = dens.shape
    m = 0
    for s in range(S):
        b = betas_row[s]
        if not math.isfinite(b):
            break
        m += 1
    for s in range(m):
        b = betas_row[s]
        nxt = betas_row[s + 1] if s + 1 < m else far
        dl = nxt - b
        delta[s] = dl if dl > 0.0 else 0.0
        ok = locate(lo, hi, shape, o[0] + b * d[0], o[1] + b * d[1], o[2] + b * d[2], idx, frac)
        inside[s] = ok
        if not ok:
            sig[s] = 0.0
            col[s, 0] = 0.5
            col[s, 1] = 0.5
            col[s, 2] = 0.5
            continue
        corner_weights(frac, w)
        for q in range(3):
            cidx[s, q] = idx[q]
        for q in range(8):
            cw[s, q] = w[q]
        x = interp_scalar(dens, idx, w)
        xraw[s] = x
        sig[s] = softplus(x)
        if has_col:
            interp_vec3(cols, idx, w, c)
            for ch in range(3):
                craw[s, ch] = c[ch]
                col[s, ch] = sigmoid(c[ch])
        else:
            col[s, 0] = 0.5
            col[s, 1] = 0.5
            col[s, 2] = 0.5
    return m


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def _sample_lean(o, d, b, dens, cols, has_col, lo, scale, nmax, c):
    """Density and colour at o + b d without caching interpolation data.

    Returns -1 for points outside the box (colour left untouched).
    """
    gx = (o[0] + b * d[0] - lo[0]) * scale[0]
    gy = (o[1] + b * d[1] - lo[1]) * scale[1]
    gz = (o[2] + b * d[2] - lo[2]) * scale[2]
    if not (gx >= 0.0 and gx <= nmax[0] and gy >= 0.0 and gy <= nmax[1] and gz >= 0.0 and gz <= nmax[2]):
        return -1.0
    i = min(int(gx), nmax[0] - 1)
    j = min(int(gy), nmax[1] - 1)
    k = min(int(gz), nmax[2] - 1)
    fx, fy, fz = gx - i, gy - j, gz - k
    ex, ey, ez = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w00, w10, w01, w11 = ex * ey, fx * ey, ex * fy, fx * fy
    x = (ez * (w00 * dens[i, j, k] + w10 * dens[i + 1, j, k] + w01 * dens[i, j + 1, k]
               + w11 * dens[i + 1, j + 1, k])
         + fz * (w00 * dens[i, j, k + 1] + w10 * dens[i + 1, j, k + 1] + w01 * dens[i, j + 1, k + 1]
                 + w11 * dens[i + 1, j + 1, k + 1]))
    if has_col:
        for ch in range(3):
            y = (ez * (w00 * cols[i, j, k, ch] + w10 * cols[i + 1, j, k, ch]
                       + w01 * cols[i, j + 1, k, ch] + w11 * cols[i + 1, j + 1, k, ch])
                 + fz * (w00 * cols[i, j, k + 1, ch] + w10 * cols[i + 1, j, k + 1, ch]
                         + w01 * cols[i, j + 1, k + 1, ch] + w11 * cols[i + 1, j + 1, k + 1, ch]))
            c[ch] = sigmoid(y)
    return softplus(x)


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def render_forward(origins, dirs, betas, far, dens, cols, has_col, lo, hi, sphere, has_bg,
                   out_fg, out_bg, out_depth, out_std, out_wsum, out_tfar):
    N, S = betas.shape
    wts = np.zeros(S)
    c = np.zeros(3)
    sidx = np.zeros(3, np.int64)
    sfrac = np.zeros(2)
    raw = np.zeros(3)
    shape = dens.shape
    nmax = np.empty(3, np.int64)
    scale = np.empty(3)
    for q in range(3):
        nmax[q] = shape[q] - 1
        scale[q] = nmax[q] / (hi[q] - lo[q])
    for n in range(N):
        o = origins[n]
        d = dirs[n]
        m = 0
        while m < S and math.isfinite(betas[n, m]):
            m += 1
        T = 1.0
        wsum = 0.0
        num = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for s in range(m):
            b = betas[n, s]
            nxt = betas[n, s + 1] if s + 1 < m else far[n]
            dl = nxt - b
            if dl < 0.0:
                dl = 0.0
            sg = _sample_lean(o, d, b, dens, cols, has_col, lo, scale, nmax, c)
            if sg < 0.0:
                wts[s] = 0.0
                continue
            tau = sg * dl
            alpha = -math.expm1(-tau)
            wi = T * alpha
            wts[s] = wi
            wsum += wi
            num += wi * b
            if has_col:
                c0 += wi * c[0]
                c1 += wi * c[1]
                c2 += wi * c[2]
            T *= math.exp(-tau)
        depth = num / max(wsum, DEPTH_EPS)
        var = 0.0
        for s in range(m):
            diff = betas[n, s] - depth
            var += wts[s] * diff * diff
        var /= max(wsum, DEPTH_EPS)
        out_depth[n] = depth
        out_std[n] = math.sqrt(var)
        out_wsum[n] = wsum
        out_tfar[n] = T
        out_fg[n, 0] = c0
        out_fg[n, 1] = c1
        out_fg[n, 2] = c2
        if has_bg:
            sphere_coords(d[0], d[1], d[2], sphere.shape[0], sphere.shape[1], sidx, sfrac)
            sphere_raw(sphere, sidx, sfrac, raw)
            for ch in range(3):
                out_bg[n, ch] = sigmoid(raw[ch])
        else:
            for ch in range(3):
                out_bg[n, ch] = 0.0


@njit(cache=True, nogil=True, fastmath=FAST, error_model="numpy")
def render_backward(origins, dirs, betas, far, dens, cols, has_col, lo, hi, sphere, has_bg,
                    g_col, g_depth, g_std, grad_dens, grad_cols, grad_sphere):
    """Accumulate d(loss)/d(raw values) given upstream gradients of the ray outputs.

    ``g_col`` is the gradient w.r.t. the composite colour (foreground plus
    boundary transmittance times background).
    """
    N, S = betas.shape
    sig = np.zeros(S)
    col = np.zeros((S, 3))
    delta = np.zeros(S)
    inside = np.zeros(S, np.bool_)
    cidx = np.zeros((S, 3), np.int64)
    cw = np.zeros((S, 8))
    xraw = np.zeros(S)
    craw = np.zeros((S, 3))
    wts = np.zeros(S)
    tnext = np.zeros(S)
    q = np.zeros(S)
    ibuf = np.zeros(3, np.int64)
    fbuf = np.zeros(3)
    wbuf = np.zeros(8)
    cbuf = np.zeros(3)
    sidx = np.zeros(3, np.int64)
    sfrac = np.zeros(2)
    raw = np.zeros(3)
    bg = np.zeros(3)
    for n in range(N):
        gc0, gc1, gc2 = g_col[n, 0], g_col[n, 1], g_col[n, 2]
        gd, gs = g_depth[n], g_std[n]
        if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and gs == 0.0:
            continue
        m = _march(origins[n], dirs[n], betas[n], far[n], dens, cols, has_col, lo, hi,
                   sig, col, delta, inside, cidx, cw, xraw, craw, ibuf, fbuf, wbuf, cbuf)
        T = 1.0
        wsum = 0.0
        num = 0.0
        for s in range(m):
            tau = sig[s] * delta[s]
            alpha = -math.expm1(-tau)
            wts[s] = T * alpha
            T *= math.exp(-tau)
            tnext[s] = T
            wsum += wts[s]
            num += wts[s] * betas[n, s]
        tfar = T
        big = wsum >= DEPTH_EPS
        depth = num / max(wsum, DEPTH_EPS)
        var = 0.0
        m1 = 0.0
        for s in range(m):
            diff = betas[n, s] - depth
            var += wts[s] * diff * diff
            m1 += wts[s] * diff
        var /= max(wsum, DEPTH_EPS)
        std = math.sqrt(var)
        bgdot = 0.0
        if has_bg:
            sphere_coords(dirs[n, 0], dirs[n, 1], dirs[n, 2], sphere.shape[0], sphere.shape[1],
                          sidx, sfrac)
            sphere_raw(sphere, sidx, sfrac, raw)
            for ch in range(3):
                bg[ch] = sigmoid(raw[ch])
            bgdot = gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]
            # d/d(sphere raw): T_far * g_col * sigmoid'
            a, b = sfrac[0], sfrac[1]
            i0, j0, j1 = sidx[0], sidx[1], sidx[2]
            for ch in range(3):
                g = tfar * g_col[n, ch] * bg[ch] * (1.0 - bg[ch])
                grad_sphere[i0, j0, ch] += (1 - a) * (1 - b) * g
                grad_sphere[i0, j1, ch] += (1 - a) * b * g
                grad_sphere[i0 + 1, j0, ch] += a * (1 - b) * g
                grad_sphere[i0 + 1, j1, ch] += a * b * g
        # per-sample sensitivity of the outputs to the sample weight
        for s in range(m):
            diff = betas[n, s] - depth
            if big:
                dd = diff / wsum
                dv = (diff * diff - var) / wsum
            else:
                dd = betas[n, s] / DEPTH_EPS
                dv = diff * diff / DEPTH_EPS - 2.0 * m1 / DEPTH_EPS * dd
            val = gd * dd
            if std > STD_EPS:
                val += gs * dv / (2.0 * std)
            if has_col:
                val += gc0 * col[s, 0] + gc1 * col[s, 1] + gc2 * col[s, 2]
            q[s] = val
        suffix = 0.0
        for s in range(m - 1, -1, -1):
            g_sig = delta[s] * (tnext[s] * q[s] - suffix)
            if has_bg:
                g_sig -= delta[s] * tfar * bgdot
            suffix += wts[s] * q[s]
            if not inside[s]:
                continue
            g_x = g_sig * sigmoid(xraw[s])
            i, j, k = cidx[s, 0], cidx[s, 1], cidx[s, 2]
            for c in range(8):
                ii, jj, kk = i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)
                grad_dens[ii, jj, kk] += cw[s, c] * g_x
            if has_col:
                for ch in range(3):
                    cc = col[s, ch]
                    g_y = wts[s] * g_col[n, ch] * cc * (1.0 - cc)
                    if g_y == 0.0:
                        continue
                    for c in range(8):
                        ii, jj, kk = i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)
                        grad_cols[ii, jj, kk, ch] += cw[s, c] * g_y


@njit(cache=True, nogil=True)
def adam_step(x, g, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam update on flat arrays; c1, c2 are the bias corrections."""
    for i in range(x.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        x[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
