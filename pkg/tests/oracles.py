"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the array kernels of the package; every quantity is
rebuilt from its definition with plain Python loops.
"""
from __future__ import annotations

import math

import numpy as np

TIE_RTOL = 1e-12
VAR_EPS = 1e-20


def pooled_cell(plane, top, left, d, r):
    """Mean of each f x f block, members summed in row-major order."""
    f = d // r
    out = [[0.0] * r for _ in range(r)]
    for i in range(r):
        for j in range(r):
            acc = 0.0
            for u in range(f):
                for v in range(f):
                    acc = acc + float(plane[top + i * f + u][left + j * f + v])
            out[i][j] = acc / (f * f)
    return out


def rotate_cw(cell):
    n = len(cell)
    return [[cell[n - 1 - j][i] for j in range(n)] for i in range(n)]


def augment(cell, aug):
    out = cell
    for _ in range(aug % 4):
        out = rotate_cw(out)
    if aug >= 4:
        out = [[-v for v in row] for row in out]
    return out


def domain_positions(h, w, d, s):
    return [(y, x) for y in range(0, h - d + 1, s) for x in range(0, w - d + 1, s)]


def candidate_cells(plane, d, s, r, augmented):
    h, w = len(plane), len(plane[0])
    cells = []
    for y, x in domain_positions(h, w, d, s):
        base = pooled_cell(plane, y, x, d, r)
        for aug in range(8 if augmented else 1):
            cells.append(augment(base, aug))
    return cells


def flatten(cell):
    return [v for row in cell for v in row]


def ls_fit(d, r, a_max):
    n = len(d)
    md = math.fsum(d) / n
    mr = math.fsum(r) / n
    dc = [v - md for v in d]
    var = math.fsum(v * v for v in dc)
    if var <= VAR_EPS * n:
        a = 0.0
    else:
        a = min(max(math.fsum(p * (q - mr) for p, q in zip(dc, r)) / var, -a_max), a_max)
    b = mr - a * md
    res = math.fsum((a * p + b - q) ** 2 for p, q in zip(d, r))
    return a, b, res


def pifs_search(img, r, d, s, augmented, a_max=0.999):
    """Exhaustive sequential search; returns a list of (domain, aug, a, b) per range."""
    out = []
    n_aug = 8 if augmented else 1
    for plane in np.asarray(img, dtype=np.float64).tolist():
        h, w = len(plane), len(plane[0])
        cands = [flatten(c) for c in candidate_cells(plane, d, s, r, augmented)]
        for i in range(0, h, r):
            for j in range(0, w, r):
                rng = [plane[i + u][j + v] for u in range(r) for v in range(r)]
                mr = math.fsum(rng) / len(rng)
                srr = math.fsum((v - mr) ** 2 for v in rng)
                fits = [ls_fit(c, rng, a_max) for c in cands]
                best = min(f[2] for f in fits)
                idx = next(m for m, f in enumerate(fits) if f[2] <= best + TIE_RTOL * srr)
                a, b, _ = fits[idx]
                out.append((idx // n_aug, idx % n_aug, a, b))
    return out


def collage_matrix(code):
    """Dense (A, c) with F(z) = A z + c, built pixel by pixel from the operator definition."""
    C, H, W = code.channels, code.height, code.width
    r, d, s = code.scheme.range_size, code.scheme.domain_size, code.scheme.domain_stride
    f = d // r
    m = C * H * W
    A = np.zeros((m, m))
    c = np.zeros(m)
    p = code.gamma * code.a
    positions = domain_positions(H, W, d, s)
    n_aug = 8 if code.augmented else 1
    per_row = W // r
    kp = per_row * (H // r)

    def idx(ch, y, x):
        return (ch * H + y) * W + x

    def source(aug, i, j):
        # augmented cell [i][j] reads pooled-cell position (si, sj) with sign
        si, sj = i, j
        for _ in range(aug % 4):
            # clockwise rotation: out[i][j] = in[r-1-j][i]
            si, sj = r - 1 - sj, si
        return si, sj, (-1.0 if aug >= 4 else 1.0)

    for k in range(code.K):
        ch, rem = divmod(k, kp)
        ry, rx = divmod(rem, per_row)
        for i in range(r):
            for j in range(r):
                row = idx(ch, ry * r + i, rx * r + j)
                c[row] += code.b[k]
                for n in range(code.N):
                    w = p[k, n]
                    if w == 0.0:
                        continue
                    (y0, x0), aug = positions[n // n_aug], n % n_aug
                    si, sj, sign = source(aug, i, j)
                    for u in range(f):
                        for v in range(f):
                            A[row, idx(ch, y0 + si * f + u, x0 + sj * f + v)] += sign * w / (f * f)
                for v_ in range(code.V):
                    w = p[k, code.N + v_]
                    if code.aux_mode == "fixed":
                        c[row] += w * code.aux[v_, i, j]
                    else:
                        y0, x0 = positions[0]
                        si, sj, _ = source(v_ + 1, i, j)
                        for u in range(f):
                            for vv in range(f):
                                A[row, idx(ch, y0 + si * f + u, x0 + sj * f + vv)] += w / (f * f)
    return A, c


def ridge_normal_equations(ranges, cells, lam):
    """Ridge fit with an unpenalized intercept via the (n+1) x (n+1) normal equations."""
    X = np.concatenate([cells.T, np.ones((cells.shape[1], 1))], axis=1)
    P = lam * np.eye(X.shape[1])
    P[-1, -1] = 0.0
    sol = np.linalg.solve(X.T @ X + P, X.T @ ranges.T)
    return sol[:-1].T, sol[-1]
