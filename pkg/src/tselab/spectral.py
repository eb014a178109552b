"""Spectral quantities of attention matrices.

* ``spectral_norm``: largest singular value by power iteration on ``a.T @ a``.
* ``real_schur_eigenvalues``: all eigenvalues of a dense real matrix through
  Householder reduction to upper Hessenberg form followed by Francis
  double-shift QR sweeps; complex conjugate pairs are read off the 2x2
  diagonal blocks of the resulting real Schur form.
* ``second_eigenvalue_modulus``: |lambda_2(P)| of a row-stochastic matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConvergenceError, ShapeError, ValidationError
from .matcore import as_matrix

__all__ = [
    "SpectralReport",
    "spectral_norm",
    "hessenberg",
    "real_schur_eigenvalues",
    "second_eigenvalue_modulus",
    "deflated_attention",
    "spectral_report",
    "check_row_stochastic",
]

MAX_EIG_DIM = 1024


def _start_block(m: int, k: int) -> np.ndarray:
    # column 0: all-ones plus a small index-dependent wobble so that no
    # singular direction is missed by symmetry; further columns are fixed
    # cosine patterns that seed the rest of the block
    i = np.arange(1, m + 1, dtype=np.float64)
    cols = [1.0 + 1e-2 * np.sin(i)]
    cols += [np.cos(np.pi * j * (i - 0.5) / m) + 1e-2 * np.sin(j * i) for j in range(1, k)]
    q, _ = np.linalg.qr(np.column_stack(cols))
    return q


def spectral_norm(a, tol: float = 1e-10, max_iter: int = 10_000, block: int = 8) -> float:
    """Largest singular value of ``a``.

    Block power iteration on the Gram matrix ``G = a.T @ a`` from a fixed
    start block, with a Rayleigh-Ritz step each sweep. A block (rather
    than a single vector) keeps the method fast when the top singular
    values are clustered, as they are for nearly symmetric attention.
    Stops once the residual ``||G u - theta u||`` of the leading Ritz pair
    drops below ``tol * theta``. A zero matrix has norm 0.
    """
    a = as_matrix(a, "a")
    if not tol > 0:
        raise ValidationError(f"tol must be positive, got {tol}")
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return 0.0
    # rescale so the Gram matrix cannot underflow in the deep-block regime
    b = a / scale
    g = b.T @ b
    m = g.shape[0]
    v = _start_block(m, max(1, min(block, m)))
    theta = 0.0
    for _ in range(max_iter):
        w = g @ v
        h = v.T @ w
        vals, vecs = np.linalg.eigh(0.5 * (h + h.T))
        theta = float(vals[-1])
        if theta <= 0.0:
            # the block lies in the null space of a nonzero matrix: nudge it
            v, _ = np.linalg.qr(np.roll(v, 1, axis=0) + 1e-3)
            continue
        u = v @ vecs[:, -1]
        if np.linalg.norm(g @ u - theta * u) <= tol * theta:
            return float(np.sqrt(theta)) * scale
        v, _ = np.linalg.qr(w @ vecs[:, ::-1])
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last=float(np.sqrt(max(theta, 0.0))) * scale,
        iterations=max_iter,
    )


@numba.njit(cache=True)
def _hessenberg_inplace(a):
    n = a.shape[0]
    for k in range(n - 2):
        alpha = 0.0
        for i in range(k + 1, n):
            alpha += a[i, k] * a[i, k]
        alpha = np.sqrt(alpha)
        if alpha == 0.0:
            continue
        if a[k + 1, k] > 0:
            alpha = -alpha
        v = np.zeros(n - k - 1)
        for i in range(k + 1, n):
            v[i - k - 1] = a[i, k]
        v[0] -= alpha
        vn = 0.0
        for i in range(v.shape[0]):
            vn += v[i] * v[i]
        if vn == 0.0:
            continue
        # left application: rows k+1.., columns k..
        for j in range(k, n):
            s = 0.0
            for i in range(k + 1, n):
                s += v[i - k - 1] * a[i, j]
            s = 2.0 * s / vn
            for i in range(k + 1, n):
                a[i, j] -= s * v[i - k - 1]
        # right application: all rows, columns k+1..
        for i in range(n):
            s = 0.0
            for j in range(k + 1, n):
                s += a[i, j] * v[j - k - 1]
            s = 2.0 * s / vn
            for j in range(k + 1, n):
                a[i, j] -= s * v[j - k - 1]
        a[k + 1, k] = alpha
        for i in range(k + 2, n):
            a[i, k] = 0.0


@numba.njit(cache=True)
def _francis_qr(h, max_sweeps):
    """Eigenvalues of an upper Hessenberg matrix by implicit double-shift QR.

    Works on a 1-based padded copy. Returns (wr, wi, sweeps) with sweeps = -1
    when the sweep budget is exhausted.
    """
    n = h.shape[0]
    a = np.zeros((n + 1, n + 1))
    for i in range(n):
        for j in range(n):
            a[i + 1, j + 1] = h[i, j]
    wr = np.zeros(n + 1)
    wi = np.zeros(n + 1)
    anorm = 0.0
    for i in range(1, n + 1):
        for j in range(max(i - 1, 1), n + 1):
            anorm += abs(a[i, j])
    nn = n
    t = 0.0
    sweeps = 0
    p = q = r = s = w = x = y = z = 0.0
    while nn >= 1:
        its = 0
        while True:
            # look for a single small subdiagonal element
            l = 1
            for ll in range(nn, 1, -1):
                s = abs(a[ll - 1, ll - 1]) + abs(a[ll, ll])
                if s == 0.0:
                    s = anorm
                if abs(a[ll, ll - 1]) + s == s:
                    a[ll, ll - 1] = 0.0
                    l = ll
                    break
            x = a[nn, nn]
            if l == nn:
                # one root found
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
                break
            y = a[nn - 1, nn - 1]
            w = a[nn, nn - 1] * a[nn - 1, nn]
            if l == nn - 1:
                # a 2x2 block: two real roots or a conjugate pair
                p = 0.5 * (y - x)
                q = p * p + w
                z = np.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + (z if p >= 0.0 else -z)
                    wr[nn - 1] = x + z
                    wr[nn] = x + z
                    if z != 0.0:
                        wr[nn] = x - w / z
                    wi[nn - 1] = 0.0
                    wi[nn] = 0.0
                else:
                    wr[nn - 1] = x + p
                    wr[nn] = x + p
                    wi[nn - 1] = -z
                    wi[nn] = z
                nn -= 2
                break
            if sweeps >= max_sweeps:
                return wr[1:], wi[1:], -1
            if its == 10 or its == 20:
                # exceptional shift
                t += x
                for i in range(1, nn + 1):
                    a[i, i] -= x
                s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                x = 0.75 * s
                y = x
                w = -0.4375 * s * s
            its += 1
            sweeps += 1
            # find two consecutive small subdiagonal elements
            m = nn - 2
            while m >= l:
                z = a[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                q = a[m + 1, m + 1] - z - r - s
                r = a[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                if u + v == v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i, i - 2] = 0.0
                if i != m + 2:
                    a[i, i - 3] = 0.0
            # chase the bulge
            for k in range(m, nn):
                if k != m:
                    p = a[k, k - 1]
                    q = a[k + 1, k - 1]
                    r = 0.0
                    if k != nn - 1:
                        r = a[k + 2, k - 1]
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = np.sqrt(p * p + q * q + r * r)
                if p < 0.0:
                    s = -s
                if s != 0.0:
                    if k == m:
                        if l != m:
                            a[k, k - 1] = -a[k, k - 1]
                    else:
                        a[k, k - 1] = -s * x
                    p += s
                    x = p / s
                    y = q / s
                    z = r / s
                    q /= p
                    r /= p
                    for j in range(k, nn + 1):
                        p = a[k, j] + q * a[k + 1, j]
                        if k != nn - 1:
                            p += r * a[k + 2, j]
                            a[k + 2, j] -= p * z
                        a[k + 1, j] -= p * y
                        a[k, j] -= p * x
                    mmin = nn if nn < k + 3 else k + 3
                    for i in range(l, mmin + 1):
                        p = x * a[i, k] + y * a[i, k + 1]
                        if k != nn - 1:
                            p += z * a[i, k + 2]
                            a[i, k + 2] -= p * r
                        a[i, k + 1] -= p * q
                        a[i, k] -= p
            if l >= nn - 1:
                break
    return wr[1:], wi[1:], sweeps


def hessenberg(a) -> np.ndarray:
    """Upper Hessenberg matrix orthogonally similar to ``a`` (Householder)."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    h = np.array(a, dtype=np.float64, order="C", copy=True)
    _hessenberg_inplace(h)
    return h


def real_schur_eigenvalues(a) -> list[complex]:
    """All eigenvalues of a real square matrix, in no particular order."""
    a = as_matrix(a, "a")
    n = a.shape[0]
    if n != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    if n > MAX_EIG_DIM:
        raise ValidationError(f"n={n} exceeds the supported size {MAX_EIG_DIM}")
    if n == 1:
        return [complex(a[0, 0], 0.0)]
    h = hessenberg(a)
    budget = 30 * n
    wr, wi, sweeps = _francis_qr(h, budget)
    if sweeps < 0:
        raise ConvergenceError(
            f"Francis QR exceeded {budget} sweeps", last=wr + 1j * wi, iterations=budget
        )
    return [complex(r, i) for r, i in zip(wr, wi)]


def check_row_stochastic(p, tol: float = 1e-12) -> np.ndarray:
    """Validate nonnegativity and unit row sums; return the float64 array.

    Row sums must equal 1 within ``tol * sqrt(n)``.
    """
    p = as_matrix(p, "P")
    n = p.shape[0]
    if p.shape != (n, n):
        raise ShapeError(f"attention matrix must be square, got {p.shape}")
    if np.any(p < 0):
        i, j = np.argwhere(p < 0)[0]
        raise ValidationError(f"negative entry P[{i},{j}] = {p[i, j]!r}")
    dev = np.abs(p.sum(axis=1) - 1.0)
    worst = int(np.argmax(dev))
    if dev[worst] > tol * np.sqrt(n):
        raise ValidationError(
            f"row {worst} sums to {p[worst].sum()!r}, not 1 (deviation {dev[worst]:.3e})"
        )
    return p


def deflated_attention(p) -> np.ndarray:
    """``Pi_perp P Pi_perp`` with both projections applied explicitly."""
    m = p - p.mean(axis=0, keepdims=True)
    return m - m.mean(axis=1, keepdims=True)


def second_eigenvalue_modulus(p) -> float:
    """|lambda_2(P)| for a row-stochastic ``P``.

    Because ``P 1 = 1``, in an orthonormal basis ``[e, Q]`` with
    ``e = 1/sqrt(n)`` the matrix is block upper triangular,
    ``[[e'Pe, e'PQ], [0, Q'PQ]]``, since ``Q'Pe = Q'e = 0``. Hence
    ``spec(P) = {1} + spec(Q'PQ)``. The deflated matrix
    ``M = Pi_perp P Pi_perp`` has spectrum ``{0} + spec(Q'PQ)``, so its
    spectral radius is exactly |lambda_2(P)| and the known eigenvalue 1 never
    has to be separated numerically from nearby eigenvalues.
    """
    p = _matrix_of(p)
    check_row_stochastic(p)
    if p.shape[0] == 1:
        return 0.0
    eig = real_schur_eigenvalues(deflated_attention(p))
    return float(max(abs(z) for z in eig))


@dataclass(frozen=True)
class SpectralReport:
    delta: float
    lambda2_modulus: float
    spectral_gap_sym: float


def spectral_report(p) -> SpectralReport:
    """delta = ||Pi_perp P||_2, |lambda_2(P)| and the gap 1 - |lambda_2|^2."""
    p = _matrix_of(p)
    check_row_stochastic(p)
    delta = spectral_norm(p - p.mean(axis=0, keepdims=True))
    lam = second_eigenvalue_modulus(p)
    return SpectralReport(delta=delta, lambda2_modulus=lam, spectral_gap_sym=1.0 - lam * lam)


def _matrix_of(p) -> np.ndarray:
    # accept AttentionMatrix-like wrappers without importing transformer
    return as_matrix(getattr(p, "p", p), "P")
