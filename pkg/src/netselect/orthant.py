"""Multivariate normal orthant probabilities Phi_k(0; mean, cov) = P(W <= 0).

Only the at-zero case needed by the marginal likelihoods is provided:
exact formulas for k <= 2 (the bivariate case follows Genz's adaptation of
the Drezner-Wesolowsky method) and a randomized lattice quasi-Monte Carlo
estimator with tent periodization for k >= 3. Estimator seeds are derived
from the argument bytes, so repeated evaluation of the same integral is
bit-reproducible regardless of call order.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.fft import fft, ifft
from scipy.special import ndtr, ndtri
from scipy.stats._qmc import primes_from_2_to

from ._util import stable_seed

__all__ = ["mvn_cdf_at_zero", "NotPositiveDefiniteError"]

_TINY = 1e-300


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Covariance matrix is not symmetric positive definite."""


@lru_cache(maxsize=32)
def _gl_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    from scipy.special import roots_legendre

    x, w = roots_legendre(n)
    return x, w


def _bvnu(dh: float, dk: float, r: float) -> float:
    """P(X > dh, Y > dk) for standard bivariate normal with correlation r.

    Genz's numerically refined Drezner-Wesolowsky scheme: Gauss-Legendre on
    the arcsine integral for |r| < 0.925, asymptotic expansion close to the
    singular |r| = 1 limit. Absolute accuracy ~5e-16.
    """
    if math.isinf(dh) and dh > 0 or math.isinf(dk) and dk > 0:
        return 0.0
    if math.isinf(dh) and dh < 0:
        return 1.0 if (math.isinf(dk) and dk < 0) else float(ndtr(-dk))
    if math.isinf(dk) and dk < 0:
        return float(ndtr(-dh))
    if r == 0.0:
        return float(ndtr(-dh) * ndtr(-dk))

    tp = 2.0 * math.pi
    h, k = dh, dk
    hk = h * k
    bvn = 0.0
    n = 6 if abs(r) < 0.3 else (12 if abs(r) < 0.75 else 20)
    t, w = _gl_nodes(n)

    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r) / 2.0
        sn = np.sin(asr * (1.0 + t))
        bvn = float(np.sum(w * np.exp((sn * hk - hs) / (1.0 - sn * sn))))
        bvn = bvn * asr / tp + float(ndtr(-h) * ndtr(-k))
    else:
        if r < 0.0:
            k = -k
            hk = -hk
        if abs(r) < 1.0:
            as_ = (1.0 - r) * (1.0 + r)
            a = math.sqrt(as_)
            bs = (h - k) ** 2
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 16.0
            asr0 = -(bs / as_ + hk) / 2.0
            if asr0 > -100.0:
                bvn = a * math.exp(asr0) * (
                    1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                    + c * d * as_ * as_ / 5.0)
            if -hk < 100.0:
                b = math.sqrt(bs)
                sp = math.sqrt(tp) * float(ndtr(-b / a))
                bvn -= math.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
            a2 = a / 2.0
            xs = (a2 * (1.0 + t)) ** 2
            rs = np.sqrt(1.0 - xs)
            asr_v = -(bs / xs + hk) / 2.0
            mask = asr_v > -100.0
            if mask.any():
                sp_v = 1.0 + c * xs * (1.0 + d * xs)
                ep = np.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                bvn += a2 * float(np.sum(w[mask] * np.exp(asr_v[mask])
                                         * (ep[mask] - sp_v[mask])))
            bvn = -bvn / tp
        if r > 0.0:
            bvn += float(ndtr(-max(h, k)))
        else:
            bvn = -bvn + max(0.0, float(ndtr(-h) - ndtr(-k)))
    return min(1.0, max(0.0, bvn))


def _factorize_int(n: int) -> list[int]:
    factors = set()
    for p in primes_from_2_to(int(np.sqrt(n)) + 1):
        p = int(p)
        while n % p == 0:
            factors.add(p)
            n //= p
        if n == 1:
            break
    if n != 1:
        factors.add(n)
    return sorted(factors)


def _primitive_root(p: int) -> int:
    pm = p - 1
    factors = _factorize_int(pm)
    r = 2
    k = 0
    while k < len(factors):
        if pow(r, pm // factors[k], p) == 1:
            r += 1
            k = 0
        else:
            k += 1
    return r


@lru_cache(maxsize=64)
def _cbc_lattice(n_dim: int, n_samples: int) -> tuple[tuple[float, ...], int]:
    """Rank-1 lattice generator by fast component-by-component construction.

    ``n_samples`` is rounded down to a prime. Returns (generator vector in
    (0,1), actual sample count). Cached: construction runs FFTs.
    """
    primes = primes_from_2_to(n_samples + 1)
    n = int(primes[-1])
    bt = np.ones(n_dim)
    gm = np.hstack([1.0, 0.8 ** np.arange(n_dim - 1)])
    q = 1
    w = 0
    z = np.arange(1, n_dim + 1, dtype=np.int64)
    m = (n - 1) // 2
    g = _primitive_root(n)
    perm = np.ones(m, dtype=np.int64)
    for j in range(m - 1):
        perm[j + 1] = (g * perm[j]) % n
    perm = np.minimum(n - perm, perm)
    pn = perm / n
    c = pn * pn - pn + 1.0 / 6.0
    fc = fft(c)
    for s in range(1, n_dim):
        reordered = np.hstack([c[:w + 1][::-1], c[w + 1:m][::-1]])
        q = q * (bt[s - 1] + gm[s - 1] * reordered)
        w = int(ifft(fc * fft(q)).real.argmin())
        z[s] = perm[w]
    return tuple(z / n), n


def _orthant_batches(mean: np.ndarray, chol: np.ndarray, n_points: int,
                     n_batches: int, seed: int) -> np.ndarray:
    """Per-batch lattice estimates of P(mean + L z <= 0)."""
    k = mean.size
    gen, n = _cbc_lattice(k - 1, max(n_points, 11))
    gen = np.asarray(gen)
    idx = np.arange(1, n + 1)
    shifts = np.random.default_rng(seed).random((n_batches, k - 1))
    out = np.empty(n_batches)
    y = np.empty((k - 1, n))
    for b in range(n_batches):
        e = np.full(n, ndtr(-mean[0] / chol[0, 0]))
        f = e.copy()
        for i in range(1, k):
            z = gen[i - 1] * idx + shifts[b, i - 1]
            z -= z.astype(int)
            x = np.abs(2.0 * z - 1.0)  # tent periodization
            y[i - 1] = ndtri(np.clip(x * e, _TINY, 1.0 - 1e-16))
            s = chol[i, :i] @ y[:i]
            e = ndtr((-mean[i] - s) / chol[i, i])
            f *= e
        out[b] = f.mean()
    return out


def mvn_cdf_at_zero(mean, cov, tol: float = 1e-6, seed: int | None = None,
                    n_points: int | None = None, n_batches: int = 8,
                    max_points: int = 2 ** 21) -> float:
    """P(W <= 0) componentwise for W ~ N(mean, cov).

    k = 0 returns 1; k = 1 and k = 2 use exact formulas. For k >= 3 a
    randomized lattice rule doubles its size until 3.5 standard errors fall
    below ``tol`` (or ``max_points`` is hit). Passing ``n_points`` skips the
    adaptation and runs one fixed-size randomized rule - the fast path used
    inside the sampler. ``seed`` keys the randomization; by default it is
    derived from the argument bytes so equal inputs give equal outputs.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    k = mean.size
    if k == 0:
        return 1.0
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (k, k):
        raise ValueError(f"cov shape {cov.shape} does not match mean length {k}")
    if not (np.isfinite(tol) and tol > 0):
        raise ValueError("tol must be positive")
    if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
        raise ValueError("mean/cov contain non-finite entries")

    sd = np.sqrt(np.diag(cov))
    if np.any(~(sd > 0)):
        raise NotPositiveDefiniteError("covariance has non-positive diagonal")
    if k == 1:
        return float(ndtr(-mean[0] / sd[0]))
    if k == 2:
        r = cov[0, 1] / (sd[0] * sd[1])
        r = min(1.0, max(-1.0, r))
        return _bvnu(mean[0] / sd[0], mean[1] / sd[1], r)

    # Most restrictive coordinate first reduces the lattice variance.
    order = np.argsort(ndtr(-mean / sd))
    mean = mean[order]
    cov = cov[np.ix_(order, order)]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None

    if seed is None:
        seed = stable_seed(mean, cov)

    if n_points is not None:
        batches = _orthant_batches(mean, chol, n_points, max(2, n_batches // 2),
                                   stable_seed(n_points, base=seed))
        return float(np.clip(batches.mean(), 0.0, 1.0))

    n = 256
    while True:
        batches = _orthant_batches(mean, chol, n, n_batches,
                                   stable_seed(n, base=seed))
        est = batches.mean()
        err = 3.5 * batches.std(ddof=1) / math.sqrt(n_batches)
        if err <= tol or n >= max_points:
            return float(np.clip(est, 0.0, 1.0))
        n *= 2
