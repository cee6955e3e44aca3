"""Self-contained oracle checks behind the `verify` subcommand.

Each check prints one PASS/FAIL line; the suite returns overall success.
These are quick spot checks on small random instances - the full acceptance
battery lives in the test suite.
"""

from __future__ import annotations

import numpy as np

from .inference import bayesian_fdr, ols_estimates
from .likelihood import log_marginal_td, log_marginal_ti, mvn_cdf_at_zero
from .model import ExpressionData, Hyperparams, NetworkState
from .oracles import oracle_log_marginal

__all__ = ["run_verification"]


def _check(name: str, ok: bool, detail: str, out) -> bool:
    out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def run_verification(n_instances: int = 8, seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    hp = Hyperparams()
    all_ok = True

    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(0, 3))
        sigma = float(rng.uniform(0.2, 2.0))
        x = rng.normal(size=(n, k))
        y = -x @ rng.exponential(hp.c * np.sqrt(sigma), size=k) \
            + rng.normal(scale=np.sqrt(sigma), size=n)
        closed = log_marginal_ti(y, x, sigma, hp)
        oracle = oracle_log_marginal(y, x, sigma=sigma, hp=hp)
        worst = max(worst, abs(closed - oracle.log_value) / max(1.0, abs(oracle.log_value)))
    all_ok &= _check("marginal likelihood (time-invariant) vs quadrature",
                     worst < 1e-5, f"worst relative error {worst:.2e}", out)

    worst = 0.0
    for _ in range(max(2, n_instances // 2)):
        n1, n2, n3 = (int(rng.integers(1, 4)) for _ in range(3))
        n = n1 + n2 + n3
        sigma = float(rng.uniform(0.3, 1.5))
        x = rng.normal(size=(n, 1))
        x2 = np.zeros((n, 1))
        x2[n1:n1 + n2] = x[n1:n1 + n2]
        x3 = np.zeros((n, 1))
        x3[n1 + n2:] = x[n1 + n2:]
        y = rng.normal(scale=np.sqrt(sigma), size=n)
        closed = log_marginal_td(y, x, x2, x3, sigma, hp)
        oracle = oracle_log_marginal(y, x, x2, x3, sigma=sigma, hp=hp, nodes=72)
        worst = max(worst, abs(closed - oracle.log_value) / max(1.0, abs(oracle.log_value)))
    all_ok &= _check("marginal likelihood (time-dependent) vs quadrature",
                     worst < 1e-5, f"worst relative error {worst:.2e}", out)

    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(1, 3))
        sigma = float(rng.uniform(0.3, 1.5))
        x = rng.normal(size=(n, k))
        y = rng.normal(size=n)
        a = log_marginal_td(y, x, np.zeros((n, 0)), np.zeros((n, 0)), sigma, hp)
        b = log_marginal_ti(y, x, sigma, hp)
        worst = max(worst, abs(a - b))
    all_ok &= _check("time-dependent reduction identity", worst < 1e-10,
                     f"worst absolute gap {worst:.2e}", out)

    sds = np.array([1.0, 2.0, 0.5, 1.5, 3.0])
    mean = np.linspace(-1, 1, 5)
    exact = float(np.prod([mvn_cdf_at_zero([m], [[s * s]]) for m, s in zip(mean, sds)]))
    est = mvn_cdf_at_zero(mean, np.diag(sds ** 2))
    all_ok &= _check("orthant CDF diagonal factorization", abs(est - exact) < 1e-12,
                     f"gap {abs(est - exact):.2e}", out)

    cov = np.full((3, 3), 0.5)
    np.fill_diagonal(cov, 1.0)
    est = mvn_cdf_at_zero(np.zeros(3), cov, tol=1e-4)
    all_ok &= _check("orthant CDF equicorrelated k=3", abs(est - 0.25) < 1e-3,
                     f"estimate {est:.6f} vs closed form 0.25", out)

    P = rng.random((20, 10))
    f, n_sel = bayesian_fdr(P, 0.8)
    psi = 1 - P
    recount = psi[psi <= 0.2 + 1e-15]
    ok = n_sel == recount.size and (n_sel == 0 or f == recount.mean())
    all_ok &= _check("Bayesian FDR brute-force recount", bool(ok),
                     f"{n_sel} selected", out)

    n, m = 12, 5
    x = rng.normal(size=(n, m))
    y = rng.normal(size=(n, 2))
    y -= y.mean(axis=0)
    labels = np.repeat([1, 2, 3], 4)
    data = ExpressionData(y, x, time_labels=labels)
    net = NetworkState((rng.random((2, m)) < 0.5).astype(np.int8),
                       np.zeros((2, m), dtype=np.int8),
                       (rng.random((2, m)) < 0.3).astype(np.int8))
    a = ols_estimates(data, net, "time_dependent", method="factored")
    b = ols_estimates(data, net, "time_dependent", method="stacked")
    gap = max(np.abs(a.beta - b.beta).max(),
              np.abs(a.beta_dprime - b.beta_dprime).max())
    all_ok &= _check("time-dependent least squares: closed form vs stacked",
                     gap < 1e-8, f"max gap {gap:.2e}", out)

    out("verification " + ("PASSED" if all_ok else "FAILED"))
    return bool(all_ok)
