"""Posterior summarization of chain traces.

Marginal inclusion probabilities are sample proportions; edges are called by
thresholding them, with a Newton-style Bayesian false discovery rate attached
to each cutoff. Coefficients come in two flavors: posterior means of the
positive-orthant-truncated normal (reported with the sign flip, so an
inferred down-regulation is negative), and unconstrained least-squares
estimates used as the negativity diagnostic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr, ndtr, ndtri_exp

from .likelihood import TDWorkspace
from .model import ExpressionData, Hyperparams, NetworkState
from .sampler import TIME_DEPENDENT, TIME_INVARIANT, ChainTrace

__all__ = [
    "InclusionProbs",
    "CoefficientEstimates",
    "OLSEstimates",
    "PosteriorSummary",
    "inclusion_probs",
    "bayesian_fdr",
    "fdr_curve",
    "select_edges",
    "truncated_mvn_mean",
    "beta_posterior_mean",
    "ols_estimates",
    "r_squared",
    "chain_agreement",
    "summarize",
]

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# inclusion probabilities, FDR, edge calls


@dataclass(frozen=True)
class InclusionProbs:
    P: np.ndarray
    P_prime: Optional[np.ndarray] = None
    P_dprime: Optional[np.ndarray] = None


def inclusion_probs(trace: ChainTrace) -> InclusionProbs:
    """Proportion of kept samples with each indicator switched on."""
    if trace.n_kept < 1:
        raise ValueError("trace holds no post-burn-in samples")
    p = trace.incl_counts / trace.n_kept
    if trace.incl_counts_p is None:
        return InclusionProbs(p)
    return InclusionProbs(p, trace.incl_counts_p / trace.n_kept,
                          trace.incl_counts_pp / trace.n_kept)


def pooled_inclusion_probs(traces: Sequence[ChainTrace]) -> InclusionProbs:
    """Counts pooled over chains (chains weighted by their sample counts)."""
    n = sum(t.n_kept for t in traces)
    if n < 1:
        raise ValueError("no post-burn-in samples across traces")
    p = sum(t.incl_counts for t in traces) / n
    if traces[0].incl_counts_p is None:
        return InclusionProbs(p)
    return InclusionProbs(p,
                          sum(t.incl_counts_p for t in traces) / n,
                          sum(t.incl_counts_pp for t in traces) / n)


def bayesian_fdr(P: np.ndarray, cutoff: float) -> tuple[float, int]:
    """Expected false-detection rate among edges with P >= cutoff.

    With psi = 1 - P and kappa = 1 - cutoff, returns (mean of psi over
    {psi <= kappa}, size of that list); an empty list reports (0.0, 0).
    """
    if not (0.0 < cutoff <= 1.0):
        raise ValueError("cutoff must lie in (0, 1]")
    P = np.asarray(P, dtype=float)
    if np.any((P < 0) | (P > 1)):
        raise ValueError("P entries must lie in [0, 1]")
    psi = 1.0 - P
    mask = psi <= (1.0 - cutoff) + 1e-15
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    return float(psi[mask].mean()), n


def fdr_curve(P: np.ndarray, cutoffs: Optional[Sequence[float]] = None
              ) -> list[tuple[float, int, float]]:
    """(cutoff, selected count, FDR) rows for a grid of cutoffs."""
    if cutoffs is None:
        cutoffs = [round(0.5 + 0.05 * i, 2) for i in range(10)] + [0.99]
    rows = []
    for k in cutoffs:
        f, n = bayesian_fdr(P, float(k))
        rows.append((float(k), n, f))
    return rows


def select_edges(P: np.ndarray, cutoff: float) -> list[tuple[int, int, float]]:
    """All edges with P >= cutoff, strongest first, (g, m)-lexicographic ties."""
    if not (0.0 < cutoff <= 1.0):
        raise ValueError("cutoff must lie in (0, 1]")
    P = np.asarray(P, dtype=float)
    gs, ms = np.nonzero(P >= cutoff)
    edges = [(int(g), int(m), float(P[g, m])) for g, m in zip(gs, ms)]
    edges.sort(key=lambda e: (-e[2], e[0], e[1]))
    return edges


# ---------------------------------------------------------------------------
# truncated-normal coefficient posterior


def _tn_positive_draw(mu: np.ndarray, sd: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-survival draw from N(mu, sd^2) restricted to (0, inf).

    Works far into the tail: the survival mass P(X > 0) is carried in log
    space, so mu << 0 coordinates still return valid positive draws.
    """
    log_v = np.log(np.clip(u, 1e-300, 1.0)) + log_ndtr(mu / sd)
    return mu - sd * ndtri_exp(np.clip(log_v, -700.0, -1e-300))


def _tn1_mean(mu: float, sd: float) -> float:
    """Exact mean of a univariate normal truncated to (0, inf)."""
    z = mu / sd
    # phi(z)/Phi(z) via logs to survive z << 0
    log_ratio = -0.5 * z * z - np.log(_SQRT_2PI) - log_ndtr(z)
    return mu + sd * float(np.exp(log_ratio))


def truncated_mvn_mean(loc, cov, *, se_tol: float = 1e-3, seed: int = 0,
                       n_chains: int = 64, burn: int = 300,
                       max_sweeps: int = 60_000) -> tuple[np.ndarray, np.ndarray]:
    """Mean of N(loc, cov) restricted to the positive orthant, with MC SE.

    Univariate case is exact. Otherwise: n_chains independent coordinatewise
    Gibbs chains run in vectorized lockstep; the standard error comes from
    the spread of per-chain means, and sweeps continue until it drops below
    ``se_tol`` for every coordinate (or ``max_sweeps`` is hit).
    """
    loc = np.atleast_1d(np.asarray(loc, dtype=float))
    k = loc.size
    if k == 0:
        return np.zeros(0), np.zeros(0)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if k == 1:
        return np.array([_tn1_mean(loc[0], float(np.sqrt(cov[0, 0])))]), np.zeros(1)

    prec = np.linalg.inv(cov)
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    rng = np.random.default_rng(seed)
    x = np.tile(np.where(loc > 0, loc, 0.5 * cond_sd), (n_chains, 1))

    sums = np.zeros((n_chains, k))
    count = 0

    def sweep():
        for i in range(k):
            s = (x - loc) @ prec[:, i]
            mu_i = loc[i] - (s - prec[i, i] * (x[:, i] - loc[i])) / prec[i, i]
            x[:, i] = _tn_positive_draw(mu_i, cond_sd[i], rng.random(n_chains))

    for _ in range(burn):
        sweep()
    block = 500
    while True:
        for _ in range(block):
            sweep()
            sums += x
        count += block
        chain_means = sums / count
        mean = chain_means.mean(axis=0)
        se = chain_means.std(axis=0, ddof=1) / np.sqrt(n_chains)
        if np.all(se <= se_tol) or count >= max_sweeps:
            return mean, se


@dataclass
class CoefficientEstimates:
    """Posterior-mean coefficients on the reported (signed) scale.

    ``beta_hat`` is zero outside the conditioning network and negative where
    the model infers down-regulation; ``internal_mean`` keeps the raw
    positive-orthant means. Offset estimates are exact Gaussian means.
    """

    beta_hat: np.ndarray
    internal_mean: np.ndarray
    mc_se: np.ndarray
    beta_hat_prime: Optional[np.ndarray] = None
    beta_hat_dprime: Optional[np.ndarray] = None


def beta_posterior_mean(data: ExpressionData, net: NetworkState, sigma, hp: Hyperparams,
                        mode: str = TIME_INVARIANT, *, se_tol: float = 1e-3,
                        seed: int = 0) -> CoefficientEstimates:
    """Coefficient posterior means conditional on a fixed network and sigma.

    Base coefficients are means of the positive-orthant-truncated normal
    (Gibbs-estimated beyond one dimension, MC standard error <= ``se_tol``
    per coordinate); time-offset coefficients are exact Gaussian means.
    """
    sigma = np.asarray(sigma, dtype=float)
    G, M = net.R.shape
    beta = np.zeros((G, M))
    internal = np.zeros((G, M))
    mc_se = np.zeros((G, M))
    td = mode == TIME_DEPENDENT
    bp = np.zeros((G, M)) if td else None
    bpp = np.zeros((G, M)) if td else None
    pads = data.padded_offsets() if td else None

    for g in range(G):
        sel = np.flatnonzero(net.R[g])
        sig = float(sigma[g])
        if td:
            sel2 = np.flatnonzero(net.R_prime[g])
            sel3 = np.flatnonzero(net.R_dprime[g])
            x2s = pads[0][:, sel2]
            x3s = pads[1][:, sel3]
            if len(sel):
                ws = TDWorkspace.build(data.Y[:, g], data.X[:, sel], x2s, x3s, hp)
                f_vec = ws.f0 - (np.sqrt(sig) / hp.c) * np.ones(len(sel))
                loc = ws.e_inv @ f_vec
                mean, se = truncated_mvn_mean(loc, sig * ws.e_inv, se_tol=se_tol,
                                              seed=seed + g)
                internal[g, sel] = mean
                mc_se[g, sel] = se
                beta[g, sel] = -mean
            if len(sel2):
                bp[g, sel2] = -_offset_gaussian_mean(
                    data.Y[:, g], data.X[:, sel], x2s, x3s, sig, hp, which=2)
            if len(sel3):
                bpp[g, sel3] = -_offset_gaussian_mean(
                    data.Y[:, g], data.X[:, sel], x2s, x3s, sig, hp, which=3)
        elif len(sel):
            x_sel = data.X[:, sel]
            gram = x_sel.T @ x_sel
            cf = cho_factor(gram, lower=True)
            cvec = -x_sel.T @ data.Y[:, g] - (np.sqrt(sig) / hp.c) * np.ones(len(sel))
            loc = cho_solve(cf, cvec)
            u = cho_solve(cf, np.eye(len(sel)))
            mean, se = truncated_mvn_mean(loc, sig * u, se_tol=se_tol, seed=seed + g)
            internal[g, sel] = mean
            mc_se[g, sel] = se
            beta[g, sel] = -mean
    return CoefficientEstimates(beta, internal, mc_se, bp, bpp)


def _offset_gaussian_mean(y, x_sel, x2s, x3s, sigma, hp: Hyperparams, which: int
                          ) -> np.ndarray:
    """Exact Gaussian posterior mean of one offset block, the other integrated out.

    For block 3: J = X3'X3 - X3'X L^{-1} X'X3 + (zeta c)^{-1} I and
    h = -X3'y + X3'X L^{-1} v0 with L the base precision after projecting out
    block 2 and v0 its shifted cross-moment. Block 2 is the mirror image.
    """
    ridge = 1.0 / (hp.c * hp.zeta)
    if which == 2:
        x_tgt, x_oth = x2s, x3s
    else:
        x_tgt, x_oth = x3s, x2s
    k = x_sel.shape[1]
    kt = x_tgt.shape[1]
    d_mat = x_oth.T @ x_oth + ridge * np.eye(x_oth.shape[1])
    if k:
        xo = x_sel.T @ x_oth
        if x_oth.shape[1]:
            l_mat = x_sel.T @ x_sel - xo @ np.linalg.solve(d_mat, xo.T)
            v0 = (x_sel.T @ y - xo @ np.linalg.solve(d_mat, x_oth.T @ y)
                  + (np.sqrt(sigma) / hp.c) * np.ones(k))
        else:
            l_mat = x_sel.T @ x_sel
            v0 = x_sel.T @ y + (np.sqrt(sigma) / hp.c) * np.ones(k)
        xt = x_tgt.T @ x_sel
        j_mat = x_tgt.T @ x_tgt - xt @ np.linalg.solve(l_mat, xt.T) + ridge * np.eye(kt)
        h = -x_tgt.T @ y + xt @ np.linalg.solve(l_mat, v0)
    else:
        j_mat = x_tgt.T @ x_tgt + ridge * np.eye(kt)
        h = -x_tgt.T @ y
    return np.linalg.solve(j_mat, h)


# ---------------------------------------------------------------------------
# least squares (negativity diagnostic)


@dataclass
class OLSEstimates:
    """Unconstrained least-squares fits of Y on X over the selected design.

    No sign flip and no positivity constraint: mostly-negative base entries
    are the expected signature of down-regulation.
    """

    beta: np.ndarray
    beta_prime: Optional[np.ndarray] = None
    beta_dprime: Optional[np.ndarray] = None
    skipped: list = field(default_factory=list)


def ols_estimates(data: ExpressionData, net: NetworkState,
                  mode: str = TIME_INVARIANT, method: str = "factored") -> OLSEstimates:
    """Per-gene OLS over the selected design.

    Time-dependent mode solves the coupled three-block system; ``factored``
    uses the reduced closed form (K-matrix elimination of the offset blocks),
    ``stacked`` solves the joint normal equations directly. Genes with a
    singular design (or singular K) are skipped and reported.
    """
    G, M = net.R.shape
    td = mode == TIME_DEPENDENT
    beta = np.zeros((G, M))
    bp = np.zeros((G, M)) if td else None
    bpp = np.zeros((G, M)) if td else None
    skipped: list[int] = []
    pads = data.padded_offsets() if td else None

    for g in range(G):
        sel = np.flatnonzero(net.R[g])
        y = data.Y[:, g]
        try:
            if not td:
                if not len(sel):
                    continue
                xs = data.X[:, sel]
                beta[g, sel] = _solve_spd(xs.T @ xs, xs.T @ y)
                continue
            sel2 = np.flatnonzero(net.R_prime[g])
            sel3 = np.flatnonzero(net.R_dprime[g])
            xs = data.X[:, sel]
            x2s = pads[0][:, sel2]
            x3s = pads[1][:, sel3]
            if method == "stacked":
                b, b2, b3 = _ols_td_stacked(y, xs, x2s, x3s)
            elif method == "factored":
                b, b2, b3 = _ols_td_factored(y, xs, x2s, x3s)
            else:
                raise ValueError(f"unknown method {method!r}")
            beta[g, sel] = b
            bp[g, sel2] = b2
            bpp[g, sel3] = b3
        except np.linalg.LinAlgError:
            skipped.append(g)
    return OLSEstimates(beta, bp, bpp, skipped)


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cho_solve(cho_factor(a, lower=True), b)


def _ols_td_stacked(y, xs, x2s, x3s):
    design = np.hstack([xs, x2s, x3s])
    k, k2 = xs.shape[1], x2s.shape[1]
    if design.shape[1] == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    coef = _solve_spd(design.T @ design, design.T @ y)
    return coef[:k], coef[k:k + k2], coef[k + k2:]


def _ols_td_factored(y, xs, x2s, x3s):
    """Closed-form elimination: solve K b = b_OLS - corrections, then back-substitute."""
    k, k2, k3 = xs.shape[1], x2s.shape[1], x3s.shape[1]
    g2 = x2s.T @ x2s
    g3 = x3s.T @ x3s
    if k:
        gram = xs.T @ xs
        b_ols = _solve_spd(gram, xs.T @ y)
        kmat = np.eye(k)
        rhs = b_ols.copy()
        if k2:
            m2 = xs.T @ x2s
            kmat -= _solve_spd(gram, m2 @ _solve_spd(g2, m2.T))
            rhs -= _solve_spd(gram, m2 @ _solve_spd(g2, x2s.T @ y))
        if k3:
            m3 = xs.T @ x3s
            kmat -= _solve_spd(gram, m3 @ _solve_spd(g3, m3.T))
            rhs -= _solve_spd(gram, m3 @ _solve_spd(g3, x3s.T @ y))
        b = np.linalg.solve(kmat, rhs)
    else:
        b = np.zeros(0)
    b2 = _solve_spd(g2, x2s.T @ (y - xs @ b)) if k2 else np.zeros(0)
    b3 = _solve_spd(g3, x3s.T @ (y - xs @ b)) if k3 else np.zeros(0)
    return b, b2, b3


# ---------------------------------------------------------------------------
# fit quality and agreement


def r_squared(data: ExpressionData, beta_hat: np.ndarray, mode: str = TIME_INVARIANT,
              beta_hat_prime: Optional[np.ndarray] = None,
              beta_hat_dprime: Optional[np.ndarray] = None
              ) -> tuple[np.ndarray, float]:
    """Per-gene and aggregate R^2 of the signed fitted model.

    ``beta_hat`` is on the reported scale, so fitted values are X @ beta_row
    (plus padded offset terms in time-dependent mode). Genes with zero
    variance are excluded with a warning and carry NaN.
    """
    G = data.n_targets
    fitted = data.X @ np.asarray(beta_hat, dtype=float).T
    if mode == TIME_DEPENDENT:
        x2, x3 = data.padded_offsets()
        if beta_hat_prime is not None:
            fitted = fitted + x2 @ np.asarray(beta_hat_prime, dtype=float).T
        if beta_hat_dprime is not None:
            fitted = fitted + x3 @ np.asarray(beta_hat_dprime, dtype=float).T
    resid = data.Y - fitted
    rss = np.sum(resid ** 2, axis=0)
    tss = np.sum(data.Y ** 2, axis=0)
    ok = tss > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-variance genes excluded from R^2")
    per_gene = np.full(G, np.nan)
    per_gene[ok] = 1.0 - rss[ok] / tss[ok]
    aggregate = 1.0 - float(rss[ok].sum()) / float(tss[ok].sum())
    return per_gene, aggregate


def chain_agreement(trace_a: ChainTrace, trace_b: ChainTrace) -> float:
    """Pearson correlation of the two chains' inclusion-probability matrices."""
    pa = inclusion_probs(trace_a).P.ravel()
    pb = inclusion_probs(trace_b).P.ravel()
    if pa.shape != pb.shape:
        raise ValueError("traces have different network shapes")
    if pa.std() == 0 or pb.std() == 0:
        raise ValueError("inclusion probabilities are constant; correlation undefined")
    return float(np.corrcoef(pa, pb)[0, 1])


# ---------------------------------------------------------------------------
# end-to-end summary


@dataclass
class PosteriorSummary:
    """Everything the reporting path exports."""

    mode: str
    P: np.ndarray
    P_prime: Optional[np.ndarray]
    P_dprime: Optional[np.ndarray]
    beta_hat: np.ndarray
    beta_hat_prime: Optional[np.ndarray]
    beta_hat_dprime: Optional[np.ndarray]
    ols_hat: np.ndarray
    edges: list
    edge_cutoff: float
    coef_cutoff: float
    offset_cutoff: float
    fdr_at_cutoff: float
    n_at_cutoff: int
    fdr_table: list
    r2_per_gene: np.ndarray
    r2_aggregate: float
    tau_quantiles: dict
    sigma_mean: np.ndarray
    chain_diag: dict
    accept_stats: list
    logpost_traces: list
    size_traces: list
    ols_skipped: list


def summarize(traces: Sequence[ChainTrace], data: ExpressionData, hp: Hyperparams, *,
              edge_cutoff: float = 0.8, coef_cutoff: float = 0.15,
              offset_cutoff: float = 0.1, fdr_cutoffs: Optional[Sequence[float]] = None,
              se_tol: float = 1e-3, seed: int = 0) -> PosteriorSummary:
    """Pool chains and produce the full posterior report.

    Coefficients and R^2 condition on the thresholded network (base entries
    at ``coef_cutoff``, offsets at ``offset_cutoff``); the edge list uses
    the stricter ``edge_cutoff``.
    """
    if not traces:
        raise ValueError("need at least one trace")
    mode = traces[0].mode
    if any(t.mode != mode for t in traces):
        raise ValueError("traces mix time-invariant and time-dependent runs")
    if len({t.data_fingerprint for t in traces}) > 1:
        raise ValueError("traces were produced from different data")

    probs = pooled_inclusion_probs(traces)
    td = mode == TIME_DEPENDENT

    R = (probs.P >= coef_cutoff).astype(np.int8)
    if td:
        net = NetworkState(R, (probs.P_prime >= offset_cutoff).astype(np.int8),
                           (probs.P_dprime >= offset_cutoff).astype(np.int8))
    else:
        net = NetworkState(R)

    sigma_samples = [t.sigma_samples for t in traces if t.sigma_samples.size]
    if sigma_samples:
        sigma_mean = np.vstack(sigma_samples).mean(axis=0)
    else:
        sigma_mean = traces[0].final_state.sigma

    coef = beta_posterior_mean(data, net, sigma_mean, hp, mode,
                               se_tol=se_tol, seed=seed)
    ols = ols_estimates(data, net, mode)
    per_gene, aggregate = r_squared(data, coef.beta_hat, mode,
                                    coef.beta_hat_prime, coef.beta_hat_dprime)

    fdr, n_sel = bayesian_fdr(probs.P, edge_cutoff)
    table = fdr_curve(probs.P, fdr_cutoffs)
    edges = select_edges(probs.P, edge_cutoff)

    tau_all = np.vstack([t.tau_samples for t in traces if t.tau_samples.size]) \
        if any(t.tau_samples.size for t in traces) else np.zeros((0, 0))
    tau_q = {}
    if tau_all.size:
        qs = np.percentile(tau_all, [2.5, 25, 50, 75, 97.5], axis=0)
        tau_q = {"q025": qs[0].tolist(), "q25": qs[1].tolist(), "median": qs[2].tolist(),
                 "q75": qs[3].tolist(), "q975": qs[4].tolist(),
                 "mean": tau_all.mean(axis=0).tolist()}

    diag = {}
    for i in range(len(traces)):
        for j in range(i + 1, len(traces)):
            try:
                diag[f"corr_{i}_{j}"] = chain_agreement(traces[i], traces[j])
            except ValueError:
                diag[f"corr_{i}_{j}"] = float("nan")

    return PosteriorSummary(
        mode=mode, P=probs.P, P_prime=probs.P_prime, P_dprime=probs.P_dprime,
        beta_hat=coef.beta_hat, beta_hat_prime=coef.beta_hat_prime,
        beta_hat_dprime=coef.beta_hat_dprime, ols_hat=ols.beta,
        edges=edges, edge_cutoff=edge_cutoff, coef_cutoff=coef_cutoff,
        offset_cutoff=offset_cutoff, fdr_at_cutoff=fdr, n_at_cutoff=n_sel,
        fdr_table=table, r2_per_gene=per_gene, r2_aggregate=aggregate,
        tau_quantiles=tau_q, sigma_mean=sigma_mean, chain_diag=diag,
        accept_stats=[t.accept_stats for t in traces],
        logpost_traces=[t.logpost_trace for t in traces],
        size_traces=[t.size_trace for t in traces],
        ols_skipped=ols.skipped)
