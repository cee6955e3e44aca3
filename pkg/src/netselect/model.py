"""Domain types and the prior probability model.

The regulatory graph is a fixed bipartite structure: M regulator variables
(columns of X) may point at G target variables (columns of Y), never at each
other. Edges are encoded by binary inclusion matrices; external association
scores shift each edge's prior inclusion probability through a logistic link
whose weights tau are themselves sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln, log_expit

from ._util import require_finite

__all__ = [
    "ExpressionData",
    "ScoreSet",
    "Hyperparams",
    "NetworkState",
    "ChainState",
    "edge_prior_prob",
    "edge_prior_logits",
    "log_prior_network",
    "log_prior_tau",
    "normalize_scores",
]

CENTERING_TOL = 1e-8


@dataclass(frozen=True)
class ExpressionData:
    """Aligned expression matrices: N samples x G targets and N x M regulators.

    Target columns must be centered (mean zero); regulator data is taken as
    loaded. ``time_labels`` (values in {1,2,3}) is only required for the
    time-dependent model, where the three groups must be contiguous.
    """

    Y: np.ndarray
    X: np.ndarray
    time_labels: Optional[np.ndarray] = None
    target_names: Optional[tuple] = None
    regulator_names: Optional[tuple] = None

    def __post_init__(self):
        Y = require_finite("Y", self.Y)
        X = require_finite("X", self.X)
        if Y.ndim != 2 or X.ndim != 2:
            raise ValueError("Y and X must be 2-D matrices")
        if Y.shape[0] != X.shape[0]:
            raise ValueError(f"sample counts differ: Y has {Y.shape[0]}, X has {X.shape[0]}")
        if Y.shape[0] < 2:
            raise ValueError("need at least 2 samples")
        col_means = Y.mean(axis=0)
        if np.any(np.abs(col_means) > CENTERING_TOL):
            raise ValueError("Y columns must be centered (subtract per-column means first)")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        if self.time_labels is not None:
            t = np.asarray(self.time_labels, dtype=int)
            if t.shape != (Y.shape[0],):
                raise ValueError("time_labels must have one entry per sample")
            if not np.all(np.isin(t, [1, 2, 3])):
                raise ValueError("time_labels must take values in {1, 2, 3}")
            object.__setattr__(self, "time_labels", t)
        for nm, count, label in ((self.target_names, Y.shape[1], "target_names"),
                                 (self.regulator_names, X.shape[1], "regulator_names")):
            if nm is not None and len(nm) != count:
                raise ValueError(f"{label} length does not match matrix")

    @property
    def n_samples(self) -> int:
        return self.Y.shape[0]

    @property
    def n_targets(self) -> int:
        return self.Y.shape[1]

    @property
    def n_regulators(self) -> int:
        return self.X.shape[1]

    def time_block_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row indices of the three time groups; validates contiguity."""
        if self.time_labels is None:
            raise ValueError("time-dependent mode requires time_labels")
        t = self.time_labels
        if np.any(np.diff(t) < 0):
            raise ValueError("time_labels must be sorted into contiguous groups")
        return tuple(np.flatnonzero(t == v) for v in (1, 2, 3))

    def padded_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """N x M copies of X zeroed outside time blocks 2 and 3 respectively."""
        rows2, rows3 = self.time_block_rows()[1:]
        X2 = np.zeros_like(self.X)
        X3 = np.zeros_like(self.X)
        X2[rows2] = self.X[rows2]
        X3[rows3] = self.X[rows3]
        return X2, X3


@dataclass(frozen=True)
class ScoreSet:
    """J nonnegative G x M association-score matrices, one per source.

    Zero means "no predicted association". Feed raw sets through
    :func:`normalize_scores` before using them in the prior.
    """

    scores: tuple
    source_names: tuple

    def __init__(self, scores: Sequence[np.ndarray], source_names: Optional[Sequence[str]] = None):
        mats = tuple(require_finite(f"score source {i}", s) for i, s in enumerate(scores))
        if not mats:
            raise ValueError("ScoreSet needs at least one source")
        shape = mats[0].shape
        if any(m.shape != shape for m in mats):
            raise ValueError("all score matrices must share the same G x M shape")
        if source_names is None:
            source_names = tuple(f"source{i+1}" for i in range(len(mats)))
        if len(source_names) != len(mats):
            raise ValueError("one name per score source required")
        object.__setattr__(self, "scores", mats)
        object.__setattr__(self, "source_names", tuple(source_names))

    @property
    def n_sources(self) -> int:
        return len(self.scores)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores[0].shape

    def stacked(self) -> np.ndarray:
        """(J, G, M) view used by vectorized prior evaluations."""
        return np.stack(self.scores, axis=0)


@dataclass(frozen=True)
class Hyperparams:
    """Fixed model and proposal constants.

    c           scale of the positive coefficient prior (ties prior mean to
                c * sigma_g^(1/2)); also sets the ridge of the offset priors.
    delta, d    error-variance prior: 1/sigma_g ~ Gamma((delta+k_g)/2, rate d/2).
    eta         edge-prior intercept on the logit scale.
    eta_b       Bernoulli probability for time-offset inclusion matrices.
    a_tau,b_tau Gamma(shape, rate) hyperprior on each score weight tau_j.
    zeta        variance factor of the time-offset coefficient priors (<= 1).
    phi         probability of an add/delete move (vs swap).
    lam         probability of moving the base matrix (vs offsets) in
                time-dependent runs.
    tau_prop_var  variance of the truncated-normal tau random walk.
    e_sigma     variance of the moment-matched Gamma sigma proposal. No
                default on purpose: tune it with a pilot run (`tune`).
    """

    c: float = 0.7
    delta: float = 3.0
    d: float = 0.2
    eta: float = -3.0
    eta_b: float = 0.05
    a_tau: float = 1.5
    b_tau: float = 0.2
    zeta: float = 1.0
    phi: float = 0.5
    lam: float = 0.5
    tau_prop_var: float = 0.01
    e_sigma: Optional[float] = None

    def __post_init__(self):
        for name in ("c", "delta", "d", "a_tau", "b_tau", "zeta", "tau_prop_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("eta_b", "phi", "lam"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not np.isfinite(self.eta):
            raise ValueError("eta must be finite")
        if self.e_sigma is not None and not (np.isfinite(self.e_sigma) and self.e_sigma > 0):
            raise ValueError("e_sigma must be positive when given")


def _row_sums(mat: np.ndarray) -> np.ndarray:
    return mat.sum(axis=1).astype(np.int64)


@dataclass
class NetworkState:
    """Binary inclusion matrices with cached row sums.

    ``R`` is the base edge matrix; ``R_prime``/``R_dprime`` hold the
    time-offset indicators and exist only in time-dependent mode. In the
    constrained strategy an offset indicator may be 1 only where the base
    entry is 1.
    """

    R: np.ndarray
    R_prime: Optional[np.ndarray] = None
    R_dprime: Optional[np.ndarray] = None
    k: np.ndarray = field(init=False)
    k2: Optional[np.ndarray] = field(init=False, default=None)
    k3: Optional[np.ndarray] = field(init=False, default=None)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.int8)
        if self.R.ndim != 2:
            raise ValueError("R must be a G x M matrix")
        if (self.R_prime is None) != (self.R_dprime is None):
            raise ValueError("R_prime and R_dprime must be given together")
        if self.R_prime is not None:
            self.R_prime = np.asarray(self.R_prime, dtype=np.int8)
            self.R_dprime = np.asarray(self.R_dprime, dtype=np.int8)
            if self.R_prime.shape != self.R.shape or self.R_dprime.shape != self.R.shape:
                raise ValueError("offset matrices must match R's shape")
        self.refresh_counts()

    @property
    def time_dependent(self) -> bool:
        return self.R_prime is not None

    def refresh_counts(self) -> None:
        self.k = _row_sums(self.R)
        if self.time_dependent:
            self.k2 = _row_sums(self.R_prime)
            self.k3 = _row_sums(self.R_dprime)

    def validate(self, constrained: bool = True) -> None:
        """Check row-sum bookkeeping and (optionally) the nesting constraint."""
        if not np.array_equal(self.k, _row_sums(self.R)):
            raise AssertionError("cached k out of sync with R")
        if self.time_dependent:
            if not np.array_equal(self.k2, _row_sums(self.R_prime)):
                raise AssertionError("cached k2 out of sync with R_prime")
            if not np.array_equal(self.k3, _row_sums(self.R_dprime)):
                raise AssertionError("cached k3 out of sync with R_dprime")
            if constrained:
                if np.any(self.R_prime > self.R) or np.any(self.R_dprime > self.R):
                    raise AssertionError("nesting constraint violated: offsets outside R")

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.R.copy(),
            None if self.R_prime is None else self.R_prime.copy(),
            None if self.R_dprime is None else self.R_dprime.copy(),
        )


@dataclass
class ChainState:
    """Everything a chain owns: the network, tau, sigma, position and seed."""

    net: NetworkState
    tau: np.ndarray
    sigma: np.ndarray
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if np.any(self.tau <= 0) or not np.all(np.isfinite(self.tau)):
            raise ValueError("all tau entries must be positive and finite")
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("all sigma entries must be positive and finite")

    def copy(self) -> "ChainState":
        return ChainState(self.net.copy(), self.tau.copy(), self.sigma.copy(),
                          self.iteration, self.seed)


def edge_prior_prob(s_row, eta: float, tau) -> float:
    """Prior inclusion probability exp(eta + tau.s) / (1 + exp(eta + tau.s)).

    Stable for large exponents; result lies strictly inside (0, 1).
    """
    s = require_finite("scores", s_row)
    t = require_finite("tau", tau)
    if s.shape != t.shape:
        raise ValueError("score row and tau must have the same length")
    return float(expit(eta + float(t @ s)))


def edge_prior_logits(scores: ScoreSet, eta: float, tau) -> np.ndarray:
    """G x M matrix of logit prior probabilities eta + sum_j tau_j s_j."""
    t = require_finite("tau", tau)
    if t.shape != (scores.n_sources,):
        raise ValueError("tau must have one weight per score source")
    return eta + np.tensordot(t, scores.stacked(), axes=1)


def log_prior_network(net: NetworkState, scores: ScoreSet, hp: Hyperparams, tau) -> float:
    """Log prior of the inclusion matrices.

    Base entries are independent Bernoulli with score-modulated probabilities;
    offset entries (time-dependent mode) are Bernoulli(eta_b) and never see
    the scores.
    """
    if scores.shape != net.R.shape:
        raise ValueError(f"score shape {scores.shape} does not match network {net.R.shape}")
    logits = edge_prior_logits(scores, hp.eta, tau)
    r = net.R.astype(float)
    total = float(np.sum(r * logits) + np.sum(log_expit(-logits)))
    if net.time_dependent:
        total += _log_prior_offsets(net, hp)
    return total


def _log_prior_offsets(net: NetworkState, hp: Hyperparams) -> float:
    n_cells = net.R.size
    lp1 = np.log(hp.eta_b)
    lp0 = np.log1p(-hp.eta_b)
    n1 = int(net.R_prime.sum()) + int(net.R_dprime.sum())
    return n1 * lp1 + (2 * n_cells - n1) * lp0


def log_prior_tau(tau, a_tau: float, b_tau: float) -> float:
    """Sum of independent Gamma(shape a_tau, rate b_tau) log densities.

    Returns -inf if any component is non-positive (zero prior mass).
    """
    t = np.asarray(tau, dtype=float)
    if np.any(~np.isfinite(t)):
        raise ValueError("tau contains non-finite entries")
    if np.any(t <= 0):
        return float("-inf")
    j = t.size
    return float(np.sum((a_tau - 1.0) * np.log(t) - b_tau * t)
                 + j * (a_tau * np.log(b_tau) - gammaln(a_tau)))


def normalize_scores(raw: ScoreSet) -> ScoreSet:
    """Map every source onto [0, 1] by min-max over its nonzero entries.

    Zeros ("no prediction") stay zero. A source whose present values are all
    negative is interpreted as "more negative = stronger" and sign-flipped
    before scaling, so stronger association always maps to a larger value.
    All-zero sources pass through unchanged; a source with a single distinct
    nonzero value maps it to 1.
    """
    out = []
    for mat in raw.scores:
        present = mat != 0
        if not present.any():
            out.append(mat.copy())
            continue
        vals = mat[present]
        if np.all(vals < 0):
            vals = -vals
        elif np.any(vals < 0):
            raise ValueError(
                "score source mixes positive and negative values; orient it "
                "(one sign convention per source) before normalizing")
        lo, hi = vals.min(), vals.max()
        scaled = np.zeros_like(mat, dtype=float)
        if hi == lo:
            scaled[present] = 1.0
        else:
            scaled[present] = (vals - lo) / (hi - lo)
        out.append(scaled)
    return ScoreSet(out, raw.source_names)
