"""Metropolis-Hastings-within-Gibbs engine over the network space.

Each iteration performs, in order:

1. one symmetric network move (add/delete a single inclusion indicator or
   swap an active/inactive pair; in time-dependent mode the base or one of
   the offset matrices is picked first),
2. a truncated-normal random-walk update of every score weight tau_j,
3. a moment-matched Gamma proposal update of every error variance sigma_g.

Only the affected gene's marginal likelihood is recomputed for a network
move (the likelihood factorizes over targets). Runs are bit-reproducible
given the seed, including resumption from a checkpoint: the pseudorandom
generator state rides along in the checkpoint and the quasi-Monte Carlo
orthant evaluations are keyed by argument content rather than by draw order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gammaln, log_expit, log_ndtr, ndtr, ndtri

from . import checkpoint as ckpt
from .likelihood import MarginalWorkspace, SingularModelError, TDWorkspace
from .model import (ChainState, ExpressionData, Hyperparams, NetworkState,
                    ScoreSet, edge_prior_logits, log_prior_tau)

__all__ = [
    "MoveProposal",
    "ChainConfig",
    "ChainTrace",
    "Chain",
    "propose_network_move",
    "mh_accept_network",
    "update_tau",
    "update_sigma",
    "run_chain",
    "initial_chain_state",
    "pilot_tune",
]

TIME_INVARIANT = "time_invariant"
TIME_DEPENDENT = "time_dependent"
_TARGETS = ("R", "Rp", "Rpp")
_MEMO_CAP = 1 << 20


@dataclass(frozen=True)
class MoveProposal:
    """One proposed flip (add/delete), pair of flips (swap), or null move."""

    kind: str                  # "add_delete" | "swap" | "none"
    target: str                # "R" | "Rp" | "Rpp"
    cells: tuple = ()          # ((g, m), ...) one cell for add/delete, two for swap
    new_values: tuple = ()     # parallel to cells

    def affected_genes(self) -> tuple:
        return tuple(sorted({g for g, _ in self.cells}))


@dataclass
class ChainConfig:
    """Run-length, mode and recording knobs for one chain."""

    iterations: int
    burn_in: int = 0
    thinning: int = 1
    mode: str = TIME_INVARIANT
    constrained: bool = True
    seed: int = 0
    initial_edges: Optional[int] = None     # default: one per target gene
    update_network: bool = True
    update_tau: bool = True
    update_sigma: bool = True
    row_swap: bool = False                  # restrict swaps to within one gene row
    record_visits: bool = False
    record_sigma: bool = True
    record_tau: bool = True
    trace_stride: int = 1
    audit_every: int = 0                    # 0 disables the from-scratch audit
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 0
    phi_points: int = 256                   # lattice size for k >= 3 orthant CDFs

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thinning < 1 or self.trace_stride < 1:
            raise ValueError("thinning and trace_stride must be >= 1")
        if self.mode not in (TIME_INVARIANT, TIME_DEPENDENT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ValueError("checkpoint_every needs a checkpoint_path")


# ---------------------------------------------------------------------------
# proposals


def _eligible_masks(net: NetworkState, target: str, constrained: bool):
    """Boolean (addable, deletable) masks for flips of the target matrix."""
    if target == "R":
        addable = net.R == 0
        if constrained and net.time_dependent:
            deletable = (net.R == 1) & (net.R_prime == 0) & (net.R_dprime == 0)
        else:
            deletable = net.R == 1
    else:
        mat = net.R_prime if target == "Rp" else net.R_dprime
        addable = (mat == 0) & (net.R == 1) if constrained else (mat == 0)
        deletable = mat == 1
    return addable, deletable


def _pick(mask_flat_indices: np.ndarray, rng) -> int:
    return int(mask_flat_indices[rng.integers(len(mask_flat_indices))])


def propose_network_move(state: ChainState, cfg: ChainConfig, hp: Hyperparams,
                         rng) -> MoveProposal:
    """Draw one symmetric move. Never returns an illegal flip.

    Eligible sets are constructed so the flip and swap kernels are symmetric
    on the (possibly constrained) state space; when a swap is drawn but no
    eligible pair exists the move degrades to an add/delete flip, and when
    even that is impossible a null move is returned.
    """
    net = state.net
    shape = net.R.shape
    if cfg.mode == TIME_DEPENDENT:
        u = rng.random()
        if u < hp.lam:
            target = "R"
        elif u < hp.lam + (1.0 - hp.lam) / 2.0:
            target = "Rp"
        else:
            target = "Rpp"
    else:
        target = "R"
    addable, deletable = _eligible_masks(net, target, cfg.constrained)
    want_swap = rng.random() >= hp.phi

    if want_swap:
        ones = np.flatnonzero(deletable)
        zeros = np.flatnonzero(addable)
        if len(ones) and len(zeros):
            i1 = _pick(ones, rng)
            if cfg.row_swap:
                g1 = i1 // shape[1]
                row_zeros = zeros[zeros // shape[1] == g1]
                if not len(row_zeros):
                    return _flip_proposal(addable, deletable, target, shape, rng)
                i0 = _pick(row_zeros, rng)
            else:
                i0 = _pick(zeros, rng)
            cells = (divmod(i1, shape[1]), divmod(i0, shape[1]))
            return MoveProposal("swap", target, cells, (0, 1))
        # no swap pair: fall back to a flip so the chain stays irreducible

    return _flip_proposal(addable, deletable, target, shape, rng)


def _flip_proposal(addable, deletable, target, shape, rng) -> MoveProposal:
    elig = np.flatnonzero(addable | deletable)
    if not len(elig):
        return MoveProposal("none", target)
    idx = _pick(elig, rng)
    g, m = divmod(idx, shape[1])
    new_val = 1 if addable[g, m] else 0
    return MoveProposal("add_delete", target, ((g, m),), (new_val,))


# ---------------------------------------------------------------------------
# shared update math


def _truncnorm_draw(mu: float, sd: float, u: float) -> float:
    """Inverse-CDF draw from N(mu, sd^2) truncated to (0, inf)."""
    p0 = ndtr(-mu / sd)
    p = min(p0 + u * (1.0 - p0), 1.0 - 1e-16)
    return mu + sd * float(ndtri(p))


def _gamma_logpdf(x: float, shape: float, scale: float) -> float:
    return ((shape - 1.0) * np.log(x) - x / scale
            - shape * np.log(scale) - float(gammaln(shape)))


def _log_prior_sigma_one(sigma: float, k_g: int, hp: Hyperparams) -> float:
    """Normalized log density of sigma_g given its selection count."""
    a = 0.5 * (hp.delta + k_g)
    b = 0.5 * hp.d
    return a * np.log(b) - float(gammaln(a)) - (a + 1.0) * np.log(sigma) - b / sigma


def _sigma_step(loglik_old: float, loglik_at, sigma_old: float, k_g: int,
                hp: Hyperparams, rng) -> tuple[float, float, bool]:
    """One moment-matched Gamma MH update; returns (sigma, loglik, accepted)."""
    e = hp.e_sigma
    shape_fwd = sigma_old * sigma_old / e
    scale_fwd = e / sigma_old
    sigma_new = float(rng.gamma(shape_fwd, scale_fwd))
    u = rng.random()
    if not (np.isfinite(sigma_new) and sigma_new > 0):
        return sigma_old, loglik_old, False
    try:
        loglik_new = loglik_at(sigma_new)
    except SingularModelError:
        return sigma_old, loglik_old, False
    a = 0.5 * (hp.delta + k_g)
    dprior = (-(a + 1.0) * (np.log(sigma_new) - np.log(sigma_old))
              - 0.5 * hp.d * (1.0 / sigma_new - 1.0 / sigma_old))
    dprop = (_gamma_logpdf(sigma_old, sigma_new ** 2 / e, e / sigma_new)
             - _gamma_logpdf(sigma_new, shape_fwd, scale_fwd))
    if np.log(u) < (loglik_new - loglik_old) + dprior + dprop:
        return sigma_new, loglik_new, True
    return sigma_old, loglik_old, False


def _tau_sweep(R: np.ndarray, stacked: np.ndarray, tau: np.ndarray,
               logits: np.ndarray, prior_r: float, hp: Hyperparams, rng
               ) -> tuple[np.ndarray, np.ndarray, float, int]:
    """MH-update every tau_j in sequence against pi(R | tau) pi(tau).

    Returns (tau, logits, prior_r, n_accepted); logits/prior_r are kept in
    sync so the caller can track them incrementally.
    """
    sd = np.sqrt(hp.tau_prop_var)
    r = R.astype(float)
    accepted = 0
    for j in range(len(tau)):
        cur = float(tau[j])
        new = _truncnorm_draw(cur, sd, rng.random())
        u = rng.random()
        new_logits = logits + (new - cur) * stacked[j]
        prior_r_new = float(np.sum(r * new_logits) + np.sum(log_expit(-new_logits)))
        dtau = ((hp.a_tau - 1.0) * (np.log(new) - np.log(cur))
                - hp.b_tau * (new - cur))
        trunc = float(log_ndtr(cur / sd) - log_ndtr(new / sd))
        if np.log(u) < (prior_r_new - prior_r) + dtau + trunc:
            tau = tau.copy()
            tau[j] = new
            logits = new_logits
            prior_r = prior_r_new
            accepted += 1
    return tau, logits, prior_r, accepted


# ---------------------------------------------------------------------------
# functional single-step operations (contract surface; the Chain engine uses
# the same helpers with cached per-gene workspaces)


def _gene_selections(net: NetworkState, g: int):
    sel = tuple(int(m) for m in np.flatnonzero(net.R[g]))
    if not net.time_dependent:
        return sel, (), ()
    return (sel,
            tuple(int(m) for m in np.flatnonzero(net.R_prime[g])),
            tuple(int(m) for m in np.flatnonzero(net.R_dprime[g])))


def _build_workspace(data: ExpressionData, hp: Hyperparams, g: int, sel, sel2, sel3,
                     mode: str, pads=None):
    y = data.Y[:, g]
    if mode == TIME_INVARIANT:
        return MarginalWorkspace.build(y, data.X[:, sel])
    x2, x3 = pads if pads is not None else data.padded_offsets()
    return TDWorkspace.build(y, data.X[:, sel], x2[:, sel2], x3[:, sel3], hp)


def mh_accept_network(state: ChainState, proposal: MoveProposal,
                      data: ExpressionData, scores: ScoreSet, hp: Hyperparams,
                      rng, *, mode: str = TIME_INVARIANT,
                      phi_points: Optional[int] = None, phi_seed_base: int = 0
                      ) -> tuple[bool, ChainState]:
    """Accept/reject a network move against the posterior ratio.

    Only the affected genes' marginals are evaluated; the prior ratio uses the
    score logits for base-matrix flips and the flat offset probability for
    offset flips. Symmetric proposals contribute no proposal-density ratio.
    A singular candidate design auto-rejects.
    """
    if proposal.kind == "none":
        return False, state
    net = state.net
    mats = {"R": net.R, "Rp": net.R_prime, "Rpp": net.R_dprime}
    mat = mats[proposal.target]
    if proposal.target == "R":
        logits = edge_prior_logits(scores, hp.eta, state.tau)
        cell_logit = lambda g, m: logits[g, m]
    else:
        lb = float(np.log(hp.eta_b) - np.log1p(-hp.eta_b))
        cell_logit = lambda g, m: lb

    delta_prior = 0.0
    flips = []
    for (g, m), v in zip(proposal.cells, proposal.new_values):
        old = int(mat[g, m])
        if v == old:
            continue
        delta_prior += (1 if v == 1 else -1) * cell_logit(g, m)
        flips.append((g, m, v))

    new_state = state.copy()
    new_mat = {"R": new_state.net.R, "Rp": new_state.net.R_prime,
               "Rpp": new_state.net.R_dprime}[proposal.target]
    for g, m, v in flips:
        new_mat[g, m] = v
    new_state.net.refresh_counts()

    delta_lik = 0.0
    try:
        for g in proposal.affected_genes():
            ws_old = _build_workspace(data, hp, g, *_gene_selections(net, g), mode)
            ws_new = _build_workspace(data, hp, g, *_gene_selections(new_state.net, g), mode)
            sig = float(state.sigma[g])
            delta_lik += (ws_new.log_marginal(sig, hp, phi_points=phi_points,
                                              phi_seed_base=phi_seed_base)
                          - ws_old.log_marginal(sig, hp, phi_points=phi_points,
                                                phi_seed_base=phi_seed_base))
    except SingularModelError:
        return False, state
    if np.log(rng.random()) < delta_lik + delta_prior:
        return True, new_state
    return False, state


def update_tau(state: ChainState, scores: ScoreSet, hp: Hyperparams, rng) -> np.ndarray:
    """One full truncated-random-walk sweep over the score weights."""
    logits = edge_prior_logits(scores, hp.eta, state.tau)
    r = state.net.R.astype(float)
    prior_r = float(np.sum(r * logits) + np.sum(log_expit(-logits)))
    tau, _, _, _ = _tau_sweep(state.net.R, scores.stacked(), state.tau.copy(),
                              logits, prior_r, hp, rng)
    return tau


def update_sigma(state: ChainState, data: ExpressionData, hp: Hyperparams, rng, *,
                 mode: str = TIME_INVARIANT, phi_points: Optional[int] = None,
                 phi_seed_base: int = 0) -> np.ndarray:
    """One moment-matched Gamma MH sweep over all error variances."""
    if hp.e_sigma is None:
        raise ValueError("hp.e_sigma is required to update sigma (run `tune`)")
    pads = data.padded_offsets() if mode == TIME_DEPENDENT else None
    sigma = state.sigma.copy()
    for g in range(data.n_targets):
        ws = _build_workspace(data, hp, g, *_gene_selections(state.net, g), mode, pads)
        ll = ws.log_marginal(float(sigma[g]), hp, phi_points=phi_points,
                             phi_seed_base=phi_seed_base)
        sigma[g], _, _ = _sigma_step(
            ll, lambda s: ws.log_marginal(s, hp, phi_points=phi_points,
                                          phi_seed_base=phi_seed_base),
            float(sigma[g]), int(state.net.k[g]), hp, rng)
    return sigma


# ---------------------------------------------------------------------------
# chain engine


def initial_chain_state(data: ExpressionData, scores: ScoreSet, hp: Hyperparams,
                        cfg: ChainConfig, rng) -> ChainState:
    """Random starting network (uniform cells), prior-mean tau, empirical sigma."""
    G, M = data.n_targets, data.n_regulators
    n_edges = cfg.initial_edges if cfg.initial_edges is not None else G
    n_edges = int(min(max(n_edges, 0), G * M))
    R = np.zeros((G, M), dtype=np.int8)
    if n_edges:
        cells = rng.choice(G * M, size=n_edges, replace=False)
        R.flat[cells] = 1
    if cfg.mode == TIME_DEPENDENT:
        net = NetworkState(R, np.zeros_like(R), np.zeros_like(R))
    else:
        net = NetworkState(R)
    tau = np.full(scores.n_sources, hp.a_tau / hp.b_tau)
    sigma = np.maximum(data.Y.var(axis=0), 1e-8)
    return ChainState(net=net, tau=tau, sigma=sigma, iteration=0, seed=cfg.seed)


@dataclass
class ChainTrace:
    """Accumulated MCMC output of one chain."""

    mode: str
    constrained: bool
    seed: int
    n_kept: int
    incl_counts: np.ndarray
    incl_counts_p: Optional[np.ndarray]
    incl_counts_pp: Optional[np.ndarray]
    tau_samples: np.ndarray
    sigma_samples: np.ndarray
    logpost_trace: np.ndarray
    size_trace: np.ndarray
    trace_stride: int
    accept_stats: dict
    final_state: ChainState
    config: dict
    data_fingerprint: str
    audit_max_abs_diff: float = 0.0
    visit_counts: Optional[dict] = None

    def save(self, path: str) -> None:
        arrays = {
            "incl_counts": self.incl_counts,
            "tau_samples": self.tau_samples,
            "sigma_samples": self.sigma_samples,
            "logpost_trace": self.logpost_trace,
            "size_trace": self.size_trace,
            "state_R": self.final_state.net.R,
            "state_tau": self.final_state.tau,
            "state_sigma": self.final_state.sigma,
        }
        if self.incl_counts_p is not None:
            arrays["incl_counts_p"] = self.incl_counts_p
            arrays["incl_counts_pp"] = self.incl_counts_pp
            arrays["state_Rp"] = self.final_state.net.R_prime
            arrays["state_Rpp"] = self.final_state.net.R_dprime
        if self.visit_counts:
            keys = np.array([np.frombuffer(k, dtype=np.uint8) for k in self.visit_counts],
                            dtype=np.uint8).reshape(len(self.visit_counts), -1)
            arrays["visit_keys"] = keys
            arrays["visit_values"] = np.array(list(self.visit_counts.values()), dtype=np.int64)
        meta = {
            "mode": self.mode,
            "constrained": self.constrained,
            "seed": self.seed,
            "n_kept": self.n_kept,
            "trace_stride": self.trace_stride,
            "accept_stats": self.accept_stats,
            "config": self.config,
            "data_fingerprint": self.data_fingerprint,
            "audit_max_abs_diff": self.audit_max_abs_diff,
            "state_iteration": self.final_state.iteration,
        }
        ckpt.write_archive(path, "trace", arrays, meta)

    @classmethod
    def load(cls, path: str) -> "ChainTrace":
        arrays, meta = ckpt.read_archive(path, "trace")
        td = "incl_counts_p" in arrays
        net = NetworkState(arrays["state_R"],
                           arrays["state_Rp"] if td else None,
                           arrays["state_Rpp"] if td else None)
        state = ChainState(net, arrays["state_tau"], arrays["state_sigma"],
                           int(meta["state_iteration"]), int(meta["seed"]))
        visits = None
        if "visit_keys" in arrays:
            visits = {bytes(k): int(v) for k, v in
                      zip(arrays["visit_keys"], arrays["visit_values"])}
        return cls(
            mode=meta["mode"], constrained=meta["constrained"], seed=int(meta["seed"]),
            n_kept=int(meta["n_kept"]), incl_counts=arrays["incl_counts"],
            incl_counts_p=arrays.get("incl_counts_p"),
            incl_counts_pp=arrays.get("incl_counts_pp"),
            tau_samples=arrays["tau_samples"], sigma_samples=arrays["sigma_samples"],
            logpost_trace=arrays["logpost_trace"], size_trace=arrays["size_trace"],
            trace_stride=int(meta["trace_stride"]), accept_stats=meta["accept_stats"],
            final_state=state, config=meta["config"],
            data_fingerprint=meta["data_fingerprint"],
            audit_max_abs_diff=float(meta["audit_max_abs_diff"]),
            visit_counts=visits)


def data_fingerprint(data: ExpressionData, scores: ScoreSet) -> str:
    h = hashlib.sha256()
    for arr in (data.Y, data.X):
        h.update(np.ascontiguousarray(arr).tobytes())
    if data.time_labels is not None:
        h.update(np.ascontiguousarray(data.time_labels).tobytes())
    for s in scores.scores:
        h.update(np.ascontiguousarray(s).tobytes())
    return h.hexdigest()[:16]


class Chain:
    """One chain: owns a ChainState, per-gene workspaces and accumulators."""

    def __init__(self, data: ExpressionData, scores: ScoreSet, hp: Hyperparams,
                 cfg: ChainConfig, initial_state: Optional[ChainState] = None):
        if scores.shape != (data.n_targets, data.n_regulators):
            raise ValueError("score matrices must be G x M aligned with the data")
        if cfg.mode == TIME_DEPENDENT:
            self._pads = data.padded_offsets()  # validates time labels
        else:
            self._pads = None
        if cfg.update_sigma and hp.e_sigma is None:
            raise ValueError("hp.e_sigma is required when sigma updates are enabled; "
                             "pick one with the `tune` subcommand")
        self.data = data
        self.scores = scores
        self.hp = hp
        self.cfg = cfg
        self.stacked = scores.stacked()
        self.fingerprint = data_fingerprint(data, scores)
        self.rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        if initial_state is not None:
            if (cfg.mode == TIME_DEPENDENT) != initial_state.net.time_dependent:
                raise ValueError("initial state does not match the configured mode")
            self.state = initial_state.copy()
            self.state.iteration = 0
            self.state.seed = cfg.seed
        else:
            self.state = initial_chain_state(data, scores, hp, cfg, self.rng)
        self._phi = dict(phi_points=cfg.phi_points, phi_seed_base=cfg.seed)
        self._memo: Optional[dict] = {} if not cfg.update_sigma else None
        self._init_caches()
        self._init_accumulators()

    # -- caches ------------------------------------------------------------

    def _init_caches(self):
        G = self.data.n_targets
        self._ws = [None] * G
        self._loglik = np.empty(G)
        for g in range(G):
            self._ws[g] = self._build_ws(g, *_gene_selections(self.state.net, g))
            self._loglik[g] = self._eval_ws(self._ws[g], float(self.state.sigma[g]))
        self._logits = edge_prior_logits(self.scores, self.hp.eta, self.state.tau)
        self._prior_r = self._scratch_prior_r(self._logits)
        self._prior_tau = log_prior_tau(self.state.tau, self.hp.a_tau, self.hp.b_tau)
        self._prior_sigma = np.array(
            [_log_prior_sigma_one(float(self.state.sigma[g]), int(self.state.net.k[g]), self.hp)
             for g in range(G)])
        lb = np.log(self.hp.eta_b) if self.hp.eta_b > 0 else -np.inf
        lb0 = np.log1p(-self.hp.eta_b)
        self._offset_logit = lb - lb0
        self._offset_lp0 = lb0

    def _scratch_prior_r(self, logits) -> float:
        r = self.state.net.R.astype(float)
        return float(np.sum(r * logits) + np.sum(log_expit(-logits)))

    def _prior_offsets(self) -> float:
        net = self.state.net
        if not net.time_dependent:
            return 0.0
        n_cells = net.R.size
        n1 = int(net.R_prime.sum()) + int(net.R_dprime.sum())
        return n1 * self._offset_logit + 2 * n_cells * self._offset_lp0

    def _build_ws(self, g: int, sel, sel2, sel3):
        y = self.data.Y[:, g]
        if self.cfg.mode == TIME_INVARIANT:
            return MarginalWorkspace.build(y, self.data.X[:, sel])
        x2, x3 = self._pads
        return TDWorkspace.build(y, self.data.X[:, sel], x2[:, sel2], x3[:, sel3], self.hp)

    def _eval_ws(self, ws, sigma: float) -> float:
        return ws.log_marginal(sigma, self.hp, **self._phi)

    def _candidate_loglik(self, g: int, sel, sel2, sel3, sigma: float):
        """(loglik, workspace-or-None); workspace is None on a memo hit."""
        if self._memo is not None:
            key = (g, sel, sel2, sel3)
            hit = self._memo.get(key)
            if hit is not None:
                return hit, None
            ws = self._build_ws(g, sel, sel2, sel3)
            val = self._eval_ws(ws, sigma)
            if len(self._memo) < _MEMO_CAP:
                self._memo[key] = val
            return val, ws
        ws = self._build_ws(g, sel, sel2, sel3)
        return self._eval_ws(ws, sigma), ws

    # -- accumulators --------------------------------------------------------

    def _init_accumulators(self):
        G, M = self.data.n_targets, self.data.n_regulators
        td = self.cfg.mode == TIME_DEPENDENT
        self.n_kept = 0
        self.incl_counts = np.zeros((G, M), dtype=np.int64)
        self.incl_counts_p = np.zeros((G, M), dtype=np.int64) if td else None
        self.incl_counts_pp = np.zeros((G, M), dtype=np.int64) if td else None
        self.tau_samples: list = []
        self.sigma_samples: list = []
        self.logpost_trace: list = []
        self.size_trace: list = []
        self.visit_counts: Optional[dict] = {} if self.cfg.record_visits else None
        self.accepts = {"net_proposed": 0, "net_accepted": 0,
                        "tau_proposed": 0, "tau_accepted": 0,
                        "sigma_proposed": 0, "sigma_accepted": 0}
        self.audit_max_abs_diff = 0.0

    # -- iteration steps -----------------------------------------------------

    def _network_step(self):
        prop = propose_network_move(self.state, self.cfg, self.hp, self.rng)
        if prop.kind == "none":
            return
        self.accepts["net_proposed"] += 1
        net = self.state.net
        mats = {"R": net.R, "Rp": net.R_prime, "Rpp": net.R_dprime}
        mat = mats[prop.target]
        flips = [(g, m, v) for (g, m), v in zip(prop.cells, prop.new_values)
                 if int(mat[g, m]) != v]
        if not flips:
            self.accepts["net_accepted"] += 1
            return
        delta_prior = 0.0
        for g, m, v in flips:
            sgn = 1.0 if v == 1 else -1.0
            delta_prior += sgn * (self._logits[g, m] if prop.target == "R"
                                  else self._offset_logit)

        affected = prop.affected_genes()
        u = self.rng.random()
        new_ll = {}
        new_ws = {}
        try:
            for g in affected:
                sel, sel2, sel3 = self._flipped_selections(g, prop.target, flips)
                new_ll[g], new_ws[g] = self._candidate_loglik(
                    g, sel, sel2, sel3, float(self.state.sigma[g]))
        except SingularModelError:
            return
        delta_lik = sum(new_ll[g] - self._loglik[g] for g in affected)
        if np.log(u) >= delta_lik + delta_prior:
            return

        self.accepts["net_accepted"] += 1
        for g, m, v in flips:
            mat[g, m] = v
        net.refresh_counts()
        for g in affected:
            self._loglik[g] = new_ll[g]
            if new_ws[g] is not None:
                self._ws[g] = new_ws[g]
            elif self._memo is None:
                self._ws[g] = self._build_ws(g, *_gene_selections(net, g))
            else:
                self._ws[g] = None  # memo mode: workspaces not needed
        if prop.target == "R":
            self._prior_r += delta_prior
            for g in affected:
                self._prior_sigma[g] = _log_prior_sigma_one(
                    float(self.state.sigma[g]), int(net.k[g]), self.hp)

    def _flipped_selections(self, g: int, target: str, flips):
        net = self.state.net
        sel, sel2, sel3 = _gene_selections(net, g)
        row_flips = {m: v for gg, m, v in flips if gg == g}

        def apply(cur: tuple) -> tuple:
            chosen = set(cur)
            for m, v in row_flips.items():
                (chosen.add if v else chosen.discard)(m)
            return tuple(sorted(chosen))

        if target == "R":
            return apply(sel), sel2, sel3
        if target == "Rp":
            return sel, apply(sel2), sel3
        return sel, sel2, apply(sel3)

    def _tau_step(self):
        tau, logits, prior_r, acc = _tau_sweep(
            self.state.net.R, self.stacked, self.state.tau, self._logits,
            self._prior_r, self.hp, self.rng)
        if acc:
            self._prior_tau = log_prior_tau(tau, self.hp.a_tau, self.hp.b_tau)
        self.state.tau = tau
        self._logits = logits
        self._prior_r = prior_r
        self.accepts["tau_proposed"] += len(tau)
        self.accepts["tau_accepted"] += acc

    def _sigma_step(self):
        hp = self.hp
        sigma = self.state.sigma
        for g in range(self.data.n_targets):
            self.accepts["sigma_proposed"] += 1
            ws = self._ws[g]
            new_sig, new_ll, ok = _sigma_step(
                float(self._loglik[g]), lambda s: self._eval_ws(ws, s),
                float(sigma[g]), int(self.state.net.k[g]), hp, self.rng)
            if ok:
                self.accepts["sigma_accepted"] += 1
                sigma[g] = new_sig
                self._loglik[g] = new_ll
                self._prior_sigma[g] = _log_prior_sigma_one(
                    new_sig, int(self.state.net.k[g]), hp)

    # -- bookkeeping ---------------------------------------------------------

    def log_posterior(self) -> float:
        return (float(self._loglik.sum()) + self._prior_r + self._prior_offsets()
                + self._prior_tau + float(self._prior_sigma.sum()))

    def _audit(self):
        """Recompute every tracked quantity from scratch; track the worst gap."""
        net = self.state.net
        net.validate(self.cfg.constrained)
        worst = 0.0
        for g in range(self.data.n_targets):
            ws = self._build_ws(g, *_gene_selections(net, g))
            fresh = self._eval_ws(ws, float(self.state.sigma[g]))
            worst = max(worst, abs(fresh - float(self._loglik[g])))
        logits = edge_prior_logits(self.scores, self.hp.eta, self.state.tau)
        worst = max(worst, float(np.max(np.abs(logits - self._logits))))
        worst = max(worst, abs(self._scratch_prior_r(logits) - self._prior_r))
        fresh_ps = sum(_log_prior_sigma_one(float(self.state.sigma[g]),
                                            int(net.k[g]), self.hp)
                       for g in range(self.data.n_targets))
        worst = max(worst, abs(fresh_ps - float(self._prior_sigma.sum())))
        self.audit_max_abs_diff = max(self.audit_max_abs_diff, worst)

    def _record(self, it: int):
        cfg = self.cfg
        if it < cfg.burn_in:
            return
        rel = it - cfg.burn_in
        net = self.state.net
        if self.visit_counts is not None:
            key = net.R.tobytes()
            if net.time_dependent:
                key += net.R_prime.tobytes() + net.R_dprime.tobytes()
            self.visit_counts[key] = self.visit_counts.get(key, 0) + 1
        if rel % cfg.thinning == 0:
            self.n_kept += 1
            self.incl_counts += net.R
            if net.time_dependent:
                self.incl_counts_p += net.R_prime
                self.incl_counts_pp += net.R_dprime
            if cfg.record_tau:
                self.tau_samples.append(self.state.tau.copy())
            if cfg.record_sigma:
                self.sigma_samples.append(self.state.sigma.copy())
        if rel % cfg.trace_stride == 0:
            self.logpost_trace.append(self.log_posterior())
            self.size_trace.append(int(net.R.sum()))

    def run(self) -> "ChainTrace":
        cfg = self.cfg
        while self.state.iteration < cfg.iterations:
            if cfg.update_network:
                self._network_step()
            if cfg.update_tau:
                self._tau_step()
            if cfg.update_sigma:
                self._sigma_step()
            it = self.state.iteration
            self._record(it)
            if cfg.audit_every and (it + 1) % cfg.audit_every == 0:
                self._audit()
            self.state.iteration += 1
            if cfg.checkpoint_every and self.state.iteration % cfg.checkpoint_every == 0 \
                    and self.state.iteration < cfg.iterations:
                self.write_checkpoint(cfg.checkpoint_path)
        return self.trace()

    def trace(self) -> ChainTrace:
        J = self.scores.n_sources
        G = self.data.n_targets
        return ChainTrace(
            mode=self.cfg.mode, constrained=self.cfg.constrained, seed=self.cfg.seed,
            n_kept=self.n_kept, incl_counts=self.incl_counts.copy(),
            incl_counts_p=None if self.incl_counts_p is None else self.incl_counts_p.copy(),
            incl_counts_pp=None if self.incl_counts_pp is None else self.incl_counts_pp.copy(),
            tau_samples=(np.vstack(self.tau_samples) if self.tau_samples
                         else np.empty((0, J))),
            sigma_samples=(np.vstack(self.sigma_samples) if self.sigma_samples
                           else np.empty((0, G))),
            logpost_trace=np.asarray(self.logpost_trace, dtype=float),
            size_trace=np.asarray(self.size_trace, dtype=np.int64),
            trace_stride=self.cfg.trace_stride,
            accept_stats=dict(self.accepts),
            final_state=self.state.copy(),
            config=asdict(self.cfg),
            data_fingerprint=self.fingerprint,
            audit_max_abs_diff=self.audit_max_abs_diff,
            visit_counts=None if self.visit_counts is None else dict(self.visit_counts))

    # -- checkpointing ---------------------------------------------------------

    def write_checkpoint(self, path: str) -> None:
        net = self.state.net
        arrays = {
            "R": net.R,
            "tau": self.state.tau,
            "sigma": self.state.sigma,
            "incl_counts": self.incl_counts,
            "tau_samples": (np.vstack(self.tau_samples) if self.tau_samples
                            else np.empty((0, self.scores.n_sources))),
            "sigma_samples": (np.vstack(self.sigma_samples) if self.sigma_samples
                              else np.empty((0, self.data.n_targets))),
            "logpost_trace": np.asarray(self.logpost_trace, dtype=float),
            "size_trace": np.asarray(self.size_trace, dtype=np.int64),
            # float caches ride along so a resumed run is bit-identical to an
            # uninterrupted one (scratch recomputation differs in the last ulp)
            "loglik": self._loglik,
            "logits": self._logits,
            "prior_sigma": self._prior_sigma,
            "prior_scalars": np.array([self._prior_r, self._prior_tau]),
        }
        if net.time_dependent:
            arrays["Rp"] = net.R_prime
            arrays["Rpp"] = net.R_dprime
            arrays["incl_counts_p"] = self.incl_counts_p
            arrays["incl_counts_pp"] = self.incl_counts_pp
        if self.visit_counts:
            keys = np.array([np.frombuffer(k, dtype=np.uint8) for k in self.visit_counts],
                            dtype=np.uint8).reshape(len(self.visit_counts), -1)
            arrays["visit_keys"] = keys
            arrays["visit_values"] = np.array(list(self.visit_counts.values()),
                                              dtype=np.int64)
        bg_state = self.rng.bit_generator.state
        meta = {
            "iteration": self.state.iteration,
            "n_kept": self.n_kept,
            "accept_stats": self.accepts,
            "rng_state": json.dumps(bg_state, default=str),
            "config": asdict(self.cfg),
            "data_fingerprint": self.fingerprint,
            "audit_max_abs_diff": self.audit_max_abs_diff,
        }
        ckpt.write_archive(path, "checkpoint", arrays, meta)

    @classmethod
    def resume(cls, path: str, data: ExpressionData, scores: ScoreSet,
               hp: Hyperparams, cfg: ChainConfig) -> "Chain":
        """Restore a chain mid-run; continuing reproduces the uninterrupted run."""
        arrays, meta = ckpt.read_archive(path, "checkpoint")
        chain = cls(data, scores, hp, cfg)
        if meta["data_fingerprint"] != chain.fingerprint:
            raise ckpt.ArchiveError("checkpoint was written for different data")
        if meta["config"] != asdict(cfg):
            raise ckpt.ArchiveError("checkpoint config does not match this run")
        net = chain.state.net
        net.R[...] = arrays["R"]
        if net.time_dependent:
            net.R_prime[...] = arrays["Rp"]
            net.R_dprime[...] = arrays["Rpp"]
        net.refresh_counts()
        chain.state.tau = arrays["tau"].copy()
        chain.state.sigma = arrays["sigma"].copy()
        chain.state.iteration = int(meta["iteration"])
        chain.incl_counts[...] = arrays["incl_counts"]
        if net.time_dependent:
            chain.incl_counts_p[...] = arrays["incl_counts_p"]
            chain.incl_counts_pp[...] = arrays["incl_counts_pp"]
        chain.tau_samples = [row for row in arrays["tau_samples"]]
        chain.sigma_samples = [row for row in arrays["sigma_samples"]]
        chain.logpost_trace = list(arrays["logpost_trace"])
        chain.size_trace = list(arrays["size_trace"])
        chain.n_kept = int(meta["n_kept"])
        chain.accepts = dict(meta["accept_stats"])
        chain.audit_max_abs_diff = float(meta["audit_max_abs_diff"])
        if "visit_keys" in arrays:
            chain.visit_counts = {bytes(k): int(v) for k, v in
                                  zip(arrays["visit_keys"], arrays["visit_values"])}
        rng_state = json.loads(meta["rng_state"])
        rng_state["state"]["state"] = int(rng_state["state"]["state"])
        rng_state["state"]["inc"] = int(rng_state["state"]["inc"])
        rng_state["uinteger"] = int(rng_state["uinteger"])
        chain.rng.bit_generator.state = rng_state
        chain._init_caches()
        chain._loglik[...] = arrays["loglik"]
        chain._logits[...] = arrays["logits"]
        chain._prior_sigma[...] = arrays["prior_sigma"]
        chain._prior_r = float(arrays["prior_scalars"][0])
        chain._prior_tau = float(arrays["prior_scalars"][1])
        return chain


def run_chain(data: ExpressionData, scores: ScoreSet, hp: Hyperparams,
              cfg: ChainConfig, resume_from: Optional[str] = None,
              initial_state: Optional[ChainState] = None) -> ChainTrace:
    """Run (or resume) one chain to cfg.iterations and return its trace."""
    if resume_from is not None:
        chain = Chain.resume(resume_from, data, scores, hp, cfg)
    else:
        chain = Chain(data, scores, hp, cfg, initial_state=initial_state)
    return chain.run()


def pilot_tune(data: ExpressionData, scores: ScoreSet, hp: Hyperparams,
               cfg: ChainConfig, tau_prop_grid, e_sigma_grid) -> list[dict]:
    """Short pilot runs over a proposal-variance grid, reporting acceptance rates."""
    rows = []
    for tpv in tau_prop_grid:
        for es in e_sigma_grid:
            hp2 = replace(hp, tau_prop_var=float(tpv), e_sigma=float(es))
            trace = run_chain(data, scores, hp2, cfg)
            st = trace.accept_stats
            rows.append({
                "tau_prop_var": float(tpv),
                "e_sigma": float(es),
                "tau_accept_rate": st["tau_accepted"] / max(st["tau_proposed"], 1),
                "sigma_accept_rate": st["sigma_accepted"] / max(st["sigma_proposed"], 1),
                "net_accept_rate": st["net_accepted"] / max(st["net_proposed"], 1),
            })
    return rows
