"""Command-line interface.

Subcommands:
  simulate   write a synthetic dataset (expression CSVs, score CSVs, truth)
  run        run one or more chains on CSV inputs, writing trace archives
  summarize  pool traces into posterior summaries, tables, graphs and figures
  fdr        Bayesian FDR table for a saved probability matrix or trace
  tune       pilot-run acceptance-rate grid for the proposal variances
  verify     quick oracle self-checks on small random instances
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
from dataclasses import fields

import numpy as np

from . import dataio
from .inference import bayesian_fdr, fdr_curve, inclusion_probs, summarize
from .model import Hyperparams
from .sampler import (TIME_DEPENDENT, TIME_INVARIANT, ChainConfig, ChainTrace,
                      pilot_tune, run_chain)
from .simulate import SyntheticSpec, generate_synthetic


def _add_hyperparam_flags(p: argparse.ArgumentParser) -> None:
    defaults = Hyperparams()
    p.add_argument("--c", type=float, default=defaults.c,
                   help="coefficient prior scale")
    p.add_argument("--delta", type=float, default=defaults.delta,
                   help="error-variance prior shape offset")
    p.add_argument("--d", type=float, default=defaults.d,
                   help="error-variance prior rate")
    p.add_argument("--eta", type=float, default=defaults.eta,
                   help="edge-prior intercept (logit scale)")
    p.add_argument("--eta-b", type=float, default=defaults.eta_b,
                   help="offset-matrix inclusion probability")
    p.add_argument("--a-tau", type=float, default=defaults.a_tau,
                   help="score-weight prior shape")
    p.add_argument("--b-tau", type=float, default=defaults.b_tau,
                   help="score-weight prior rate")
    p.add_argument("--zeta", type=float, default=defaults.zeta,
                   help="offset coefficient variance factor")
    p.add_argument("--phi", type=float, default=defaults.phi,
                   help="probability of add/delete vs swap")
    p.add_argument("--lambda", dest="lam", type=float, default=defaults.lam,
                   help="probability of updating the base matrix (TD mode)")
    p.add_argument("--tau-prop-var", type=float, default=defaults.tau_prop_var,
                   help="score-weight random-walk variance")
    p.add_argument("--e-sigma", type=float, default=None,
                   help="sigma proposal variance (required to run; see `tune`)")


def _hyperparams(args) -> Hyperparams:
    return Hyperparams(c=args.c, delta=args.delta, d=args.d, eta=args.eta,
                       eta_b=args.eta_b, a_tau=args.a_tau, b_tau=args.b_tau,
                       zeta=args.zeta, phi=args.phi, lam=args.lam,
                       tau_prop_var=args.tau_prop_var, e_sigma=args.e_sigma)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--y", required=True, help="target expression CSV")
    p.add_argument("--x", required=True, help="regulator expression CSV")
    p.add_argument("--scores", nargs="+", required=True,
                   help="association score CSVs, one per source")
    p.add_argument("--log2", action="store_true",
                   help="log2-transform expression, dropping non-positive columns")


def _load_data(args):
    data, report = dataio.ingest_expression(args.y, args.x, log2=args.log2)
    scores = dataio.ingest_scores(args.scores, data)
    if report.dropped_targets or report.dropped_regulators:
        print(f"excluded {len(report.dropped_targets)} targets, "
              f"{len(report.dropped_regulators)} regulators "
              f"(log2 with missing/non-positive values)", file=sys.stderr)
    return data, scores, report


def _add_chain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--burn-in", type=int, default=5000)
    p.add_argument("--thinning", type=int, default=1)
    p.add_argument("--mode", choices=[TIME_INVARIANT, TIME_DEPENDENT],
                   default=TIME_INVARIANT)
    p.add_argument("--unconstrained", action="store_true",
                   help="lift the offset-nesting constraint in TD mode")
    p.add_argument("--initial-edges", type=int, default=None)
    p.add_argument("--no-update-tau", action="store_true")
    p.add_argument("--no-update-sigma", action="store_true")
    p.add_argument("--row-swap", action="store_true",
                   help="restrict swap moves to one gene row")
    p.add_argument("--phi-points", type=int, default=256,
                   help="lattice size for orthant CDFs of dimension >= 3")
    p.add_argument("--audit-every", type=int, default=0)
    p.add_argument("--trace-stride", type=int, default=1)


def _chain_config(args, seed: int, checkpoint_path=None) -> ChainConfig:
    return ChainConfig(
        iterations=args.iterations, burn_in=args.burn_in, thinning=args.thinning,
        mode=args.mode, constrained=not args.unconstrained, seed=seed,
        initial_edges=args.initial_edges,
        update_tau=not args.no_update_tau, update_sigma=not args.no_update_sigma,
        row_swap=args.row_swap, trace_stride=args.trace_stride,
        audit_every=args.audit_every, phi_points=args.phi_points,
        checkpoint_path=checkpoint_path,
        checkpoint_every=getattr(args, "checkpoint_every", 0))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    spec = SyntheticSpec(
        G=args.targets, M=args.regulators, N=args.samples,
        edges_per_gene=args.edges_per_gene, beta_scale=args.beta_scale,
        noise_sd=args.noise_sd, score_informativeness=args.score_informativeness,
        n_score_sources=args.n_score_sources, score_density=args.score_density,
        time_mode=args.time_mode, offset_fraction=args.offset_fraction,
        seed=args.seed)
    data, scores, truth = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_expression(os.path.join(args.out, "targets.csv"),
                            os.path.join(args.out, "regulators.csv"), data)
    score_paths = [os.path.join(args.out, f"scores_{n}.csv")
                   for n in scores.source_names]
    dataio.write_scores(score_paths, scores, data)
    from . import checkpoint as ckpt
    truth_arrays = {"R_true": truth.R_true, "beta_true": truth.beta_true,
                    "sigma_true": truth.sigma_true}
    if truth.R_prime_true is not None:
        truth_arrays.update(R_prime_true=truth.R_prime_true,
                            R_dprime_true=truth.R_dprime_true,
                            beta_prime_true=truth.beta_prime_true,
                            beta_dprime_true=truth.beta_dprime_true)
    ckpt.write_archive(os.path.join(args.out, "truth.npz"), "truth",
                       truth_arrays, {"spec": {f.name: getattr(spec, f.name)
                                               for f in fields(spec)}})
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def _cmd_run(args) -> int:
    data, scores, _ = _load_data(args)
    if args.mode == TIME_DEPENDENT and data.time_labels is None:
        raise ValueError("time-dependent mode requires time labels in the data")
    hp = _hyperparams(args)
    os.makedirs(args.out, exist_ok=True)
    for chain_idx in range(args.chains):
        seed = args.seed + chain_idx
        ck_path = os.path.join(args.out, f"chain{chain_idx}.ckpt.npz") \
            if args.checkpoint_every else None
        cfg = _chain_config(args, seed, ck_path)
        resume = ck_path if (args.resume and ck_path and os.path.exists(ck_path)) else None
        trace = run_chain(data, scores, hp, cfg, resume_from=resume)
        out = os.path.join(args.out, f"trace_chain{chain_idx}.npz")
        trace.save(out)
        st = trace.accept_stats
        print(f"chain {chain_idx}: seed {seed}, "
              f"net accept {st['net_accepted']}/{st['net_proposed']}, "
              f"tau accept {st['tau_accepted']}/{max(st['tau_proposed'],1)}, "
              f"sigma accept {st['sigma_accepted']}/{max(st['sigma_proposed'],1)} "
              f"-> {out}")
    return 0


def _trace_paths(args) -> list[str]:
    paths = []
    for pattern in args.traces:
        if os.path.isdir(pattern):
            paths.extend(sorted(glob.glob(os.path.join(pattern, "trace_chain*.npz"))))
        else:
            paths.extend(sorted(glob.glob(pattern)) or [pattern])
    if not paths:
        raise ValueError("no trace files found")
    return paths


def _cmd_summarize(args) -> int:
    data, scores, _ = _load_data(args)
    traces = [ChainTrace.load(p) for p in _trace_paths(args)]
    hp = _hyperparams(args)
    summary = summarize(traces, data, hp, edge_cutoff=args.edge_cutoff,
                        coef_cutoff=args.coef_cutoff,
                        offset_cutoff=args.offset_cutoff, seed=args.seed)
    formats = ["tsv", "dot", "json"] + (["fig"] if not args.no_figures else [])
    written = dataio.export_results(summary, args.out, formats,
                                    data.target_names, data.regulator_names)
    print(f"{summary.n_at_cutoff} edges at cutoff {args.edge_cutoff} "
          f"(Bayesian FDR {100 * summary.fdr_at_cutoff:.1f}%), "
          f"aggregate R^2 {summary.r2_aggregate:.3f}")
    for path in written:
        print(f"  {path}")
    return 0


def _cmd_fdr(args) -> int:
    if (args.p is None) == (args.trace is None):
        raise ValueError("give exactly one of --p or --trace")
    if args.p is not None:
        P = np.loadtxt(args.p, delimiter=",", ndmin=2)
    else:
        P = inclusion_probs(ChainTrace.load(args.trace)).P
    f, n = bayesian_fdr(P, args.cutoff)
    print(f"FDR at cutoff {args.cutoff:g}: {100 * f:.1f}% ({n} edges)")
    print("cutoff\tselected\tfdr")
    for c, cnt, val in fdr_curve(P):
        print(f"{c:g}\t{cnt}\t{val:.6g}")
    return 0


def _parse_grid(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _cmd_tune(args) -> int:
    data, scores, _ = _load_data(args)
    hp = _hyperparams(args)
    if hp.e_sigma is None:
        hp = Hyperparams(**{**{f.name: getattr(hp, f.name) for f in fields(hp)},
                            "e_sigma": 1.0})
    cfg = _chain_config(args, args.seed)
    rows = pilot_tune(data, scores, hp, cfg,
                      _parse_grid(args.tau_prop_grid), _parse_grid(args.e_sigma_grid))
    print("tau_prop_var\te_sigma\ttau_accept\tsigma_accept\tnet_accept")
    for r in rows:
        print(f"{r['tau_prop_var']:g}\t{r['e_sigma']:g}\t"
              f"{r['tau_accept_rate']:.3f}\t{r['sigma_accept_rate']:.3f}\t"
              f"{r['net_accept_rate']:.3f}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_verification

    ok = run_verification(n_instances=args.instances, seed=args.seed, out=print)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netselect", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--targets", "-G", type=int, default=50)
    p.add_argument("--regulators", "-M", type=int, default=8)
    p.add_argument("--samples", "-N", type=int, default=30)
    p.add_argument("--edges-per-gene", type=float, default=1.0)
    p.add_argument("--beta-scale", type=float, default=1.0)
    p.add_argument("--noise-sd", type=float, default=0.5)
    p.add_argument("--score-informativeness", type=float, default=0.8)
    p.add_argument("--n-score-sources", type=int, default=2)
    p.add_argument("--score-density", type=float, default=0.2)
    p.add_argument("--time-mode", action="store_true")
    p.add_argument("--offset-fraction", type=float, default=0.3)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run MCMC chains")
    _add_data_flags(p)
    _add_chain_flags(p)
    _add_hyperparam_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true",
                   help="resume each chain from its checkpoint if present")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="summarize traces into reports")
    _add_data_flags(p)
    _add_hyperparam_flags(p)
    p.add_argument("--traces", nargs="+", required=True,
                   help="trace files, globs, or a directory from `run`")
    p.add_argument("--out", required=True)
    p.add_argument("--edge-cutoff", type=float, default=0.8)
    p.add_argument("--coef-cutoff", type=float, default=0.15)
    p.add_argument("--offset-cutoff", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0,
                   help="seed of the truncated-normal mean estimator")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("fdr", help="Bayesian FDR table")
    p.add_argument("--p", help="CSV matrix of inclusion probabilities")
    p.add_argument("--trace", help="trace archive from `run`")
    p.add_argument("--cutoff", type=float, required=True)
    p.set_defaults(func=_cmd_fdr)

    p = sub.add_parser("tune", help="pilot acceptance-rate grid")
    _add_data_flags(p)
    _add_chain_flags(p)
    _add_hyperparam_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tau-prop-grid", default="0.001,0.01,0.1")
    p.add_argument("--e-sigma-grid", default="0.01,0.05,0.2")
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("verify", help="oracle self-checks")
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, dataio.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
