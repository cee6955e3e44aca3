"""CSV ingestion, normalization and result exporters.

Expression files carry a header row of ``sample_id,time,<variable names>``;
score files are one CSV per source with target ids down the first column and
regulator ids across the header. All joins are id-based, never positional.
Exports are byte-stable functions of their inputs: a TSV edge list, a DOT
graph, a JSON summary document, and (on the reporting path) figure files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .model import ExpressionData, ScoreSet, normalize_scores
from .inference import PosteriorSummary

__all__ = [
    "IngestError",
    "ExclusionReport",
    "ingest_expression",
    "ingest_scores",
    "write_expression",
    "write_scores",
    "export_results",
]


class IngestError(ValueError):
    """Malformed input files: id mismatches, duplicates, non-numeric cells."""


@dataclass
class ExclusionReport:
    """Columns dropped during ingestion, with the reason."""

    dropped_targets: list = field(default_factory=list)
    dropped_regulators: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"dropped_targets": list(self.dropped_targets),
                "dropped_regulators": list(self.dropped_regulators)}


def _read_expression_csv(path: str) -> pd.DataFrame:
    df = pd.read_csv(path)
    if df.shape[1] < 3 or list(df.columns[:2]) != ["sample_id", "time"]:
        raise IngestError(f"{path}: expected header 'sample_id,time,<variables>'")
    if df["sample_id"].duplicated().any():
        dupes = df.loc[df["sample_id"].duplicated(), "sample_id"].tolist()
        raise IngestError(f"{path}: duplicate sample ids {dupes}")
    df = df.set_index("sample_id")
    for col in df.columns[1:]:
        if not pd.api.types.is_numeric_dtype(df[col]):
            raise IngestError(f"{path}: non-numeric cells in column {col!r}")
    if not pd.api.types.is_numeric_dtype(df["time"]):
        raise IngestError(f"{path}: non-numeric time labels")
    return df


def ingest_expression(y_path: str, x_path: str, *, log2: bool = False
                      ) -> tuple[ExpressionData, ExclusionReport]:
    """Load, align, optionally log2-transform, and center expression data.

    Rows are matched by sample id (the target file's order wins). With
    ``log2`` enabled, any column holding a missing or non-positive value is
    dropped and listed in the exclusion report. Target columns are always
    centered after transformation.
    """
    ydf = _read_expression_csv(y_path)
    xdf = _read_expression_csv(x_path)
    if set(ydf.index) != set(xdf.index):
        missing = set(ydf.index) ^ set(xdf.index)
        raise IngestError(f"unmatched sample ids between files: {sorted(missing)[:5]}")
    xdf = xdf.loc[ydf.index]
    if not np.array_equal(ydf["time"].to_numpy(), xdf["time"].to_numpy()):
        raise IngestError("time labels disagree between target and regulator files")

    report = ExclusionReport()

    def prepare(df: pd.DataFrame, dropped: list) -> pd.DataFrame:
        vals = df.drop(columns="time")
        if log2:
            bad = vals.columns[(vals.isna() | (vals <= 0)).any(axis=0)]
            dropped.extend(bad.tolist())
            vals = vals.drop(columns=bad)
            vals = np.log2(vals)
        elif vals.isna().any().any():
            raise IngestError("missing values present (only allowed with --log2, "
                              "which drops the affected columns)")
        return vals

    yv = prepare(ydf, report.dropped_targets)
    xv = prepare(xdf, report.dropped_regulators)
    if yv.shape[1] == 0:
        raise IngestError("no target columns left after exclusions")
    if xv.shape[1] == 0:
        raise IngestError("no regulator columns left after exclusions")

    ymat = yv.to_numpy(dtype=float)
    ymat = ymat - ymat.mean(axis=0)
    data = ExpressionData(
        ymat, xv.to_numpy(dtype=float),
        time_labels=ydf["time"].to_numpy(dtype=int),
        target_names=tuple(yv.columns), regulator_names=tuple(xv.columns))
    return data, report


def ingest_scores(paths: Sequence[str], data: ExpressionData,
                  source_names: Optional[Sequence[str]] = None) -> ScoreSet:
    """Load one CSV per source, align to the expression ids, normalize.

    Absent pairs, rows or columns count as zero ("no prediction"); ids not
    present in the expression data are rejected. Sources whose present values
    are all negative are orientation-flipped by the normalizer; mixed signs
    are rejected as ambiguous.
    """
    if data.target_names is None or data.regulator_names is None:
        raise IngestError("expression data must carry names to align scores")
    mats = []
    names = []
    for i, path in enumerate(paths):
        df = pd.read_csv(path, index_col=0)
        unknown_rows = [str(r) for r in df.index if str(r) not in data.target_names]
        unknown_cols = [str(c) for c in df.columns if str(c) not in data.regulator_names]
        if unknown_rows or unknown_cols:
            raise IngestError(f"{path}: ids not present in expression data: "
                              f"{(unknown_rows + unknown_cols)[:5]}")
        df.index = df.index.map(str)
        aligned = df.reindex(index=list(data.target_names),
                             columns=list(data.regulator_names)).fillna(0.0)
        try:
            mats.append(aligned.to_numpy(dtype=float))
        except ValueError as exc:
            raise IngestError(f"{path}: non-numeric cells ({exc})") from None
        names.append(source_names[i] if source_names else
                     os.path.splitext(os.path.basename(path))[0])
    return normalize_scores(ScoreSet(mats, names))


# ---------------------------------------------------------------------------
# writers


def write_expression(y_path: str, x_path: str, data: ExpressionData) -> None:
    """Write the two expression CSVs in the ingestible format."""
    n = data.n_samples
    ids = [f"s{i+1:04d}" for i in range(n)]
    time = data.time_labels if data.time_labels is not None else np.ones(n, dtype=int)
    tn = data.target_names or tuple(f"T{g+1:04d}" for g in range(data.n_targets))
    rn = data.regulator_names or tuple(f"R{m+1:03d}" for m in range(data.n_regulators))
    for path, mat, cols in ((y_path, data.Y, tn), (x_path, data.X, rn)):
        df = pd.DataFrame(mat, columns=list(cols))
        df.insert(0, "time", time)
        df.insert(0, "sample_id", ids)
        df.to_csv(path, index=False, float_format="%.17g")


def write_scores(paths: Sequence[str], scores: ScoreSet, data: ExpressionData) -> None:
    if len(paths) != scores.n_sources:
        raise ValueError("one output path per score source required")
    tn = data.target_names or tuple(str(g) for g in range(scores.shape[0]))
    rn = data.regulator_names or tuple(str(m) for m in range(scores.shape[1]))
    for path, mat in zip(paths, scores.scores):
        pd.DataFrame(mat, index=list(tn), columns=list(rn)) \
            .to_csv(path, float_format="%.17g")


# ---------------------------------------------------------------------------
# exporters


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _edge_table(summary: PosteriorSummary, tn, rn) -> str:
    lines = ["gene\tregulator\tposterior_prob\tbeta_hat\tols_hat"]
    for g, m, p in summary.edges:
        lines.append("\t".join([tn[g], rn[m], _fmt(p),
                                _fmt(summary.beta_hat[g, m]),
                                _fmt(summary.ols_hat[g, m])]))
    return "\n".join(lines) + "\n"


def _fdr_table(summary: PosteriorSummary) -> str:
    lines = ["cutoff\tselected\tfdr"]
    for cutoff, n, f in summary.fdr_table:
        lines.append(f"{_fmt(cutoff)}\t{n}\t{_fmt(f)}")
    return "\n".join(lines) + "\n"


def _dot_graph(summary: PosteriorSummary, tn, rn) -> str:
    out = ["digraph regulatory_network {", "  rankdir=LR;"]
    regs = sorted({m for _, m, _ in summary.edges})
    tgts = sorted({g for g, _, _ in summary.edges})
    for m in regs:
        out.append(f'  "{rn[m]}" [shape=box, class=regulator];')
    for g in tgts:
        out.append(f'  "{tn[g]}" [shape=ellipse, class=target];')
    for g, m, p in summary.edges:
        out.append(f'  "{rn[m]}" -> "{tn[g]}" [weight={_fmt(p)}, label="{_fmt(p)}"];')
    out.append("}")
    return "\n".join(out) + "\n"


def _json_summary(summary: PosteriorSummary) -> str:
    neg = summary.ols_hat[(summary.P >= summary.coef_cutoff) & (summary.ols_hat != 0)]
    doc = {
        "mode": summary.mode,
        "edge_cutoff": summary.edge_cutoff,
        "coef_cutoff": summary.coef_cutoff,
        "offset_cutoff": summary.offset_cutoff,
        "n_selected_edges": summary.n_at_cutoff,
        "bayesian_fdr_at_cutoff": summary.fdr_at_cutoff,
        "fdr_curve": [{"cutoff": c, "selected": n, "fdr": f}
                      for c, n, f in summary.fdr_table],
        "r2_aggregate": summary.r2_aggregate,
        "r2_per_gene": [None if np.isnan(v) else float(v)
                        for v in summary.r2_per_gene],
        "tau_posterior": summary.tau_quantiles,
        "chain_agreement": summary.chain_diag,
        "accept_stats": summary.accept_stats,
        "ols_negative_share": (float(np.mean(neg < 0)) if neg.size else None),
        "ols_skipped_genes": summary.ols_skipped,
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def export_results(summary: PosteriorSummary, outdir: str,
                   formats: Sequence[str] = ("tsv", "dot", "json"),
                   target_names: Optional[Sequence[str]] = None,
                   regulator_names: Optional[Sequence[str]] = None) -> list[str]:
    """Write the selected export formats into outdir; returns written paths.

    Output bytes depend only on the summary content (stable float formatting,
    sorted JSON keys), so re-exporting an identical summary reproduces the
    files exactly.
    """
    os.makedirs(outdir, exist_ok=True)
    G, M = summary.P.shape
    tn = list(target_names) if target_names else [f"T{g+1:04d}" for g in range(G)]
    rn = list(regulator_names) if regulator_names else [f"R{m+1:03d}" for m in range(M)]
    written = []

    def emit(name: str, text: str):
        path = os.path.join(outdir, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        written.append(path)

    if "tsv" in formats:
        emit("edges.tsv", _edge_table(summary, tn, rn))
        emit("fdr.tsv", _fdr_table(summary))
    if "dot" in formats:
        emit("network.dot", _dot_graph(summary, tn, rn))
    if "json" in formats:
        emit("summary.json", _json_summary(summary))
    if "fig" in formats:
        from .report import render_figures

        written.extend(render_figures(summary, outdir))
    return written
