"""Gallery/probe evaluation: cross-view rank-1 accuracy matrices.

Each probe is matched to the nearest gallery entry by Euclidean distance on
flattened sequence features; a cell (probe view, gallery view) scores the
percentage of probes whose nearest gallery subject is their own. Reported
means exclude identical-view cells. When a subject has several gallery
sequences at one view, the minimum distance over them is used.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchSpec, DatasetIndex, SeqRecord, load_aligned_sequence
from .network import ScnConfig, ScnParams, init_params, scn_forward_many
from .trainer import TripletConfig, train


@dataclass
class FeatureRow:
    subject: int
    condition: str
    run: int
    view: int
    subset: str | None
    vector: np.ndarray


@dataclass
class FeatureTable:
    rows: list[FeatureRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def views(self):
        return sorted({r.view for r in self.rows})

    def subsets(self):
        return sorted({r.subset for r in self.rows if r.subset is not None}) or ["ALL"]


def extract_features(params: ScnParams, records: list[SeqRecord], batch: int = 8) -> FeatureTable:
    """One SequenceFeature per full sequence (no segment sampling).

    Sequences below the model's minimum length are skipped and reported.
    """
    cfg = params.config
    table = FeatureTable()
    usable = []
    for r in records:
        if r.frame_count >= cfg.min_sequence_len():
            usable.append(r)
        else:
            table.skipped.append(r.path)
    for i in range(0, len(usable), batch):
        chunk = usable[i:i + batch]
        seqs = [
            T.Tensor(load_aligned_sequence(r.path).astype(cfg.np_dtype)) for r in chunk
        ]
        feats = scn_forward_many(params, seqs)
        for r, f in zip(chunk, feats):
            table.rows.append(
                FeatureRow(r.subject, r.condition, r.run, r.view, r.probe_subset,
                           f.vector.astype(np.float64))
            )
    return table


# ---------------------------------------------------------------------------
# rank-1 matching


def match_probes(distances: np.ndarray, gallery_subjects: np.ndarray) -> np.ndarray:
    """Winning subject per probe row; ties resolve to the smallest subject id.

    The argmin is what matters, so any strictly increasing transform applied
    uniformly to the distances leaves the winners unchanged.
    """
    order = np.argsort(gallery_subjects, kind="stable")
    d = distances[:, order]
    return gallery_subjects[order][np.argmin(d, axis=1)]


def _cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        (a * a).sum(axis=1)[:, None]
        + (b * b).sum(axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class EvalReport:
    views: list[int]
    subsets: list[str]
    matrices: dict  # subset -> [probe_view, gallery_view] accuracy %, NaN absent
    exclude_identical_view: bool
    absent_cells: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def _included(self, subset):
        m = self.matrices[subset]
        mask = ~np.isnan(m)
        if self.exclude_identical_view:
            mask &= ~np.eye(len(self.views), dtype=bool)
        return m, mask

    def per_view_mean(self, subset) -> np.ndarray:
        m, mask = self._included(subset)
        out = np.full(len(self.views), np.nan)
        for i in range(len(self.views)):
            row = m[i][mask[i]]
            if row.size:
                out[i] = row.mean()
        return out

    def overall_mean(self, subset) -> float:
        m, mask = self._included(subset)
        return float(m[mask].mean()) if mask.any() else float("nan")


def rank1(gallery: FeatureTable, probe: FeatureTable,
          exclude_identical_view: bool = True) -> EvalReport:
    views = sorted(set(gallery.views()) | set(probe.views()))
    subsets = probe.subsets()
    gal_by_view = {}
    for v in views:
        rows = [r for r in gallery.rows if r.view == v]
        if rows:
            gal_by_view[v] = (
                np.stack([r.vector for r in rows]),
                np.array([r.subject for r in rows]),
            )
    report = EvalReport(views=views, subsets=subsets, matrices={},
                        exclude_identical_view=exclude_identical_view,
                        skipped=list(gallery.skipped) + list(probe.skipped))
    for subset in subsets:
        m = np.full((len(views), len(views)), np.nan)
        for i, pv in enumerate(views):
            prows = [
                r for r in probe.rows
                if r.view == pv and (subset == "ALL" or r.subset == subset)
            ]
            if not prows:
                continue
            pv_vecs = np.stack([r.vector for r in prows])
            pv_subj = np.array([r.subject for r in prows])
            for j, gv in enumerate(views):
                if gv not in gal_by_view:
                    report.absent_cells.append((subset, pv, gv))
                    continue
                g_vecs, g_subj = gal_by_view[gv]
                d = _cross_distances(pv_vecs, g_vecs)
                # min distance over each subject's gallery sequences
                subjects = np.unique(g_subj)
                d_subj = np.stack([d[:, g_subj == s].min(axis=1) for s in subjects], axis=1)
                winners = match_probes(d_subj, subjects)
                m[i, j] = 100.0 * float((winners == pv_subj).mean())
        report.matrices[subset] = m
    return report


# ---------------------------------------------------------------------------
# report files


def format_report_text(report: EvalReport, subset: str) -> str:
    views = report.views
    head = ["probe\\gallery"] + [f"{v}°" for v in views] + ["mean"]
    lines = ["  ".join(f"{h:>9}" for h in head)]
    m = report.matrices[subset]
    means = report.per_view_mean(subset)
    for i, pv in enumerate(views):
        cells = [f"{pv}°"] + [
            "-" if np.isnan(m[i, j]) else f"{m[i, j]:.1f}" for j in range(len(views))
        ] + ["-" if np.isnan(means[i]) else f"{means[i]:.1f}"]
        lines.append("  ".join(f"{c:>9}" for c in cells))
    lines.append(f"overall mean: {report.overall_mean(subset):.2f}")
    return "\n".join(lines) + "\n"


def write_report_files(report: EvalReport, out_dir) -> list[str]:
    """One CSV and one aligned-text table per condition, plus a summary."""
    os.makedirs(str(out_dir), exist_ok=True)
    written = []
    for subset in report.subsets:
        base = os.path.join(str(out_dir), f"rank1_{subset.lower()}")
        m = report.matrices[subset]
        with open(base + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe_view"] + [str(v) for v in report.views] + ["mean"])
            means = report.per_view_mean(subset)
            for i, pv in enumerate(report.views):
                w.writerow(
                    [pv]
                    + ["" if np.isnan(x) else f"{x:.2f}" for x in m[i]]
                    + ["" if np.isnan(means[i]) else f"{means[i]:.2f}"]
                )
        with open(base + ".txt", "w") as fh:
            fh.write(format_report_text(report, subset))
        written += [base + ".csv", base + ".txt"]
    summary = os.path.join(str(out_dir), "summary.txt")
    with open(summary, "w") as fh:
        for subset in report.subsets:
            fh.write(f"{subset}: {report.overall_mean(subset):.2f}\n")
        if report.absent_cells:
            fh.write(f"absent cells: {report.absent_cells}\n")
        if report.skipped:
            fh.write(f"skipped sequences: {len(report.skipped)}\n")
    written.append(summary)
    return written


def evaluate_split(params: ScnParams, index: DatasetIndex,
                   exclude_identical_view: bool = True,
                   gallery_equals_probe: bool = False) -> EvalReport:
    gallery = extract_features(params, index.split("gallery"))
    if gallery_equals_probe:
        probe = FeatureTable(rows=[dataclasses.replace(r, subset="ALL") for r in gallery.rows])
    else:
        probe = extract_features(params, index.split("probe"))
    return rank1(gallery, probe, exclude_identical_view)


# ---------------------------------------------------------------------------
# ablation harness


def _train_and_score(config: ScnConfig, index: DatasetIndex, batch_spec: BatchSpec,
                     triplet_cfg: TripletConfig, iterations: int, seed: int,
                     out_dir, schedule, custom_schedule) -> dict:
    params = init_params(config, np.random.default_rng(seed))
    train(params, index, batch_spec, triplet_cfg, iterations, out_dir, seed=seed,
          schedule=schedule, custom_schedule=custom_schedule,
          checkpoint_every=0, quiet=True)
    report = evaluate_split(params, index)
    return {s: report.overall_mean(s) for s in report.subsets}


def ablation_grid(base_config: ScnConfig, index: DatasetIndex, out_dir,
                  batch_spec: BatchSpec, triplet_cfg: TripletConfig,
                  iterations: int, seed: int = 0, schedule: str = "custom",
                  custom_schedule=((None, 1e-3),), quiet: bool = False) -> dict:
    """Re-train and score every fusion-grid cell and the aggregator quadrant.

    Grid one: the no-fusion baseline plus {diff, multi_diff, static_excl} x
    {micro, global, adaptive}, all without the aggregator (plain frame mean).
    Grid two: {mean, max} final reduction x {aggregator off, on}, then the
    best fusion cell with the aggregator under both reductions.
    Per-cell failures are recorded and the grid continues.
    """
    os.makedirs(str(out_dir), exist_ok=True)
    templates = [("T1", "diff"), ("T2", "multi_diff"), ("T3", "static_excl_mean")]
    fusions = ["micro", "global", "adaptive"]

    bie_rows = []
    no_mfa = dataclasses.replace(base_config, mfa_enabled=False, final_reduce="mean")
    cells = [("baseline", None, None, dataclasses.replace(no_mfa, template="none"))]
    for t_name, t_spec in templates:
        for f_mode in fusions:
            cells.append(
                (f"{t_name}+{f_mode}", t_name, f_mode,
                 dataclasses.replace(no_mfa, template=t_spec, fusion=f_mode))
            )
    for label, t_name, f_mode, cfg in cells:
        row = {"label": label, "template": t_name or "", "fusion": f_mode or ""}
        try:
            scores = _train_and_score(cfg, index, batch_spec, triplet_cfg,
                                      iterations, seed, os.path.join(str(out_dir), label),
                                      schedule, custom_schedule)
            row.update(scores)
            row["error"] = ""
        except Exception as exc:  # record and continue
            row["error"] = f"{type(exc).__name__}: {exc}"
        bie_rows.append(row)
        if not quiet:
            print(f"[ablate] {label}: {row}", flush=True)

    mfa_rows = []
    best = ("static_excl_mean", "adaptive")
    quadrant = [
        ("mean", False, False), ("max", False, False),
        ("mean", False, True), ("max", False, True),
        ("mean", True, True), ("max", True, True),
    ]
    for reduce_mode, with_bie, with_mfa in quadrant:
        label = f"{reduce_mode}{'+bie' if with_bie else ''}{'+mfa' if with_mfa else ''}"
        cfg = dataclasses.replace(
            base_config,
            final_reduce=reduce_mode,
            mfa_enabled=with_mfa,
            template=best[0] if with_bie else "none",
            fusion=best[1],
        )
        row = {"label": label, "statistic": reduce_mode,
               "bie": "x" if with_bie else "", "mfa": "x" if with_mfa else ""}
        try:
            scores = _train_and_score(cfg, index, batch_spec, triplet_cfg,
                                      iterations, seed, os.path.join(str(out_dir), label),
                                      schedule, custom_schedule)
            row.update(scores)
            row["error"] = ""
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        mfa_rows.append(row)
        if not quiet:
            print(f"[ablate] {label}: {row}", flush=True)

    subsets = sorted({k for r in bie_rows + mfa_rows for k in r
                      if k not in ("label", "template", "fusion", "statistic", "bie", "mfa", "error")})
    _write_grid_csv(os.path.join(str(out_dir), "ablation_bie.csv"),
                    ["label", "template", "fusion"] + subsets + ["error"], bie_rows)
    _write_grid_csv(os.path.join(str(out_dir), "ablation_mfa.csv"),
                    ["label", "statistic", "bie", "mfa"] + subsets + ["error"], mfa_rows)
    return {"bie": bie_rows, "mfa": mfa_rows, "subsets": subsets}


def _write_grid_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt_cell(row.get(c, "")) for c in columns])


def _fmt_cell(v):
    return f"{v:.2f}" if isinstance(v, float) else v


def window_len_sweep(base_config: ScnConfig, index: DatasetIndex, out_dir,
                     batch_spec: BatchSpec, triplet_cfg: TripletConfig,
                     iterations: int, lengths=(3, 5, 7, 9, 11), seed: int = 0,
                     schedule: str = "custom", custom_schedule=((None, 1e-3),),
                     quiet: bool = False) -> list[dict]:
    """Accuracy versus aggregator window length; emits a plot-ready CSV."""
    os.makedirs(str(out_dir), exist_ok=True)
    rows = []
    for L in lengths:
        cfg = dataclasses.replace(base_config, window_len=L, mfa_enabled=True)
        row = {"L": L}
        try:
            scores = _train_and_score(cfg, index, batch_spec, triplet_cfg,
                                      iterations, seed, os.path.join(str(out_dir), f"L{L}"),
                                      schedule, custom_schedule)
            row.update(scores)
            row["mean"] = float(np.mean(list(scores.values())))
            row["error"] = ""
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if not quiet:
            print(f"[l-sweep] L={L}: {row}", flush=True)
    subsets = sorted({k for r in rows for k in r if k not in ("L", "mean", "error")})
    _write_grid_csv(os.path.join(str(out_dir), "l_sweep.csv"),
                    ["L"] + subsets + ["mean", "error"], rows)
    return rows
