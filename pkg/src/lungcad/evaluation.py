"""Patch-level ROC analysis: curves, AUC, TPR at fixed FPR, and reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_FPR_TARGETS = (0.05, 0.1, 0.5)
SCORES_HEADER = ["patch_id", "slide_id", "label", "score", "model"]


@dataclass
class ScoreSet:
    labels: np.ndarray  # 0/1
    scores: np.ndarray
    model_name: str = "model"
    patch_ids: list[str] | None = None
    slide_ids: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if self.labels.shape != self.scores.shape:
            raise ValueError("labels and scores differ in length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def counts(self) -> tuple[int, int]:
        p = int(self.labels.sum())
        return p, int(self.labels.size - p)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf for the (0, 0) point
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def _as_scoreset(scores, labels=None, name="model") -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet(labels, scores, name)


def roc_curve(scores, labels=None) -> RocCurve:
    """Operating points at each distinct score; tied scores form one point."""
    s = _as_scoreset(scores, labels)
    P, N = s.counts()
    if P == 0 or N == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s.scores, kind="stable")
    sc, lab = s.scores[order], s.labels[order]
    # last index of each tie group in descending order
    last = np.r_[np.nonzero(np.diff(sc))[0], sc.size - 1]
    tp = np.cumsum(lab)[last]
    fp = (last + 1) - tp
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    return RocCurve(
        fpr=fp / N,
        tpr=tp / P,
        thresholds=np.r_[np.inf, sc[last]],
        tp=tp,
        fp=fp,
        n_pos=P,
        n_neg=N,
    )


def auc(scores, labels=None) -> float:
    """Trapezoidal area under the tie-collapsed ROC curve."""
    c = roc_curve(scores, labels)
    # integer arithmetic until the single final division
    twice = int(np.sum(np.diff(c.fp) * (c.tp[1:] + c.tp[:-1])))
    return twice / (2 * c.n_pos * c.n_neg)


def tpr_at_fpr(curve: RocCurve, target: float) -> float:
    """Largest TPR among operating points with FPR <= target (no interpolation)."""
    if not 0.0 <= target <= 1.0:
        raise ValueError("FPR target must be in [0, 1]")
    ok = curve.fp <= target * curve.n_neg * (1 + 1e-12)
    return float(curve.tpr[ok].max())


@dataclass
class ReportRow:
    model: str
    auc: float
    tpr: dict[float, float]
    n_pos: int
    n_neg: int


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    fpr_targets: tuple[float, ...]
    curves: dict[str, RocCurve]
    rule: str = "max TPR over operating points with FPR <= target"

    def table(self) -> str:
        head = ["model", *(fp_column(t) for t in self.fpr_targets), "AUC"]
        lines = ["\t".join(head)]
        for r in self.rows:
            lines.append("\t".join([r.model, *(f"{r.tpr[t]:.4f}" for t in self.fpr_targets), f"{r.auc:.4f}"]))
        return "\n".join(lines)


def fp_column(target: float) -> str:
    return f"FP@{target:g}"


def report(score_sets, fpr_targets=DEFAULT_FPR_TARGETS) -> MetricsReport:
    fpr_targets = tuple(float(t) for t in fpr_targets)
    rows, curves = [], {}
    for s in score_sets:
        c = roc_curve(s)
        P, N = s.counts()
        rows.append(ReportRow(s.model_name, auc(s), {t: tpr_at_fpr(c, t) for t in fpr_targets}, P, N))
        curves[s.model_name] = c
    return MetricsReport(rows, fpr_targets, curves)


def write_report(rep: MetricsReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "table": out / "report.txt"}
    doc = {
        "fpr_targets": list(rep.fpr_targets),
        "tpr_rule": rep.rule,
        "level": "patch",
        "models": [
            {
                "model": r.model,
                "auc": r.auc,
                **{fp_column(t): r.tpr[t] for t in rep.fpr_targets},
                "positives": r.n_pos,
                "negatives": r.n_neg,
            }
            for r in rep.rows
        ],
    }
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *(fp_column(t) for t in rep.fpr_targets), "AUC", "positives", "negatives"])
        for r in rep.rows:
            w.writerow([r.model, *(repr(r.tpr[t]) for t in rep.fpr_targets), repr(r.auc), r.n_pos, r.n_neg])
    paths["table"].write_text(rep.table() + "\n")
    for name, c in rep.curves.items():
        p = out / f"roc_{_safe(name)}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for f, t, th in c.points():
                w.writerow([repr(f), repr(t), repr(th)])
        paths[f"roc:{name}"] = p
    return paths


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def write_scores(path, patch_ids, slide_ids, labels, scores, model: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        for pid, sid, lab, sc in zip(patch_ids, slide_ids, labels, scores):
            w.writerow([pid, sid, int(lab), repr(float(sc)), model])


def read_scores(*paths) -> list[ScoreSet]:
    """Score sets grouped by the model column, in order of first appearance."""
    groups: dict[str, dict[str, list]] = {}
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SCORES_HEADER:
                raise ValueError(f"{path}: unexpected scores header {reader.fieldnames}")
            for row in reader:
                g = groups.setdefault(row["model"], {"pid": [], "sid": [], "lab": [], "sc": []})
                g["pid"].append(row["patch_id"])
                g["sid"].append(row["slide_id"])
                g["lab"].append(int(row["label"]))
                g["sc"].append(float(row["score"]))
    return [ScoreSet(g["lab"], g["sc"], name, g["pid"], g["sid"]) for name, g in groups.items()]
