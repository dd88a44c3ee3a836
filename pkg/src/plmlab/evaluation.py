"""Posterior-estimation error, accuracy, matrix error, runtime ratio, reports."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from plmlab.autodiff import predict_proba
from plmlab.errors import ComparisonError, EvaluationError
from plmlab.transition import max_entry_error

SUMMARY_COLUMNS = (
    "variant", "noise_kind", "rate", "n_seeds", "posterior_error_mean", "posterior_error_std",
    "acc_mean", "acc_std", "T_error_mean", "time_ratio",
)


@dataclass
class PseudoAnchorSet:
    indices: np.ndarray  # positions within the evaluated NoisyDataset
    classes: np.ndarray
    truth: np.ndarray  # (m, c) ground-truth noisy posterior rows

    def __len__(self):
        return len(self.indices)


@dataclass
class MetricsRecord:
    variant: str
    noise_kind: str
    rate: float
    seed: int
    posterior_error: float
    test_accuracy: float
    T_error: float | None = None
    timings_ms: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _select(scores_ok, confidence, classes, c, cap):
    """Per class, keep up to ``cap`` qualifying instances by descending confidence."""
    chosen = []
    idx = np.arange(len(classes))
    for k in range(c):
        cand = idx[scores_ok & (classes == k)]
        if len(cand) == 0:
            raise EvaluationError(f"no pseudo-anchor qualifies for class {k}")
        order = np.lexsort((cand, -confidence[cand]))
        chosen.append(np.sort(cand[order[:cap]]))
    return np.concatenate(chosen)


def build_pseudo_anchors(dataset, model=None, tau=0.99, per_class_cap=100):
    """Pseudo-anchors within ``dataset`` with their injected noise rows.

    Without ``model`` the known clean labels are taken as exact
    (``P(Y=i|x) = 1``), which holds for template-generated data. With a
    clean-trained ``model``, an instance qualifies when the model predicts its
    clean class with probability at least ``tau``.
    """
    clean = dataset.clean_labels
    if model is None:
        if tau > 1.0:
            raise EvaluationError("confidence threshold above 1 admits no anchors")
        ok = np.ones(len(dataset), dtype=bool)
        conf = np.ones(len(dataset))
    else:
        probs = predict_proba(model, dataset.flat())
        conf = probs[np.arange(len(dataset)), clean]
        ok = (conf >= tau) & (np.argmax(probs, axis=1) == clean)
    cap = len(dataset) if per_class_cap is None else per_class_cap
    sel = _select(ok, conf, clean, dataset.c, cap)
    return PseudoAnchorSet(sel, clean[sel], dataset.noise_rows()[sel])


def posterior_error(g_e, anchors, X):
    """Mean l2 distance between estimated and true noisy posteriors over the anchors.

    ``g_e`` is a model, or an (n, c) array of posteriors already evaluated on ``X``.
    """
    if len(anchors) == 0:
        raise EvaluationError("empty pseudo-anchor set")
    if isinstance(g_e, np.ndarray):
        est = g_e[anchors.indices]
    else:
        est = predict_proba(g_e, np.asarray(X)[anchors.indices].reshape(len(anchors), -1))
    return float(np.linalg.norm(est - anchors.truth, axis=1).mean())


def test_accuracy(f, X, labels):
    """Fraction of argmax predictions equal to the clean labels.

    ``f`` is a model or a callable returning class predictions.
    """
    labels = np.asarray(labels)
    if hasattr(f, "logits"):
        pred = np.argmax(f.logits(np.asarray(X).reshape(len(labels), -1)), axis=1)
    else:
        pred = np.asarray(f(X))
    return float(np.mean(pred == labels))


test_accuracy.__test__ = False  # not a pytest test despite the name


def matrix_error(T_hat, T_true):
    try:
        return max_entry_error(T_hat, T_true)
    except ValueError as exc:
        raise ComparisonError(str(exc)) from exc


def timing_ratio(plm_manifest, forward_manifest):
    """Total PLM wall-clock over total Forward wall-clock, for matched epoch settings."""
    for key in ("epochs_labeler", "epochs_joint", "epochs_classifier", "batch_size"):
        a = plm_manifest.get("config", {}).get(key)
        b = forward_manifest.get("config", {}).get(key)
        if a != b:
            raise ComparisonError(f"manifests differ in {key}: {a} vs {b}")
    plm = sum(plm_manifest["timings_ms"].values())
    fwd = sum(forward_manifest["timings_ms"].values())
    if fwd <= 0 or plm <= 0:
        raise ComparisonError("timings must be positive")
    return plm / fwd


# -- reporting ----------------------------------------------------------


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _time_ratios(records):
    fwd = {(r.noise_kind, r.rate, r.seed): r for r in records if r.variant == "forward_baseline"}
    out = {}
    for r in records:
        if not r.variant.startswith("plm"):
            continue
        other = fwd.get((r.noise_kind, r.rate, r.seed))
        if other and sum(other.timings_ms.values()) > 0:
            out.setdefault((r.variant, r.noise_kind, r.rate), []).append(
                sum(r.timings_ms.values()) / sum(other.timings_ms.values()))
    return out


def summarize(records):
    """One row per (variant, noise kind, rate) with mean and population std over seeds."""
    if not records:
        raise EvaluationError("no records to summarise")
    cells = {}
    for r in records:
        cells.setdefault((r.variant, r.noise_kind, float(r.rate)), []).append(r)
    ratios = _time_ratios(records)
    rows = []
    for key in sorted(cells):
        rs = sorted(cells[key], key=lambda r: r.seed)
        pe = np.array([r.posterior_error for r in rs])
        acc = np.array([r.test_accuracy for r in rs])
        te = [r.T_error for r in rs if r.T_error is not None]
        tr = ratios.get(key)
        rows.append({
            "variant": key[0], "noise_kind": key[1], "rate": key[2], "n_seeds": len(rs),
            "posterior_error_mean": float(pe.mean()), "posterior_error_std": float(pe.std()),
            "acc_mean": float(acc.mean()), "acc_std": float(acc.std()),
            "T_error_mean": float(np.mean(te)) if te else None,
            "time_ratio": float(np.mean(sorted(tr))) if tr else None,
        })
    return rows


def report(records, out_path):
    """Write summary.csv and summary.json under ``out_path``; returns the rows."""
    rows = summarize(records)
    out = Path(out_path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in SUMMARY_COLUMNS])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(buf.getvalue())
        meta = {"posterior_error_pooling": "pooled mean over all pseudo-anchors", "std": "population"}
        (out / "summary.json").write_text(json.dumps({"rows": rows, "meta": meta}, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise EvaluationError(f"cannot write report to {out}: {exc}") from exc
    return rows
