"""Outlier scoring and evaluation on unseen test domains.

All detectors share one orientation: higher score means more in-distribution,
so a single rank statistic scores every detector. Ties get half credit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import gda as gda_mod
from . import numcore as nc

DETECTORS = ("msp", "energy", "ddu")


def msp_score(logits) -> float:
    """Maximum softmax probability."""
    probs = nc.softmax_rows_np(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    return float(np.max(probs[0]))


def energy_score(logits, temperature: float = 1.0) -> float:
    """Temperature-scaled log-sum-exp: the negated energy, so higher is InD."""
    return float(nc.logsumexp_np(np.asarray(logits, dtype=np.float64), temperature))


def ddu_score(feature, feature_gda: gda_mod.GdaModel) -> float:
    """Log marginal feature density under the per-class Gaussians."""
    joint = gda_mod.log_densities(feature_gda, np.asarray(feature)[None, :])[0]
    return float(nc.logsumexp_np(joint, 1.0))


def auroc(ind_scores, ood_scores) -> float:
    """Probability that a random InD/OOD score pair is ordered correctly.

    Rank-based: counts strict wins and ties against the sorted OOD side, so it
    reproduces the all-pairs average exactly, ties worth one half.
    """
    ind = np.asarray(ind_scores, dtype=np.float64)
    ood = np.asarray(ood_scores, dtype=np.float64)
    if ind.size == 0 or ood.size == 0:
        raise ValueError("auroc needs nonempty score sets on both sides")
    if not (np.all(np.isfinite(ind)) and np.all(np.isfinite(ood))):
        raise ValueError("auroc scores must be finite")
    ood_sorted = np.sort(ood)
    lo = np.searchsorted(ood_sorted, ind, side="left")
    hi = np.searchsorted(ood_sorted, ind, side="right")
    wins = int(lo.sum())
    ties = int((hi - lo).sum())
    return (2 * wins + ties) / (2.0 * ind.size * ood.size)


@dataclass
class ScoredTestSet:
    """Detector scores plus the binary labels and bookkeeping for one detector."""

    detector: str
    scores: np.ndarray
    is_ind: np.ndarray
    domain: np.ndarray
    predicted_class: np.ndarray


@dataclass
class EvalRow:
    test_domain: int
    detector: str
    auroc: float | None
    ind_accuracy: float | None


@dataclass
class EvalResult:
    rows: list
    mean_auroc: dict      # detector -> mean over defined domains
    mean_accuracy: float | None

    def auroc_of(self, detector, domain=None):
        if domain is None:
            return self.mean_auroc[detector]
        for row in self.rows:
            if row.detector == detector and row.test_domain == domain:
                return row.auroc
        raise KeyError(f"no row for detector={detector} domain={domain}")


def score_test_set(predictor, train_view, test_view, temperature: float = 1.0,
                   detectors=DETECTORS):
    """Compute per-instance detector scores over a test view."""
    logits = predictor.logits(test_view.x)
    feats = predictor.features(test_view.x)
    pred_idx = np.argmax(logits, axis=1)
    predicted_class = np.array([predictor.class_ids[i] for i in pred_idx])

    scored = []
    for name in detectors:
        if name == "msp":
            probs = nc.softmax_rows_np(logits)
            scores = np.max(probs, axis=1)
        elif name == "energy":
            scores = nc.logsumexp_rows_np(logits, temperature)
        elif name == "ddu":
            train_feats = predictor.features(train_view.x)
            feature_gda = gda_mod.fit(zip(train_feats, train_view.y.tolist()))
            joint = gda_mod.log_densities(feature_gda, feats)
            scores = np.array([nc.logsumexp_np(row, 1.0) for row in joint])
        else:
            raise ValueError(f"unknown detector {name!r}")
        scored.append(ScoredTestSet(detector=name, scores=scores,
                                    is_ind=test_view.is_ind, domain=test_view.domain,
                                    predicted_class=predicted_class))
    return scored


def evaluate(predictor, train_view, test_view, temperature: float = 1.0,
             detectors=DETECTORS) -> EvalResult:
    """Per-domain AUROC for each detector plus InD multi-class accuracy.

    A domain missing either InD or OOD instances gets an undefined (None)
    AUROC cell rather than a fabricated one.
    """
    scored = score_test_set(predictor, train_view, test_view, temperature, detectors)
    domains = sorted(set(test_view.domain.tolist()))
    rows = []
    acc_by_domain = {}
    for dom in domains:
        mask = test_view.domain == dom
        ind_mask = mask & (test_view.is_ind == 1)
        ood_mask = mask & (test_view.is_ind == 0)
        acc = None
        if ind_mask.any():
            correct = scored[0].predicted_class[ind_mask] == test_view.class_id[ind_mask]
            acc = float(np.mean(correct))
        acc_by_domain[dom] = acc
        for sts in scored:
            cell = None
            if ind_mask.any() and ood_mask.any():
                cell = auroc(sts.scores[ind_mask], sts.scores[ood_mask])
            rows.append(EvalRow(test_domain=dom, detector=sts.detector,
                                auroc=cell, ind_accuracy=acc))

    mean_auroc = {}
    for name in detectors:
        cells = [r.auroc for r in rows if r.detector == name and r.auroc is not None]
        mean_auroc[name] = float(np.mean(cells)) if cells else None
    accs = [a for a in acc_by_domain.values() if a is not None]
    return EvalResult(rows=rows, mean_auroc=mean_auroc,
                      mean_accuracy=float(np.mean(accs)) if accs else None)


RESULT_COLUMNS = ("benchmark", "seed", "ood_class", "test_domain", "detector",
                  "auroc", "ind_accuracy")


def write_results_csv(rows, path):
    """Write result rows (dicts keyed by RESULT_COLUMNS); None cells stay empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = {k: row.get(k) for k in RESULT_COLUMNS}
            for key in ("auroc", "ind_accuracy"):
                if out[key] is None:
                    out[key] = ""
            writer.writerow(out)
