"""Set-prediction metrics: Jaccard, F1, PRAUC, DDI rate and drug count.

Each metric is a per-visit score averaged over a patient's visits; patient
scores are then averaged with equal weight (:func:`patient_average`).
Undefined 0/0 cases contribute 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

METRICS = ("jaccard", "f1", "prauc", "ddi", "avg_drugs")


@dataclass(frozen=True)
class VisitPrediction:
    order: tuple
    truth: frozenset
    step_probs: np.ndarray | None = None  # (steps, >= |M|); row i emitted order[i]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(m) for m in self.order))
        object.__setattr__(self, "truth", frozenset(int(m) for m in self.truth))
        if len(set(self.order)) != len(self.order):
            raise ValueError("recommended order contains duplicates")

    @property
    def predicted(self) -> frozenset:
        return frozenset(self.order)


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def visit_jaccard(pred, truth) -> float:
    pred, truth = set(pred), set(truth)
    union = len(pred | truth)
    return len(pred & truth) / union if union else 0.0


def visit_f1(pred, truth) -> float:
    pred, truth = set(pred), set(truth)
    inter = len(pred & truth)
    if not inter:
        return 0.0
    precision, recall = inter / len(pred), inter / len(truth)
    return 2 * precision * recall / (precision + recall)


def prauc_scores(order, step_probs, n_medications: int) -> np.ndarray:
    """Emission-step probability for recommended meds, mean over steps otherwise."""
    if step_probs is None or len(step_probs) == 0:
        raise ValueError("PRAUC needs the per-step probability vectors")
    probs = np.asarray(step_probs, dtype=np.float64)[:, :n_medications]
    scores = probs.mean(axis=0)
    for step, med in enumerate(order):
        scores[med] = probs[step, med]
    return scores


def average_precision(scores, relevant) -> float:
    """Sum_k Precision(k) * (Recall(k) - Recall(k-1)); ties ranked by ascending id."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    ranking = np.lexsort((np.arange(len(scores)), -scores))
    hits, total = 0, 0.0
    for k, med in enumerate(ranking, start=1):
        if med in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def visit_prauc(pred: VisitPrediction, n_medications: int) -> float:
    if not pred.truth:
        return 0.0
    return average_precision(prauc_scores(pred.order, pred.step_probs, n_medications), pred.truth)


def visit_ddi(pred, ddi_adj) -> float:
    pairs = list(combinations(list(pred), 2))
    if not pairs:
        return 0.0
    return sum(1 for i, j in pairs if ddi_adj[i, j] == 1) / len(pairs)


def jaccard(visits) -> float:
    return _mean(visit_jaccard(v.predicted, v.truth) for v in visits)


def f1(visits) -> float:
    return _mean(visit_f1(v.predicted, v.truth) for v in visits)


def prauc(visits, n_medications: int) -> float:
    return _mean(visit_prauc(v, n_medications) for v in visits)


def ddi_rate(visits, ddi_adj) -> float:
    return _mean(visit_ddi(v.order, ddi_adj) for v in visits)


def avg_drug_count(visits) -> float:
    return _mean(len(v.predicted) for v in visits)


def patient_metrics(visits, ddi_adj, n_medications=None) -> dict:
    """All metrics for one patient's visit predictions."""
    n_medications = ddi_adj.shape[0] if n_medications is None else n_medications
    with_probs = all(v.step_probs is not None for v in visits)
    return {
        "jaccard": jaccard(visits),
        "f1": f1(visits),
        "prauc": prauc(visits, n_medications) if with_probs else float("nan"),
        "ddi": ddi_rate(visits, ddi_adj),
        "avg_drugs": avg_drug_count(visits),
    }


def patient_average(per_patient) -> dict:
    """Equal-weight mean of per-patient metric dicts."""
    if not per_patient:
        raise ValueError("no patients to average")
    return {name: _mean(p[name] for p in per_patient) for name in per_patient[0]}


def ground_truth_ddi(patients, ddi_adj) -> float:
    """DDI rate of the recorded prescriptions themselves."""
    return patient_average(
        [{"ddi": ddi_rate([VisitPrediction(v.medications, v.medications) for v in p.visits], ddi_adj)}
         for p in patients]
    )["ddi"]
