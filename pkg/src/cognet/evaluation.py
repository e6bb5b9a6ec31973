"""Bootstrap evaluation: repeated patient subsamples of a test split."""
from __future__ import annotations

import math
import statistics

import numpy as np

from cognet.inference import predict_patients
from cognet.metrics import METRICS, patient_metrics


def bootstrap_rounds(per_patient, rounds=10, frac=0.8, seed=1203):
    """Metric values of each round; a round averages a patient subsample drawn
    without replacement (a fresh draw from the full pool every round)."""
    if not per_patient:
        raise ValueError("empty test split")
    if rounds < 1 or not 0 < frac <= 1:
        raise ValueError("rounds must be >= 1 and frac in (0, 1]")
    n = len(per_patient)
    size = max(1, int(round(frac * n)))
    rng = np.random.default_rng(seed)
    names = [m for m in METRICS if m in per_patient[0]]
    out = []
    for _ in range(rounds):
        # sorted so the summation order does not depend on the draw
        idx = np.sort(rng.choice(n, size=size, replace=False))
        out.append({m: math.fsum(per_patient[i][m] for i in idx) / size for m in names})
    return out


def summarize(rounds) -> dict:
    """{metric: {mean, std}} with the population standard deviation."""
    return {
        m: {"mean": statistics.fmean(r[m] for r in rounds),
            "std": statistics.pstdev([r[m] for r in rounds])}
        for m in rounds[0]
    }


def bootstrap_evaluate(predictions, ddi_adj, rounds=10, frac=0.8, seed=1203) -> dict:
    """``predictions``: per patient, the list of its VisitPredictions."""
    per_patient = [patient_metrics(p, ddi_adj) for p in predictions]
    return summarize(bootstrap_rounds(per_patient, rounds, frac, seed))


def evaluate_model(model, patients, ddi_adj, beam_width=4, max_len=45, greedy=False,
                   rounds=10, frac=0.8, seed=1203):
    preds = predict_patients(model, patients, beam_width, max_len, greedy)
    return bootstrap_evaluate(preds, ddi_adj, rounds, frac, seed), preds


def format_report(report) -> str:
    return "\n".join(f"{m:<10} {v['mean']:.4f} ± {v['std']:.4f}" for m, v in report.items())
