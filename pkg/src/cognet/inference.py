"""Greedy and beam-search decoding of medication sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from cognet.metrics import VisitPrediction
from cognet.model import build_batch


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple  # generated tokens, START excluded, END included if emitted
    log_prob: float
    finished: bool
    step_probs: tuple = ()

    def medications(self, end_id: int) -> tuple:
        return tuple(t for t in self.tokens if t != end_id)


def beam_search(step_fn, beam_width: int, max_len: int, end_id: int) -> BeamHypothesis:
    """Width-limited search over ``step_fn``.

    ``step_fn(prefixes)`` returns a (len(prefixes), V) array of next-token
    probabilities.  Every live hypothesis is expanded over all tokens with
    nonzero probability and the ``beam_width`` best candidates by cumulative
    log-probability are kept; candidates ending in END, or reaching
    ``max_len`` tokens, move to the finished pool.  No length normalization.
    Ties resolve towards the earlier hypothesis, then the lower token id.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be positive")
    live = [BeamHypothesis((), 0.0, False)]
    finished = []
    for _ in range(max_len):
        probs = np.asarray(step_fn([h.tokens for h in live]), dtype=np.float64)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        cand = np.array([h.log_prob for h in live])[:, None] + logp
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")
        order = order[np.isfinite(flat[order])][:beam_width]
        survivors = []
        n_vocab = probs.shape[1]
        for idx in order:
            k, token = divmod(int(idx), n_vocab)
            parent = live[k]
            tokens = parent.tokens + (token,)
            done = token == end_id or len(tokens) >= max_len
            hyp = BeamHypothesis(tokens, parent.log_prob + float(logp[k, token]), done,
                                 parent.step_probs + (probs[k],))
            (finished if done else survivors).append(hyp)
        live = survivors
        if not live:
            break
    if not finished:
        raise RuntimeError("beam search produced no finished hypothesis")
    best = finished[0]
    for hyp in finished[1:]:
        if hyp.log_prob > best.log_prob:
            best = hyp
    return best


def greedy_search(step_fn, max_len: int, end_id: int) -> BeamHypothesis:
    tokens, log_prob, steps = (), 0.0, ()
    for _ in range(max_len):
        probs = np.asarray(step_fn([tokens]), dtype=np.float64)[0]
        token = int(np.argmax(probs))
        log_prob += float(np.log(probs[token]))
        tokens, steps = tokens + (token,), steps + (probs,)
        if token == end_id:
            break
    return BeamHypothesis(tokens, log_prob, True, steps)


def model_step_fn(model, context):
    """Wrap ``model`` and a single-visit context as a ``step_fn``."""
    selected = {}

    def step(prefixes):
        k = len(prefixes)
        if k not in selected:
            selected[k] = context.select([0] * k)
        tokens = torch.tensor([[model.start_id, *p] for p in prefixes], dtype=torch.long)
        with torch.no_grad():
            pr = model.decode(selected[k], tokens)["pr"][:, -1]
        return pr.double().numpy()

    return step


def encode_visits(model, visits, indices=None):
    """Contexts for predicting each visit in ``indices`` of one patient (batch)."""
    indices = range(len(visits)) if indices is None else indices
    batch = build_batch([(visits, t) for t in indices], model.vocab_sizes[1])
    with torch.no_grad():
        return model.encode_context(batch)


def recommend(model, visits, t, beam_width=4, max_len=45, greedy=False, context=None):
    """Decode visit ``t`` of a patient; returns (VisitPrediction, BeamHypothesis)."""
    if context is None:
        context = encode_visits(model, visits, [t])
    step = model_step_fn(model, context)
    if greedy:
        hyp = greedy_search(step, max_len, model.end_id)
    else:
        hyp = beam_search(step, beam_width, max_len, model.end_id)
    pred = VisitPrediction(hyp.medications(model.end_id), visits[t].medications,
                           np.stack(hyp.step_probs))
    return pred, hyp


def predict_patients(model, patients, beam_width=4, max_len=45, greedy=False):
    """Predictions for every visit of every patient: list (patients) of lists (visits)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for patient in patients:
            ctx = encode_visits(model, patient.visits)
            preds = []
            for t in range(len(patient.visits)):
                pred, _ = recommend(model, patient.visits, t, beam_width, max_len, greedy,
                                    context=ctx.select([t]))
                preds.append(pred)
            out.append(preds)
    finally:
        model.train(was_training)
    return out
