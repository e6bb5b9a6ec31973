"""Teacher-forced training, checkpoints and per-epoch validation."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from cognet._io import atomic_write_bytes, atomic_write_json, atomic_write_text
from cognet.data import HEURISTICS, DatasetBundle
from cognet.graphs import build_ehr_graph
from cognet.inference import predict_patients
from cognet.layers import ModelConfig
from cognet.metrics import patient_average, patient_metrics
from cognet.model import ABLATIONS, COGNet, build_batch, build_targets

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_jaccard", "val_f1", "val_prauc", "val_ddi", "avg_drugs")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    seed: int = 1203
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    label_order: str = "rare_first"
    ablations: tuple = ()
    val_every: int = 1  # 0 disables validation; the last epoch is kept
    val_greedy: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr must be >= 0, batch_size > 0 and epochs >= 0")
        if self.label_order not in HEURISTICS:
            raise ValueError(f"unknown label order {self.label_order!r}")
        self.ablations = tuple(sorted(set(self.ablations)))
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}")
        self.betas = tuple(self.betas)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: COGNet
    history: list = field(default_factory=list)
    best_epoch: int = 0


def training_samples(patients):
    return [(p.visits, t) for p in patients for t in range(len(p.visits)) if p.visits[t].medications]


def batch_log_probs(model: COGNet, samples):
    """Teacher-forced log Pr of every target token; returns (log_probs, mask)."""
    batch = build_batch(samples, model.vocab_sizes[1])
    inputs, targets, mask = build_targets(
        [visits[t].medications for visits, t in samples], model.start_id, model.end_id
    )
    return model.token_log_probs(batch, inputs, targets, mask), mask


def sequence_loss(model: COGNet, visits, t):
    """-sum_i log Pr(M_t,i | history, D_t, P_t, true prefix), END step included."""
    for m in visits[t].medications:
        if not 0 <= m < model.n_medications:
            raise ValueError(f"target medication {m} is outside the vocabulary")
    log_probs, _ = batch_log_probs(model, [(visits, t)])
    return -log_probs.sum()


def sequence_nll(step_probs, targets):
    """Accumulate -log p over per-step probability vectors (reference arithmetic)."""
    return -math.fsum(math.log(p[y]) for p, y in zip(step_probs, targets))


def build_model(bundle: DatasetBundle, model_config: ModelConfig, ddi_adj, ablations=()):
    ehr = build_ehr_graph(bundle.train, bundle.medication_vocab.size)
    return COGNet(model_config, bundle.vocab_sizes, ehr, ddi_adj, ablations)


def evaluate_split(model, patients, ddi_adj, beam_width, max_len, greedy=False):
    preds = predict_patients(model, patients, beam_width, max_len, greedy)
    return patient_average([patient_metrics(p, ddi_adj) for p in preds])


def train(bundle: DatasetBundle, model_config: ModelConfig, config: TrainConfig, ddi_adj,
          log_path=None, model: COGNet | None = None) -> TrainResult:
    """Adam over mini-batches of (patient, visit) samples, per-token mean loss.

    The model state with the best validation Jaccard is returned (the last
    epoch when validation is disabled or the split is empty).
    """
    samples = training_samples(bundle.train)
    if not samples:
        raise ValueError("the train split has no visits with medications")
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(bundle, model_config, ddi_adj, config.ablations)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    validate = config.val_every > 0 and len(bundle.validation) > 0

    history, best_state, best_score, best_epoch = [], None, -math.inf, config.epochs
    for epoch in range(1, config.epochs + 1):
        model.train()
        started = time.perf_counter()
        order = rng.permutation(len(samples))
        total, n_tokens = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[lo:lo + config.batch_size]]
            log_probs, mask = batch_log_probs(model, chunk)
            count = int(mask.sum())
            loss = -log_probs.sum() / count
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            total += loss.item() * count
            n_tokens += count
        row = {"epoch": epoch, "train_loss": total / n_tokens}

        if validate and (epoch % config.val_every == 0 or epoch == config.epochs):
            scores = evaluate_split(model, bundle.validation, ddi_adj, model_config.beam_width,
                                    model_config.max_len, config.val_greedy)
            row.update({
                "val_jaccard": scores["jaccard"], "val_f1": scores["f1"], "val_prauc": scores["prauc"],
                "val_ddi": scores["ddi"], "avg_drugs": scores["avg_drugs"],
            })
            if scores["jaccard"] > best_score:
                best_score, best_epoch = scores["jaccard"], epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(row)
        logger.info("epoch %d loss %.4f %s (%.1fs)", epoch, row["train_loss"],
                    f"val_jaccard {row['val_jaccard']:.4f}" if "val_jaccard" in row else "",
                    time.perf_counter() - started)
        if log_path is not None:
            write_metric_log(log_path, history)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch)


def write_metric_log(path, history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, restval="", lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, model: COGNet, train_config: TrainConfig | None = None,
                    vocab_hash: str | None = None, extra=None):
    """``params.npz`` (flat name -> array, buffers included) plus ``config.json``."""
    directory = Path(directory)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(directory / "params.npz", buf.getvalue())
    meta = {
        "model_config": model.config.to_dict(),
        "vocab_sizes": list(model.vocab_sizes),
        "ablations": list(model.ablations),
        "train_config": train_config.to_dict() if train_config else None,
        "vocab_hash": vocab_hash,
    }
    if extra:
        meta.update(extra)
    atomic_write_json(directory / "config.json", meta)
    return directory


def load_checkpoint(directory):
    """Rebuild the model saved by :func:`save_checkpoint`; returns (model, meta)."""
    directory = Path(directory)
    params, config_path = directory / "params.npz", directory / "config.json"
    if not params.exists() or not config_path.exists():
        raise FileNotFoundError(f"no checkpoint in {directory}")
    meta = json.loads(config_path.read_text())
    with np.load(params) as data:
        arrays = {k: data[k] for k in data.files}
    model = COGNet(
        ModelConfig(**meta["model_config"]), meta["vocab_sizes"],
        arrays["graph.ehr_adj"], arrays["graph.ddi_adj"], meta["ablations"],
    )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model, meta
