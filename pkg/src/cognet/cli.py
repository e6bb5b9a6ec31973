"""Command-line entry point: data generation, training, evaluation, explanation, statistics.

Resolved settings come from flags, then an optional ``--config`` file (TOML or
JSON), then built-in defaults.  Every run writes ``manifest.json`` next to its
outputs.  Exit codes: 0 ok, 2 invalid input, 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from cognet._io import atomic_write_json, atomic_write_text, file_sha256
from cognet.data import (
    HEURISTICS,
    SPLITS,
    DataValidationError,
    corpus_statistics,
    generate_synthetic_cohort,
    ingest_exported_tables,
    load_bundle,
    order_medications,
    save_bundle,
    split_dataset,
    synthetic_ddi_pairs,
)
from cognet.graphs import load_ddi_graph, write_ddi_edge_list

logger = logging.getLogger("cognet")

OUTPUT_ROOT_ENV = "COGNET_OUTPUT_ROOT"
SCHEMA_PATH = Path(__file__).with_name("schemas") / "explain.schema.json"

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

DEFAULTS = {
    "gen-data": {
        "patients": 500, "persistence": 0.7, "seed": 7, "vocab_sizes": [120, 40, 60],
        "ratios": [2 / 3, 1 / 6, 1 / 6], "order": "rare_first",
    },
    "ingest": {
        "admissions": None, "diagnoses": None, "procedures": None, "prescriptions": None,
        "drug_map": None, "ddi": None, "top_k": 300, "seed": 1203,
        "ratios": [2 / 3, 1 / 6, 1 / 6], "order": "rare_first",
    },
    "train": {
        "data": None, "ddi": None, "dim": 64, "heads": 4, "gate_dim": 32, "lr": 1e-4,
        "batch_size": 16, "epochs": 50, "seed": 1203, "order": "rare_first", "ablate": [],
        "beam_width": 4, "max_len": 45, "val_every": 1, "val_greedy": False, "dtype": "float32",
        "grad_clip": None,
    },
    "evaluate": {
        "checkpoint": None, "data": None, "ddi": None, "split": "test", "greedy": False,
        "beam_width": None, "max_len": None, "rounds": 10, "frac": 0.8, "seed": 1203,
    },
    "explain": {
        "checkpoint": None, "data": None, "patient": None, "visit": None, "greedy": False,
        "beam_width": None, "max_len": None, "plot": False,
    },
    "stats": {"data": None, "splits": list(SPLITS), "bins": 10, "plot": False},
}


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# argument parsing and config resolution
# ---------------------------------------------------------------------------

def _int_list(text):
    return [int(v) for v in text.split(",")]


def _float_list(text):
    out = []
    for v in text.split(","):
        num, _, den = v.partition("/")
        out.append(float(num) / float(den) if den else float(num))
    return out


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset flags out of the namespace so config-file values can fill them
    parser = argparse.ArgumentParser(prog="cognet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="TOML or JSON file of default settings")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name})")
        return p

    p = command("gen-data", "generate a synthetic cohort with a rule-based prescription table")
    p.add_argument("--patients", type=int)
    p.add_argument("--persistence", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-sizes", type=_int_list, help="diagnoses,procedures,medications")
    p.add_argument("--ratios", type=_float_list, help="train,validation,test (fractions allowed, e.g. 2/3)")
    p.add_argument("--order", choices=HEURISTICS)

    p = command("ingest", "build a dataset from exported hospital tables")
    for name in ("admissions", "diagnoses", "procedures", "prescriptions"):
        p.add_argument(f"--{name}")
    p.add_argument("--drug-map", help="two-column CSV mapping prescription codes to medication codes")
    p.add_argument("--ddi", help="interaction edge list (code_a,code_b) copied next to the dataset")
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", type=_float_list)
    p.add_argument("--order", choices=HEURISTICS)

    p = command("train", "train a model and keep the best validation checkpoint")
    p.add_argument("--data")
    p.add_argument("--ddi", help="edge list (default: <data>/ddi.csv)")
    for name, kind in (("dim", int), ("heads", int), ("gate-dim", int), ("lr", float),
                       ("batch-size", int), ("epochs", int), ("seed", int), ("beam-width", int),
                       ("max-len", int), ("val-every", int), ("grad-clip", float)):
        p.add_argument(f"--{name}", type=kind)
    p.add_argument("--order", choices=HEURISTICS)
    p.add_argument("--ablate", action="append",
                   choices=("copy", "visit_scores", "graphs", "diagnoses", "procedures"))
    p.add_argument("--val-greedy", action="store_true")
    p.add_argument("--dtype", choices=("float32", "float64"))

    p = command("evaluate", "bootstrap metrics of a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--ddi", help="edge list for the DDI metric (default: the checkpoint's graph)")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--greedy", action="store_true")
    for name, kind in (("beam-width", int), ("max-len", int), ("rounds", int), ("frac", float), ("seed", int)):
        p.add_argument(f"--{name}", type=kind)

    p = command("explain", "export copy probabilities for one patient visit")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--patient")
    p.add_argument("--visit", type=int, help="1-based visit index; must have an earlier visit")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--plot", action="store_true", help="also write a heatmap PNG (needs matplotlib)")

    p = command("stats", "repeat-prescription histograms of a dataset")
    p.add_argument("--data")
    p.add_argument("--splits", type=lambda s: s.split(","))
    p.add_argument("--bins", type=int)
    p.add_argument("--plot", action="store_true")
    return parser


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(raw.decode())
        return json.loads(raw)
    except ValueError as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from exc


def resolve_settings(command: str, flags: dict) -> dict:
    """Merge defaults < config file < flags; unknown config keys are an error.

    A config file may hold the settings at top level or under a table named
    after the command.
    """
    settings = dict(DEFAULTS[command])
    settings["out"] = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command)
    if "config" in flags:
        data = read_config_file(flags["config"])
        data = data.get(command, data)
        file_settings = {k.replace("-", "_"): v for k, v in data.items()
                         if not isinstance(v, dict)}
        unknown = set(file_settings) - set(settings)
        if unknown:
            raise UsageError(f"unknown settings in config file: {sorted(unknown)}")
        settings.update(file_settings)
    settings.update({k: v for k, v in flags.items() if k != "config"})
    return settings


def require(settings, *names):
    missing = [n for n in names if settings.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required settings: " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def source_revision() -> str:
    """Content hash of the package sources, formatted like a short commit id."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".json") and "__pycache__" not in path.parts:
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _hashes(paths):
    return {str(p): file_sha256(p) for p in paths if p is not None and Path(p).is_file()}


def write_manifest(out_dir, command, settings, seeds, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": settings,
        "seeds": seeds,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "revision": source_revision(),
    }
    path = Path(out_dir) / "manifest.json"
    atomic_write_json(path, manifest)
    return path


def _dataset_files(data_dir):
    data_dir = Path(data_dir)
    return [data_dir / f"{s}.jsonl" for s in SPLITS] + [data_dir / "vocab.json"]


def _vocab_hash(bundle):
    return hashlib.sha256("".join(
        v.digest() for v in (bundle.diagnosis_vocab, bundle.procedure_vocab, bundle.medication_vocab)
    ).encode()).hexdigest()


def _load_data(path):
    if not Path(path, "vocab.json").is_file():
        raise UsageError(f"no dataset in {path} (vocab.json missing)")
    return load_bundle(path)


def _load_checkpoint(path):
    from cognet.training import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(settings, started):
    out = Path(settings["out"])
    p = settings["persistence"]
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"--persistence must lie in [0, 1], got {p}")
    if settings["patients"] < 1:
        raise UsageError("--patients must be positive")
    bundle = generate_synthetic_cohort(settings["patients"], p, settings["seed"],
                                       tuple(settings["vocab_sizes"]))
    bundle = split_dataset(bundle, tuple(settings["ratios"]), settings["seed"])
    bundle = order_medications(bundle, settings["order"])
    paths = list(save_bundle(bundle, out).values())
    ddi_path = out / "ddi.csv"
    write_ddi_edge_list(ddi_path, synthetic_ddi_pairs(bundle.medication_vocab.size), bundle.medication_vocab)
    paths.append(ddi_path)
    write_manifest(out, "gen-data", settings, {"seed": settings["seed"]}, [], paths, started)
    print(f"wrote {len(bundle.train)}/{len(bundle.validation)}/{len(bundle.test)} patients to {out}")


def cmd_ingest(settings, started):
    require(settings, "admissions", "diagnoses", "procedures", "prescriptions", "drug_map")
    out = Path(settings["out"])
    inputs = [settings[k] for k in ("admissions", "diagnoses", "procedures", "prescriptions", "drug_map")]
    for path in inputs:
        if not Path(path).is_file():
            raise UsageError(f"input table {path} not found")
    bundle = ingest_exported_tables(*inputs, top_k_med=settings["top_k"])
    bundle = split_dataset(bundle, tuple(settings["ratios"]), settings["seed"])
    bundle = order_medications(bundle, settings["order"])
    paths = list(save_bundle(bundle, out).values())
    if settings["ddi"]:
        adj, n_pairs, _ = _read_ddi(settings["ddi"], bundle.medication_vocab)
        pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(adj, 1)))]
        write_ddi_edge_list(out / "ddi.csv", pairs, bundle.medication_vocab)
        paths.append(out / "ddi.csv")
        inputs.append(settings["ddi"])
    summary = corpus_statistics(bundle)["summary"]
    atomic_write_json(out / "summary.json", summary)
    paths.append(out / "summary.json")
    write_manifest(out, "ingest", settings, {"seed": settings["seed"]}, inputs, paths, started)
    print(f"{summary['n_visits']} visits / {summary['n_patients']} patients; "
          f"vocab sizes {'/'.join(str(v) for v in bundle.vocab_sizes)}")


def _read_ddi(path, vocab):
    try:
        return load_ddi_graph(path, vocab)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(settings, started):
    from cognet.layers import ModelConfig
    from cognet.training import TrainConfig, TrainingDiverged, save_checkpoint, train

    require(settings, "data")
    out = Path(settings["out"])
    bundle = _load_data(settings["data"])
    ddi_path = settings["ddi"] or str(Path(settings["data"]) / "ddi.csv")
    ddi_adj, _, _ = _read_ddi(ddi_path, bundle.medication_vocab)
    try:
        model_config = ModelConfig(
            dim=settings["dim"], heads=settings["heads"], gate_dim=settings["gate_dim"],
            max_len=settings["max_len"], beam_width=settings["beam_width"],
            init_seed=settings["seed"], dtype=settings["dtype"],
        )
        train_config = TrainConfig(
            lr=settings["lr"], batch_size=settings["batch_size"], epochs=settings["epochs"],
            seed=settings["seed"], label_order=settings["order"], ablations=tuple(settings["ablate"]),
            val_every=settings["val_every"], val_greedy=settings["val_greedy"],
            grad_clip=settings["grad_clip"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bundle = order_medications(bundle, train_config.label_order)
    log_path = out / "train_log.csv"
    try:
        result = train(bundle, model_config, train_config, ddi_adj, log_path=log_path)
    except TrainingDiverged as exc:
        write_manifest(out, "train", settings, {"seed": settings["seed"]},
                       _dataset_files(settings["data"]) + [ddi_path], [log_path], started)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, result.model, train_config, _vocab_hash(bundle),
                    extra={"best_epoch": result.best_epoch})
    write_manifest(out, "train", settings, {"seed": settings["seed"]},
                   _dataset_files(settings["data"]) + [ddi_path],
                   [ckpt / "params.npz", ckpt / "config.json", log_path], started)
    print(f"checkpoint (epoch {result.best_epoch}) written to {ckpt}")
    return EXIT_OK


def _check_vocab(meta, bundle):
    if meta.get("vocab_hash") and meta["vocab_hash"] != _vocab_hash(bundle):
        raise UsageError("checkpoint vocabulary does not match the dataset")


def cmd_evaluate(settings, started):
    from cognet.evaluation import evaluate_model, format_report

    require(settings, "checkpoint", "data")
    out = Path(settings["out"])
    model, meta = _load_checkpoint(settings["checkpoint"])
    bundle = _load_data(settings["data"])
    _check_vocab(meta, bundle)
    patients = bundle.patients(settings["split"])
    if not patients:
        raise UsageError(f"split {settings['split']!r} is empty")
    if not (settings["rounds"] >= 1 and 0 < settings["frac"] <= 1):
        raise UsageError("--rounds must be >= 1 and --frac in (0, 1]")
    inputs = [Path(settings["checkpoint"]) / "params.npz"] + _dataset_files(settings["data"])
    if settings["ddi"]:
        ddi_adj, _, _ = _read_ddi(settings["ddi"], bundle.medication_vocab)
        inputs.append(settings["ddi"])
    else:
        ddi_adj = model.graph.ddi_adj.double().numpy()
    beam_width = settings["beam_width"] or model.config.beam_width
    max_len = settings["max_len"] or model.config.max_len
    report, _ = evaluate_model(model, patients, ddi_adj, beam_width, max_len, settings["greedy"],
                               settings["rounds"], settings["frac"], settings["seed"])
    report_path = out / "report.json"
    atomic_write_json(report_path, {
        "decoding": "greedy" if settings["greedy"] else f"beam{beam_width}",
        "split": settings["split"], "n_patients": len(patients), "metrics": report,
    })
    write_manifest(out, "evaluate", settings, {"seed": settings["seed"]}, inputs, [report_path], started)
    print(format_report(report))


def explain_visit(model, patient, visit_index, beam_width, max_len, greedy=False):
    """Copy-path trace of decoding ``visit_index`` (0-based) of ``patient``."""
    import torch

    from cognet.inference import encode_visits, recommend

    ctx = encode_visits(model, patient.visits, [visit_index])
    pred, hyp = recommend(model, patient.visits, visit_index, beam_width, max_len, greedy, context=ctx)
    tokens = torch.tensor([[model.start_id, *hyp.tokens[:-1]]], dtype=torch.long)
    with torch.no_grad():
        out = model.decode(ctx, tokens)
    history = sorted({m for v in patient.visits[:visit_index] for m in v.medications})
    pr_c = out["pr_c"][0][:, history].double().numpy()
    return {
        "pred": pred,
        "tokens": list(hyp.tokens),
        "history_meds": history,
        "pr_c": pr_c,
        "w_g": out["w_g"][0].double().numpy(),
        "visit_scores": ctx.visit_scores[0, :visit_index].double().numpy(),
    }


def cmd_explain(settings, started):
    require(settings, "checkpoint", "data", "patient", "visit")
    out = Path(settings["out"])
    model, meta = _load_checkpoint(settings["checkpoint"])
    bundle = _load_data(settings["data"])
    _check_vocab(meta, bundle)
    matches = [p for p in bundle.patients() if p.patient_id == settings["patient"]]
    if not matches:
        raise UsageError(f"patient {settings['patient']!r} not found")
    patient = matches[0]
    visit = settings["visit"]
    if visit == 1:
        raise UsageError("visit 1 has no earlier visits to copy from")
    if not 2 <= visit <= len(patient.visits):
        raise UsageError(f"--visit must lie in [2, {len(patient.visits)}]")
    if not model.uses("copy"):
        raise UsageError("the checkpoint was trained without the copy path")
    trace = explain_visit(model, patient, visit - 1, settings["beam_width"] or model.config.beam_width,
                          settings["max_len"] or model.config.max_len, settings["greedy"])
    vocab = bundle.medication_vocab

    def code(token):
        return "<END>" if token == model.end_id else vocab.decode(token)

    doc = {
        "patient_id": patient.patient_id,
        "visit": visit,
        "decoding": "greedy" if settings["greedy"] else "beam",
        "steps": [code(t) for t in trace["tokens"]],
        "historical_medications": [vocab.decode(m) for m in trace["history_meds"]],
        "pr_c": trace["pr_c"].tolist(),
        "w_g": trace["w_g"].tolist(),
        "visit_scores": trace["visit_scores"].tolist(),
        "predicted": [vocab.decode(m) for m in trace["pred"].order],
        "truth": [vocab.decode(m) for m in patient.visits[visit - 1].medications],
    }
    validate_explanation(doc)
    outputs = [out / "explain.json"]
    atomic_write_json(outputs[0], doc)
    if settings["plot"]:
        from cognet.plots import copy_heatmap

        outputs.append(copy_heatmap(out / "explain.png", doc))
    write_manifest(out, "explain", settings, {}, [Path(settings["checkpoint"]) / "params.npz"]
                   + _dataset_files(settings["data"]), outputs, started)
    print(f"wrote {outputs[0]}")


def validate_explanation(doc):
    import jsonschema

    jsonschema.validate(doc, json.loads(SCHEMA_PATH.read_text()))


def histogram_rows(stats, bins):
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = {k: np.histogram(stats[k], bins=edges)[0] for k in ("repeated_proportion", "history_jaccard")}
    return [
        {"bin_low": round(float(edges[i]), 10), "bin_high": round(float(edges[i + 1]), 10),
         "repeated_proportion": int(counts["repeated_proportion"][i]),
         "history_jaccard": int(counts["history_jaccard"][i])}
        for i in range(bins)
    ]


def cmd_stats(settings, started):
    require(settings, "data")
    out = Path(settings["out"])
    if settings["bins"] < 1:
        raise UsageError("--bins must be positive")
    unknown = set(settings["splits"]) - set(SPLITS)
    if unknown:
        raise UsageError(f"unknown splits {sorted(unknown)}")
    bundle = _load_data(settings["data"])
    stats = corpus_statistics(bundle, tuple(settings["splits"]))
    if not stats["repeated_proportion"]:
        raise UsageError("no visit has an earlier visit; histograms would be empty")
    rows = histogram_rows(stats, settings["bins"])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    outputs = [out / "histogram.csv", out / "summary.json"]
    atomic_write_text(outputs[0], buf.getvalue())
    atomic_write_json(outputs[1], stats["summary"])
    if settings["plot"]:
        from cognet.plots import repeat_histograms

        outputs.append(repeat_histograms(out / "histogram.png", rows))
    write_manifest(out, "stats", settings, {}, _dataset_files(settings["data"]), outputs, started)
    print(json.dumps(stats["summary"], indent=2, sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data, "ingest": cmd_ingest, "train": cmd_train,
    "evaluate": cmd_evaluate, "explain": cmd_explain, "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    started = time.perf_counter()
    try:
        import torch

        torch.set_num_threads(1)
        settings = resolve_settings(args.command, flags)
        code = COMMANDS[args.command](settings, started)
    except (UsageError, DataValidationError, ValueError, ImportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
