"""EHR data model, synthetic cohorts, table ingestion, splitting and label ordering.

Patients are stored as chronological visits.  Each visit carries diagnosis and
procedure id sets (kept as sorted tuples) and an *ordered* medication tuple;
the order is the decoding target order and is set by :func:`order_medications`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from cognet._io import atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

DIAGNOSIS = "diagnosis"
PROCEDURE = "procedure"
MEDICATION = "medication"
KINDS = (DIAGNOSIS, PROCEDURE, MEDICATION)

HEURISTICS = ("rare_first", "frequent_first", "early_first", "late_first")
SPLITS = ("train", "validation", "test")

# synthetic generator limits
MAX_MEDS_PER_VISIT = 10
VISITS_RANGE = (2, 5)
DIAG_RANGE = (1, 8)
PROC_RANGE = (0, 4)


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class CodeVocabulary:
    kind: str
    id_to_code: tuple
    code_to_id: Mapping = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataValidationError(f"unknown vocabulary kind {self.kind!r}")
        codes = tuple(str(c) for c in self.id_to_code)
        if len(set(codes)) != len(codes):
            raise DataValidationError(f"duplicate codes in {self.kind} vocabulary")
        object.__setattr__(self, "id_to_code", codes)
        object.__setattr__(self, "code_to_id", {c: i for i, c in enumerate(codes)})

    @property
    def size(self) -> int:
        """Number of clinical codes (START/END are not counted)."""
        return len(self.id_to_code)

    # Reserved decoder tokens follow the clinical ids: END first, so decoder
    # output columns coincide with token ids.
    @property
    def end_id(self) -> int:
        self._require_medication()
        return self.size

    @property
    def start_id(self) -> int:
        self._require_medication()
        return self.size + 1

    def _require_medication(self):
        if self.kind != MEDICATION:
            raise AttributeError("only the medication vocabulary reserves START/END")

    def encode(self, code) -> int:
        return self.code_to_id[str(code)]

    def decode(self, idx: int) -> str:
        if self.kind == MEDICATION and idx == self.size:
            return "<END>"
        if self.kind == MEDICATION and idx == self.size + 1:
            return "<START>"
        return self.id_to_code[idx]

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for code in self.id_to_code:
            h.update(b"\x00" + code.encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Visit:
    diagnoses: tuple
    procedures: tuple
    medications: tuple

    def __post_init__(self):
        object.__setattr__(self, "diagnoses", tuple(sorted({int(d) for d in self.diagnoses})))
        object.__setattr__(self, "procedures", tuple(sorted({int(p) for p in self.procedures})))
        meds = tuple(int(m) for m in self.medications)
        if len(set(meds)) != len(meds):
            raise DataValidationError(f"duplicate medications in visit: {meds}")
        object.__setattr__(self, "medications", meds)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))


@dataclass(frozen=True)
class DatasetBundle:
    train: tuple
    validation: tuple
    test: tuple
    diagnosis_vocab: CodeVocabulary
    procedure_vocab: CodeVocabulary
    medication_vocab: CodeVocabulary
    med_frequency: Mapping = field(default=None, compare=False)

    def __post_init__(self):
        for name in SPLITS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.med_frequency is None:
            object.__setattr__(self, "med_frequency", medication_frequency(self.train))
        self._validate()

    def _validate(self):
        seen = set()
        sizes = (self.diagnosis_vocab.size, self.procedure_vocab.size, self.medication_vocab.size)
        for name in SPLITS:
            for patient in getattr(self, name):
                if patient.patient_id in seen:
                    raise DataValidationError(f"patient {patient.patient_id} appears twice")
                seen.add(patient.patient_id)
                for visit in patient.visits:
                    for ids, bound in zip(
                        (visit.diagnoses, visit.procedures, visit.medications), sizes
                    ):
                        if any(i < 0 or i >= bound for i in ids):
                            raise DataValidationError(
                                f"code id out of range in patient {patient.patient_id}"
                            )
                    if not visit.diagnoses:
                        raise DataValidationError(
                            f"visit without diagnoses in patient {patient.patient_id}"
                        )

    @property
    def vocab_sizes(self):
        return (self.diagnosis_vocab.size, self.procedure_vocab.size, self.medication_vocab.size)

    def patients(self, split=None):
        if split is None:
            return self.train + self.validation + self.test
        return getattr(self, split)

    def with_splits(self, train, validation, test) -> DatasetBundle:
        return replace(self, train=train, validation=validation, test=test, med_frequency=None)


def medication_frequency(records) -> dict:
    """Visit-level occurrence count of each medication id."""
    counts = Counter()
    for patient in records:
        for visit in patient.visits:
            counts.update(visit.medications)
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# synthetic cohort
# ---------------------------------------------------------------------------

def rule_medication(diagnosis_id: int, n_medications: int) -> int:
    """Fixed diagnosis -> medication rule used by the synthetic generator."""
    return (37 * diagnosis_id + 11) % n_medications


def synthetic_ddi_pairs(n_medications: int):
    """Fixed interacting medication pairs for synthetic cohorts (id pairs, i < j)."""
    pairs = set()
    for m in range(0, n_medications, 6):
        other = (5 * m + 2) % n_medications
        if other != m:
            pairs.add((min(m, other), max(m, other)))
    return sorted(pairs)


def _code(prefix, i):
    return f"{prefix}{i:04d}"


def generate_synthetic_cohort(
    n_patients: int,
    persistence: float,
    seed: int,
    vocab_sizes: Sequence[int] = (120, 40, 60),
) -> DatasetBundle:
    """Generate a deterministic synthetic cohort; every patient lands in ``train``.

    Each visit draws 1-8 diagnoses and 0-4 procedures uniformly.  Its
    medications are the previous visit's medications, each kept with
    probability ``persistence``, topped up with the rule medications of the
    current diagnoses (admitted in random order) until ``MAX_MEDS_PER_VISIT``.
    """
    if not isinstance(n_patients, (int, np.integer)) or n_patients < 1:
        raise DataValidationError("n_patients must be a positive integer")
    if not (0.0 <= persistence <= 1.0) or math.isnan(persistence):
        raise DataValidationError(f"persistence must lie in [0, 1], got {persistence}")
    if len(vocab_sizes) != 3 or any(int(v) < 4 for v in vocab_sizes):
        raise DataValidationError("vocab sizes must be three integers >= 4")
    n_diag, n_proc, n_med = (int(v) for v in vocab_sizes)

    rng = np.random.default_rng(seed)
    patients = []
    for i in range(n_patients):
        n_visits = int(rng.integers(VISITS_RANGE[0], VISITS_RANGE[1] + 1))
        prev_meds = ()
        visits = []
        for _ in range(n_visits):
            k_diag = min(int(rng.integers(DIAG_RANGE[0], DIAG_RANGE[1] + 1)), n_diag)
            k_proc = min(int(rng.integers(PROC_RANGE[0], PROC_RANGE[1] + 1)), n_proc)
            diags = rng.choice(n_diag, size=k_diag, replace=False)
            procs = rng.choice(n_proc, size=k_proc, replace=False)
            fresh = sorted({rule_medication(int(d), n_med) for d in diags})

            keep = rng.random(len(prev_meds)) < persistence
            carried = [m for m, k in zip(prev_meds, keep) if k]
            candidates = [m for m in fresh if m not in carried]
            room = MAX_MEDS_PER_VISIT - len(carried)
            admitted = [int(m) for m in rng.permutation(candidates)[:room]] if candidates else []
            meds = tuple(sorted(carried + admitted))
            visits.append(Visit(tuple(diags), tuple(procs), meds))
            prev_meds = meds
        patients.append(PatientRecord(f"syn{i:06d}", visits))

    return DatasetBundle(
        train=patients,
        validation=(),
        test=(),
        diagnosis_vocab=CodeVocabulary(DIAGNOSIS, [_code("D", i) for i in range(n_diag)]),
        procedure_vocab=CodeVocabulary(PROCEDURE, [_code("P", i) for i in range(n_proc)]),
        medication_vocab=CodeVocabulary(MEDICATION, [_code("M", i) for i in range(n_med)]),
    )


# ---------------------------------------------------------------------------
# ingestion of exported MIMIC-style tables
# ---------------------------------------------------------------------------

DEFAULT_COLUMNS = {
    "subject": "SUBJECT_ID",
    "admission": "HADM_ID",
    "admit_time": "ADMITTIME",
    "diagnosis_code": "ICD9_CODE",
    "procedure_code": "ICD9_CODE",
    "drug_code": "NDC",
    "map_source": "NDC",
    "map_target": "ATC",
}


def _read_table(path_or_frame, required, name):
    import pandas as pd

    if isinstance(path_or_frame, pd.DataFrame):
        frame = path_or_frame.astype(str)
    else:
        frame = pd.read_csv(path_or_frame, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataValidationError(f"{name} table is missing columns {missing}")
    return frame


def top_k_codes(counts: Mapping, k: int):
    """Most frequent ``k`` codes; ties broken by code order."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {code for code, _ in ranked[:k]}


def ingest_exported_tables(
    admissions,
    diagnoses,
    procedures,
    prescriptions,
    drug_code_map,
    top_k_med: int = 300,
    columns: Mapping | None = None,
) -> DatasetBundle:
    """Build a bundle from exported admission/diagnosis/procedure/prescription tables.

    Drug codes are mapped through ``drug_code_map`` (a two-column table, e.g.
    NDC -> ATC); unmapped prescriptions are dropped.  Visits must appear in all
    three clinical tables; patients with fewer than two visits are dropped.
    All patients are returned in the ``train`` split.
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    subj, adm = cols["subject"], cols["admission"]

    adm_t = _read_table(admissions, [subj, adm, cols["admit_time"]], "admissions")
    diag_t = _read_table(diagnoses, [subj, adm, cols["diagnosis_code"]], "diagnoses")
    proc_t = _read_table(procedures, [subj, adm, cols["procedure_code"]], "procedures")
    rx_t = _read_table(prescriptions, [subj, adm, cols["drug_code"]], "prescriptions")
    map_t = _read_table(drug_code_map, [cols["map_source"], cols["map_target"]], "drug code map")

    mapping = dict(zip(map_t[cols["map_source"]], map_t[cols["map_target"]]))
    rx = rx_t[[subj, adm]].copy()
    rx["med"] = rx_t[cols["drug_code"]].map(mapping)
    rx = rx.dropna().drop_duplicates()
    rx = rx[rx["med"] != ""]

    keep = top_k_codes(rx["med"].value_counts().to_dict(), top_k_med)
    rx = rx[rx["med"].isin(keep)]

    def grouped(frame, code_col):
        frame = frame[frame[code_col] != ""]
        return {k: sorted(set(v)) for k, v in frame.groupby([subj, adm])[code_col]}

    diag_map = grouped(diag_t, cols["diagnosis_code"])
    proc_map = grouped(proc_t, cols["procedure_code"])
    med_map = grouped(rx, "med")

    visit_keys = set(diag_map) & set(proc_map) & set(med_map)
    times = {
        (row[0], row[1]): row[2]
        for row in adm_t[[subj, adm, cols["admit_time"]]].itertuples(index=False)
    }
    by_patient = {}
    for key in visit_keys:
        if key not in times:
            continue
        by_patient.setdefault(key[0], []).append(key)
    by_patient = {p: keys for p, keys in by_patient.items() if len(keys) >= 2}
    if not by_patient:
        raise DataValidationError("no patients with at least two visits after filtering")

    diag_vocab = CodeVocabulary(
        DIAGNOSIS, sorted({c for p in by_patient.values() for k in p for c in diag_map[k]})
    )
    proc_vocab = CodeVocabulary(
        PROCEDURE, sorted({c for p in by_patient.values() for k in p for c in proc_map[k]})
    )
    med_vocab = CodeVocabulary(
        MEDICATION, sorted({c for p in by_patient.values() for k in p for c in med_map[k]})
    )

    patients = []
    for pid in sorted(by_patient):
        keys = sorted(by_patient[pid], key=lambda k: (times[k], k[1]))
        visits = [
            Visit(
                [diag_vocab.encode(c) for c in diag_map[k]],
                [proc_vocab.encode(c) for c in proc_map[k]],
                sorted(med_vocab.encode(c) for c in med_map[k]),
            )
            for k in keys
        ]
        patients.append(PatientRecord(str(pid), visits))
    logger.info("ingested %d patients / %d visits", len(patients), sum(len(p.visits) for p in patients))
    return DatasetBundle(patients, (), (), diag_vocab, proc_vocab, med_vocab)


# ---------------------------------------------------------------------------
# splitting and ordering
# ---------------------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float]):
    """Train gets the floor of its share, validation the next floor, test the rest."""
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise DataValidationError(f"split ratios must be three positive numbers, got {ratios}")
    total = float(sum(ratios))
    n_train = int(math.floor(n * ratios[0] / total + 1e-9))
    n_val = int(math.floor(n * ratios[1] / total + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(bundle: DatasetBundle, ratios=(2 / 3, 1 / 6, 1 / 6), seed: int = 1203) -> DatasetBundle:
    patients = bundle.patients()
    n_train, n_val, _ = split_sizes(len(patients), ratios)
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    return bundle.with_splits(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
    )


def _order_patient(patient: PatientRecord, heuristic: str, freq: Mapping) -> PatientRecord:
    first_seen = {}
    visits = []
    for t, visit in enumerate(patient.visits):
        for m in visit.medications:
            first_seen.setdefault(m, t)
        meds = visit.medications
        if heuristic == "rare_first":
            key = lambda m: (freq.get(m, 0), m)
        elif heuristic == "frequent_first":
            key = lambda m: (-freq.get(m, 0), m)
        elif heuristic == "early_first":
            key = lambda m: (first_seen[m], m)
        else:
            key = lambda m: (-first_seen[m], m)
        visits.append(replace(visit, medications=tuple(sorted(meds, key=key))))
    return PatientRecord(patient.patient_id, visits)


def order_medications(bundle: DatasetBundle, heuristic: str = "rare_first") -> DatasetBundle:
    """Re-sort every visit's medications; frequencies come from the train split."""
    if heuristic not in HEURISTICS:
        raise DataValidationError(f"unknown ordering heuristic {heuristic!r}; choose from {HEURISTICS}")
    freq = bundle.med_frequency
    splits = [
        [_order_patient(p, heuristic, freq) for p in bundle.patients(name)] for name in SPLITS
    ]
    return replace(bundle, train=splits[0], validation=splits[1], test=splits[2])


# ---------------------------------------------------------------------------
# corpus statistics
# ---------------------------------------------------------------------------

def repeat_statistics(current, history):
    """(proportion of current meds seen before, Jaccard with the history union).

    Returns ``None`` when there is no history.
    """
    history = set(history)
    if not history:
        return None
    current = set(current)
    inter = len(current & history)
    union = len(current | history)
    proportion = inter / len(current) if current else 0.0
    return proportion, (inter / union if union else 0.0)


def corpus_statistics(bundle: DatasetBundle, splits=SPLITS) -> dict:
    patients = [p for name in splits for p in bundle.patients(name)]
    if not patients:
        raise DataValidationError("cannot compute statistics of an empty dataset")
    proportions, jaccards = [], []
    n_visits = [len(p.visits) for p in patients]
    per_visit = {"diagnoses": [], "procedures": [], "medications": []}
    for patient in patients:
        history = set()
        for visit in patient.visits:
            per_visit["diagnoses"].append(len(visit.diagnoses))
            per_visit["procedures"].append(len(visit.procedures))
            per_visit["medications"].append(len(visit.medications))
            stats = repeat_statistics(visit.medications, history)
            if stats is not None:
                proportions.append(stats[0])
                jaccards.append(stats[1])
            history |= set(visit.medications)
    summary = {
        "n_patients": len(patients),
        "n_visits": int(sum(n_visits)),
        "vocab_sizes": dict(zip(("diagnosis", "procedure", "medication"), bundle.vocab_sizes)),
        "avg_visits": float(np.mean(n_visits)),
        "max_visits": int(max(n_visits)),
    }
    for name, values in per_visit.items():
        summary[f"avg_{name}_per_visit"] = float(np.mean(values))
        summary[f"max_{name}_per_visit"] = int(max(values))
    return {
        "summary": summary,
        "repeated_proportion": proportions,
        "history_jaccard": jaccards,
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _patient_to_json(patient: PatientRecord) -> str:
    return json.dumps(
        {
            "patient_id": patient.patient_id,
            "visits": [
                {"diag": list(v.diagnoses), "proc": list(v.procedures), "meds": list(v.medications)}
                for v in patient.visits
            ],
        },
        separators=(",", ":"),
    )


def _patient_from_json(line: str) -> PatientRecord:
    obj = json.loads(line)
    return PatientRecord(
        obj["patient_id"], [Visit(v["diag"], v["proc"], v["meds"]) for v in obj["visits"]]
    )


def save_bundle(bundle: DatasetBundle, directory):
    directory = Path(directory)
    paths = {}
    for name in SPLITS:
        text = "".join(_patient_to_json(p) + "\n" for p in bundle.patients(name))
        paths[name] = directory / f"{name}.jsonl"
        atomic_write_text(paths[name], text)
    paths["vocab"] = directory / "vocab.json"
    atomic_write_json(
        paths["vocab"],
        {
            DIAGNOSIS: list(bundle.diagnosis_vocab.id_to_code),
            PROCEDURE: list(bundle.procedure_vocab.id_to_code),
            MEDICATION: list(bundle.medication_vocab.id_to_code),
        },
    )
    return paths


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    vocab_path = directory / "vocab.json"
    if not vocab_path.exists():
        raise DataValidationError(f"no vocab.json in {directory}")
    vocab = json.loads(vocab_path.read_text())
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.jsonl"
        lines = path.read_text().splitlines() if path.exists() else []
        splits[name] = [_patient_from_json(line) for line in lines if line.strip()]
    return DatasetBundle(
        splits["train"],
        splits["validation"],
        splits["test"],
        CodeVocabulary(DIAGNOSIS, vocab[DIAGNOSIS]),
        CodeVocabulary(PROCEDURE, vocab[PROCEDURE]),
        CodeVocabulary(MEDICATION, vocab[MEDICATION]),
    )
