"""Interaction logs, their LKT text rendering, masking, DKT encoding and splits."""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import CLS, CORRECT, EOS, INCORRECT, MASK, Vocabulary

CSV_FIELDS = ("student_id", "step", "question_id", "concept_id", "question_text",
              "concept_text", "response")
SENTINEL = -1


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    step: int
    question_id: str
    concept_id: str
    question_text: str
    concept_text: str
    response: int

    def __post_init__(self):
        if self.response not in (0, 1):
            raise DataValidationError(f"response must be 0 or 1, got {self.response!r}")
        if self.step < 0:
            raise DataValidationError(f"step must be non-negative, got {self.step}")


@dataclass
class LktSequence:
    """One rendered (and possibly windowed) student sequence, responses visible."""

    token_ids: np.ndarray
    response_positions: np.ndarray
    labels: np.ndarray
    student_id: str = ""
    question_ids: tuple = ()

    @property
    def interaction_count(self) -> int:
        return len(self.response_positions)


@dataclass
class LktExample:
    token_ids: np.ndarray
    response_positions: np.ndarray
    mask_positions: np.ndarray
    labels: np.ndarray
    student_id: str = ""
    interaction_count: int = 0

    def __post_init__(self):
        if len(self.labels) != len(self.mask_positions) or len(self.labels) < 1:
            raise DataValidationError("an example needs at least one masked position with a label")
        if np.any(self.token_ids[self.mask_positions] != MASK):
            raise DataValidationError("mask position does not hold [MASK]")


@dataclass
class DktExample:
    question_indices: np.ndarray
    responses: np.ndarray
    student_id: str = ""

    def __post_init__(self):
        if len(self.question_indices) != len(self.responses):
            raise DataValidationError("question_indices and responses differ in length")

    @property
    def input_indices(self) -> np.ndarray:
        """One-hot input slot per step: ``2*q + r``, or the sentinel for unknown questions."""
        q = self.question_indices
        return np.where(q == SENTINEL, SENTINEL, 2 * q + self.responses)


@dataclass
class FoldSplit:
    k: int
    assignment: dict = field(default_factory=dict)

    def fold(self, i: int) -> list[str]:
        return [s for s, f in self.assignment.items() if f == i]

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = self.fold(i)
        train = [s for s, f in self.assignment.items() if f != i]
        return train, test


# -- ingestion ------------------------------------------------------------------

def group_by_student(records: Iterable[InteractionRecord]) -> "OrderedDict[str, list[InteractionRecord]]":
    groups: OrderedDict[str, list[InteractionRecord]] = OrderedDict()
    for r in records:
        groups.setdefault(r.student_id, []).append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: r.step)
    return groups


def load_interactions(path) -> list[InteractionRecord]:
    """Read an interaction CSV, grouped by student (first appearance) and sorted by step."""
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, strict=True)
        missing = [c for c in CSV_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataValidationError(f"{path}: missing columns {missing}")
        try:
            for lineno, row in enumerate(reader, start=2):
                empty = [c for c in CSV_FIELDS if row.get(c) in (None, "")]
                if empty:
                    raise DataValidationError(f"{path}: row {lineno} missing required fields {empty}")
                try:
                    step = int(row["step"])
                except ValueError:
                    raise DataValidationError(f"{path}: row {lineno} has non-integer step {row['step']!r}") from None
                if row["response"] not in ("0", "1"):
                    raise DataValidationError(
                        f"{path}: row {lineno} has non-binary response {row['response']!r}")
                key = (row["student_id"], step)
                if key in seen:
                    raise DataValidationError(
                        f"{path}: row {lineno} duplicates step {step} for student {row['student_id']}")
                seen.add(key)
                records.append(InteractionRecord(row["student_id"], step, row["question_id"],
                                                 row["concept_id"], row["question_text"],
                                                 row["concept_text"], int(row["response"])))
        except csv.Error as exc:
            raise DataValidationError(f"{path}: malformed CSV: {exc}") from None
    return [r for recs in group_by_student(records).values() for r in recs]


def write_interactions(path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.student_id, r.step, r.question_id, r.concept_id, r.question_text,
                        r.concept_text, r.response])


# -- LKT rendering --------------------------------------------------------------

def _interaction_spans(records, vocab):
    spans = []
    for r in records:
        ids = vocab.encode(r.concept_text) + vocab.encode(r.question_text)
        ids.append(CORRECT if r.response == 1 else INCORRECT)
        spans.append(ids)
    return spans


def format_lkt_sequence(records: Sequence[InteractionRecord], vocab: Vocabulary):
    """Render ``[CLS] concept question RESP ... [EOS]`` as token ids.

    Returns ``(token_ids, response_positions)``.
    """
    if not records:
        raise DataValidationError("cannot format an empty interaction list")
    ids = [CLS]
    positions = []
    for span in _interaction_spans(records, vocab):
        ids.extend(span)
        positions.append(len(ids) - 1)
    ids.append(EOS)
    return np.asarray(ids, dtype=np.int64), np.asarray(positions, dtype=np.int64)


def window_sequence(token_ids, response_positions, max_len: int = 512, question_ids=None):
    """Split a formatted sequence into ``[CLS] ... [EOS]`` windows of at most ``max_len``.

    Cuts fall only between interactions. Windows are packed greedily from the
    most recent interaction backwards and returned in chronological order.
    Each item is ``(token_ids, response_positions, interaction_slice)``.
    """
    token_ids = np.asarray(token_ids)
    response_positions = np.asarray(response_positions)
    if len(token_ids) <= max_len:
        return [(token_ids, response_positions, slice(0, len(response_positions)))]
    starts = np.concatenate([[1], response_positions[:-1] + 1])
    lengths = response_positions - starts + 1
    for j, n in enumerate(lengths):
        if n > max_len - 2:
            qid = question_ids[j] if question_ids is not None else j
            raise DataValidationError(
                f"interaction for question {qid} has {n} tokens, more than max_len-2={max_len - 2}")
    groups = []
    hi = len(lengths)
    while hi > 0:
        lo, used = hi, 0
        while lo > 0 and used + lengths[lo - 1] + 2 <= max_len:
            used += lengths[lo - 1]
            lo -= 1
        groups.append((lo, hi))
        hi = lo
    windows = []
    for lo, hi in reversed(groups):
        body = token_ids[starts[lo]: response_positions[hi - 1] + 1]
        ids = np.concatenate([[CLS], body, [EOS]]).astype(np.int64)
        pos = response_positions[lo:hi] - starts[lo] + 1
        windows.append((ids, pos, slice(lo, hi)))
    return windows


def build_lkt_sequences(groups, vocab: Vocabulary, max_len: int = 512) -> list[LktSequence]:
    """Render and window every student in ``groups`` (student_id -> records)."""
    out = []
    for sid, recs in groups.items():
        ids, pos = format_lkt_sequence(recs, vocab)
        qids = [r.question_id for r in recs]
        labels = np.asarray([r.response for r in recs], dtype=np.int64)
        for w_ids, w_pos, sl in window_sequence(ids, pos, max_len, qids):
            out.append(LktSequence(w_ids, w_pos, labels[sl], sid, tuple(qids[sl])))
    return out


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mask_responses(seq: LktSequence, rate: float = 0.15, rng_seed=None) -> LktExample:
    """Replace each response token with [MASK] independently with probability ``rate``.

    At least one response is always masked so every example carries a target.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0, 1), got {rate}")
    rng = _rng(rng_seed)
    n = len(seq.response_positions)
    chosen = rng.random(n) < rate
    if not chosen.any():
        chosen[rng.integers(n)] = True
    return mask_targets(seq, np.flatnonzero(chosen))


def mask_targets(seq: LktSequence, targets) -> LktExample:
    """Mask the responses of the interactions indexed by ``targets``; others stay visible."""
    targets = np.asarray(targets, dtype=np.int64)
    ids = seq.token_ids.copy()
    pos = seq.response_positions[targets]
    ids[pos] = MASK
    return LktExample(ids, seq.response_positions, pos, seq.labels[targets].copy(),
                      seq.student_id, seq.interaction_count)


# -- DKT encoding ---------------------------------------------------------------

def build_question_index(records: Iterable[InteractionRecord]) -> dict[str, int]:
    """Dense question index in order of first appearance."""
    index: dict[str, int] = {}
    for r in records:
        index.setdefault(r.question_id, len(index))
    return index


def encode_dkt(records: Sequence[InteractionRecord], question_index: dict, unknown: str = "error") -> DktExample:
    """Map a student's records to question indices.

    ``unknown="sentinel"`` maps unseen questions to ``SENTINEL`` instead of
    raising; the DKT model treats those steps as carrying no information.
    """
    if unknown not in ("error", "sentinel"):
        raise ValueError("unknown must be 'error' or 'sentinel'")
    q = []
    for r in records:
        if r.question_id in question_index:
            q.append(question_index[r.question_id])
        elif unknown == "sentinel":
            q.append(SENTINEL)
        else:
            raise DataValidationError(f"question {r.question_id!r} not in the question index")
    return DktExample(np.asarray(q, dtype=np.int64),
                      np.asarray([r.response for r in records], dtype=np.int64),
                      records[0].student_id if records else "")


# -- splits ---------------------------------------------------------------------

def split_folds(student_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    ids = list(dict.fromkeys(student_ids))
    if len(ids) < k:
        raise DataValidationError(f"need at least k={k} students, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(k, {ids[j]: i % k for i, j in enumerate(order)})


def nested_subsample(student_ids: Sequence[str], fraction: float, seed: int = 0) -> list[str]:
    """Prefix of a seeded permutation; smaller fractions give subsets of larger ones.

    The chosen students keep their input order, so fraction 1.0 returns the
    input unchanged.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ids = list(student_ids)
    n = int(math.floor(fraction * len(ids) + 1e-9))
    if n < 1:
        raise DataValidationError(f"fraction {fraction} of {len(ids)} students selects nobody")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[j] for j in np.sort(order[:n])]


# -- synthetic generator ----------------------------------------------------------

CONCEPT_NAMES = (
    "sets", "fractions", "prime numbers", "linear equations", "probability",
    "geometry", "functions", "logic", "ratios", "graphs", "matrices", "sequences",
)

DIFFICULTY_WORDS = ("basic", "easy", "moderate", "hard", "advanced")
_DIFFICULTY_CUTS = (-1.0, -0.35, 0.35, 1.0)

# Surface vocabulary differs between domains; concept names and difficulty
# words are shared, which is what lets a model transfer.
DOMAIN_WORDS = {
    "alpha": dict(
        verbs=("compute", "find", "determine", "evaluate", "identify", "calculate"),
        nouns=("value", "size", "count", "total", "result", "measure"),
    ),
    "beta": dict(
        verbs=("derive", "estimate", "show", "simplify", "check", "solve"),
        nouns=("answer", "amount", "length", "product", "sum", "rate"),
    ),
}


@dataclass
class SyntheticParams:
    min_interactions: int = 40
    max_interactions: int = 60
    # Correlation of one student's abilities across concepts; each concept
    # ability stays marginally N(0, 1).
    ability_correlation: float = 0.5
    discrimination_sigma: float = 0.25
    domain: str = "alpha"


@dataclass
class SyntheticData:
    records: list[InteractionRecord]
    true_p: np.ndarray
    params: SyntheticParams
    seed: int

    def bayes_ceiling(self) -> float:
        from .evaluation import auc

        return auc(self.true_p, [r.response for r in self.records])

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_interactions(out / "interactions.csv", self.records)
        with open(out / "true_p.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("student_id", "step", "true_p"))
            for r, p in zip(self.records, self.true_p):
                w.writerow((r.student_id, r.step, repr(float(p))))
        manifest = {
            "students": len({r.student_id for r in self.records}),
            "interactions": len(self.records),
            "questions": len({r.question_id for r in self.records}),
            "concepts": len({r.concept_id for r in self.records}),
            "seed": self.seed,
            "params": self.params.__dict__,
            "bayes_auc": self.bayes_ceiling(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def irt_probability(theta, a, b):
    """Two-parameter logistic item response: ``sigmoid(a * (theta - b))``."""
    return 1.0 / (1.0 + np.exp(-np.asarray(a) * (np.asarray(theta) - np.asarray(b))))


def concept_name(k: int) -> str:
    return CONCEPT_NAMES[k] if k < len(CONCEPT_NAMES) else f"topic {k}"


def generate_synthetic(num_students: int, num_questions: int, num_concepts: int,
                       seed: int = 0, params: SyntheticParams | None = None) -> SyntheticData:
    """Simulate 2PL IRT students answering templated text questions.

    Question text names the concept and carries a difficulty keyword, so the
    text itself is predictive of correctness.
    """
    params = params or SyntheticParams()
    if min(num_students, num_questions, num_concepts) < 1:
        raise ValueError("counts must be >= 1")
    if params.domain not in DOMAIN_WORDS:
        raise ValueError(f"unknown domain {params.domain!r}; choose from {sorted(DOMAIN_WORDS)}")
    rng = np.random.default_rng(seed)
    words = DOMAIN_WORDS[params.domain]
    tag = params.domain[0]

    concept_of = rng.integers(0, num_concepts, size=num_questions)
    difficulty = rng.normal(0.0, 1.0, size=num_questions)
    discrimination = rng.lognormal(0.0, params.discrimination_sigma, size=num_questions)
    texts = []
    for q in range(num_questions):
        level = DIFFICULTY_WORDS[int(np.searchsorted(_DIFFICULTY_CUTS, difficulty[q]))]
        verb = words["verbs"][rng.integers(len(words["verbs"]))]
        noun = words["nouns"][rng.integers(len(words["nouns"]))]
        # the difficulty keyword sits right before the response slot
        texts.append(f"{concept_name(concept_of[q])}: {verb} {noun} {level}")

    rho = params.ability_correlation
    records, probs = [], []
    for s in range(num_students):
        general = rng.normal()
        theta = math.sqrt(rho) * general + math.sqrt(1.0 - rho) * rng.normal(size=num_concepts)
        n = int(rng.integers(params.min_interactions, params.max_interactions + 1))
        qs = rng.integers(0, num_questions, size=n)
        for t, q in enumerate(qs):
            c = int(concept_of[q])
            p = float(irt_probability(theta[c], discrimination[q], difficulty[q]))
            r = int(rng.random() < p)
            records.append(InteractionRecord(f"{tag}s{s}", t, f"{tag}q{q}", f"c{c}", texts[q],
                                             concept_name(c), r))
            probs.append(p)
    return SyntheticData(records, np.asarray(probs), params, seed)
