"""AUC/ACC metrics and the experiment protocols built on them."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dataset import (build_lkt_sequences, build_question_index, encode_dkt, mask_targets,
                      nested_subsample, split_folds)
from .models import (DktConfig, LktConfig, dkt_predict, init_parameters, lkt_batch_loss,
                     lkt_predict)
from .training import DktTask, LktTask, TrainConfig, train

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    ranks = rankdata(s)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def safe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except MetricError:
        return None


def acc(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) == 0:
        raise MetricError("accuracy of an empty prediction set")
    return float(((s >= threshold).astype(int) == y).mean())


@dataclass
class EvalReport:
    auc: float
    acc: float
    n_predictions: int
    protocol: str
    model: str
    seed: int = 0
    value: object = None  # fold id / fraction / bucket length, per protocol
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.auc <= 1.0 and 0.0 <= self.acc <= 1.0):
            raise MetricError(f"metrics out of range: auc={self.auc}, acc={self.acc}")
        if self.n_predictions < 1:
            raise MetricError("a report needs at least one prediction")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def summary(self) -> str:
        tag = f"{self.protocol}={self.value}" if self.value is not None else self.protocol
        return f"{self.model:>4} {tag:<18} auc={self.auc:.4f} acc={self.acc:.4f} n={self.n_predictions}"


def make_report(scores, labels, protocol, model, seed=0, value=None, **extra) -> EvalReport:
    return EvalReport(auc(scores, labels), acc(scores, labels), len(scores), protocol, model, seed,
                      value, extra)


def append_reports(reports, path):
    with open(path, "a", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# -- model families ----------------------------------------------------------------------

class LktFamily:
    """Builds LKT examples and models from student groups."""

    name = "lkt"

    def __init__(self, vocab, d_model=64, num_layers=2, num_heads=4, d_ff=None, max_len=512,
                 dropout_p=0.2, mask_rate=0.15, attention_bias="alibi"):
        self.vocab = vocab
        self.model_kwargs = dict(d_model=d_model, num_layers=num_layers, num_heads=num_heads,
                                 d_ff=d_ff or 4 * d_model, max_len=max_len, dropout_p=dropout_p,
                                 attention_bias=attention_bias)
        self.max_len = max_len
        self.task = LktTask(mask_rate)

    def fit(self, groups, students):
        return self

    def examples(self, groups, students):
        return build_lkt_sequences({s: groups[s] for s in students}, self.vocab, self.max_len)

    def new_model(self, seed):
        return init_parameters(LktConfig(vocab_size=len(self.vocab), **self.model_kwargs), seed)

    def predict(self, model, examples):
        return lkt_predict(model, examples)[:2]

    def predict_last(self, model, groups, students):
        """Score only the final interaction of each student's (truncated) history."""
        scores, labels = [], []
        for s in students:
            last = self.examples(groups, [s])[-1]
            ex = mask_targets(last, [last.interaction_count - 1])
            scores.append(float(lkt_batch_loss(model, [ex])[1].data[0]))
            labels.append(int(ex.labels[0]))
        return np.asarray(scores), np.asarray(labels)


class DktFamily:
    """DKT examples; the question index is fitted on training students only."""

    name = "dkt"

    def __init__(self, hidden=64, question_index=None):
        self.hidden = hidden
        self.question_index = question_index
        self.task = DktTask()

    def fit(self, groups, students):
        recs = [r for s in students for r in groups[s]]
        return DktFamily(self.hidden, build_question_index(recs))

    def examples(self, groups, students, unknown="sentinel"):
        return [encode_dkt(groups[s], self.question_index, unknown) for s in students]

    def new_model(self, seed):
        return init_parameters(DktConfig(num_questions=max(1, len(self.question_index)),
                                         hidden=self.hidden), seed)

    def predict(self, model, examples):
        return dkt_predict(model, examples)[:2]

    def predict_last(self, model, groups, students):
        s, y, owners = dkt_predict(model, self.examples(groups, students))
        last = np.r_[np.flatnonzero(np.diff(owners)), len(owners) - 1]
        return s[last], y[last]


def _train_val_split(students, val_fraction, seed):
    order = np.random.default_rng(seed).permutation(len(students))
    n_val = max(1, int(round(val_fraction * len(students))))
    if n_val >= len(students):
        raise ValueError("not enough students for a validation split")
    val = [students[i] for i in order[:n_val]]
    return [students[i] for i in order[n_val:]], val


def fit_family(family, groups, train_students, val_students, config: TrainConfig, seed=0,
               init_model=None):
    fam = family.fit(groups, train_students)
    model = init_model.copy() if init_model is not None else fam.new_model(seed)
    tr = fam.examples(groups, train_students)
    va = fam.examples(groups, val_students)
    result = train(model, tr, va, config, fam.task)
    return fam, result


# -- protocols --------------------------------------------------------------------------

def run_cv(groups, family, k: int = 5, seed: int = 0, config: TrainConfig | None = None,
           val_fraction: float = 0.1):
    """k-fold cross-validation split by student.

    Returns ``(fold_reports, summary)`` where ``summary`` maps each metric to
    ``(mean, sample_std)``.
    """
    config = config or TrainConfig(seed=seed)
    split = split_folds(list(groups), k, seed)
    reports = []
    for fold in range(k):
        train_ids, test_ids = split.train_test(fold)
        tr, va = _train_val_split(train_ids, val_fraction, seed + fold)
        try:
            fam, result = fit_family(family, groups, tr, va, config, seed + fold)
        except Exception as exc:
            raise RuntimeError(f"fold {fold}: {exc}") from exc
        scores, labels = fam.predict(result.model, fam.examples(groups, test_ids))
        reports.append(make_report(scores, labels, "fold", family.name, seed, fold,
                                   best_epoch=result.best_epoch))
    summary = {"auc": aggregate([r.auc for r in reports]), "acc": aggregate([r.acc for r in reports])}
    return reports, summary


@dataclass
class TargetSplit:
    pool: list
    val: list
    test: list


def target_split(students, seed=0, test_fraction=0.2, val_fraction=0.1) -> TargetSplit:
    """Fixed held-out test and validation students; the rest is the fine-tuning pool."""
    order = np.random.default_rng(seed).permutation(len(students))
    n_test = max(1, int(round(test_fraction * len(students))))
    n_val = max(1, int(round(val_fraction * len(students))))
    ids = [students[i] for i in order]
    return TargetSplit(ids[n_test + n_val:], ids[n_test:n_test + n_val], ids[:n_test])


def coldstart_fraction_sweep(pretrained, target_groups, fractions, lkt_family: LktFamily,
                             dkt_family: DktFamily | None = None, config: TrainConfig | None = None,
                             seed: int = 0, split: TargetSplit | None = None):
    """Fine-tune a copy of ``pretrained`` on nested student subsamples of the target pool.

    A DKT comparator trains from scratch on the same subsample. Every model is
    scored on the same held-out target test students.
    """
    config = config or TrainConfig(seed=seed)
    dkt_family = dkt_family or DktFamily()
    split = split or target_split(list(target_groups), seed)
    reports = []
    for f in fractions:
        subset = nested_subsample(split.pool, f, seed)
        fam, res = fit_family(lkt_family, target_groups, subset, split.val, config, seed,
                              init_model=pretrained)
        s, y = fam.predict(res.model, fam.examples(target_groups, split.test))
        reports.append(make_report(s, y, "fraction", "lkt", seed, f, students=len(subset),
                                   best_epoch=res.best_epoch))
        dfam, dres = fit_family(dkt_family, target_groups, subset, split.val, config, seed)
        s, y = dfam.predict(dres.model, dfam.examples(target_groups, split.test))
        reports.append(make_report(s, y, "fraction", "dkt", seed, f, students=len(subset),
                                   best_epoch=dres.best_epoch))
    return reports


def seq_length_buckets(model, groups, family, buckets=(5, 10, 20, 50, 100), seed=0):
    """Predict the L-th interaction from the first L-1 for every student with >= L steps."""
    buckets = list(buckets)
    if any(b <= a for a, b in zip(buckets, buckets[1:])):
        raise ValueError(f"buckets must be strictly ascending, got {buckets}")
    reports = []
    for length in buckets:
        truncated = {s: recs[:length] for s, recs in groups.items() if len(recs) >= length}
        if not truncated:
            log.warning("no students with at least %d interactions", length)
            continue
        scores, labels = family.predict_last(model, truncated, list(truncated))
        if safe_auc(scores, labels) is None:
            log.warning("bucket %d: all %d targets share one label, AUC undefined", length, len(labels))
            continue
        reports.append(make_report(scores, labels, "seqlen", family.name, seed, length))
    if not reports:
        raise ValueError("every student is shorter than the smallest bucket")
    return reports


def zero_shot_eval(pretrained_lkt, target_groups, lkt_family: LktFamily, dkt_model, dkt_family: DktFamily,
                   students=None, seed=0):
    """Score target students with no updates; DKT sees unseen questions as sentinels."""
    students = list(target_groups) if students is None else students
    s, y = lkt_family.predict(pretrained_lkt, lkt_family.examples(target_groups, students))
    lkt_report = make_report(s, y, "zero-shot", "lkt", seed)
    s, y = dkt_family.predict(dkt_model, dkt_family.examples(target_groups, students, unknown="sentinel"))
    dkt_report = make_report(s, y, "zero-shot", "dkt", seed,
                             unseen=int(sum(r.question_id not in dkt_family.question_index
                                            for st in students for r in target_groups[st])))
    return lkt_report, dkt_report
