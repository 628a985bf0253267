"""Transfer to a domain whose questions no model has seen.

Two simulated domains share concept names and difficulty words but use
different verbs, nouns and question ids. A model trained on the source
domain is scored on the target domain with no updates (zero-shot), then
fine-tuned on growing slices of target students next to a DKT trained from
scratch on the same slices.

DKT has never seen a target question id, so zero-shot it falls back to one
constant prior and its AUC is exactly 0.5. The text model can still read the
concept and difficulty words.

python demos/02_cold_start.py
"""

from lkt.dataset import SyntheticParams, generate_synthetic, group_by_student
from lkt.evaluation import (DktFamily, LktFamily, coldstart_fraction_sweep, fit_family, target_split,
                            zero_shot_eval)
from lkt.tokenizer import build_vocab
from lkt.training import TrainConfig

params = dict(min_interactions=30, max_interactions=40)
source = group_by_student(generate_synthetic(200, 30, 6, seed=10, params=SyntheticParams(**params)).records)
target = group_by_student(generate_synthetic(200, 30, 6, seed=11,
                                             params=SyntheticParams(domain="beta", **params)).records)
print("source question:", next(iter(source.values()))[0].question_text)
print("target question:", next(iter(target.values()))[0].question_text)

vocab = build_vocab([r.concept_text + " " + r.question_text
                     for g in (source, target) for recs in g.values() for r in recs])
lkt = LktFamily(vocab, d_model=32, num_layers=2, num_heads=4)
split = target_split(list(source), seed=0)
train_ids = split.pool + split.test

print("\ntraining on the source domain ...")
_, pre = fit_family(lkt, source, train_ids, split.val,
                    TrainConfig(max_epochs=12, patience=4, batch_size=8, micro_batch_size=8,
                                peak_lr=1e-3, warmup_steps=20))
dkt_fam, dkt = fit_family(DktFamily(hidden=32), source, train_ids, split.val,
                          TrainConfig(max_epochs=60, patience=8, peak_lr=1e-2, warmup_steps=0))

lz, dz = zero_shot_eval(pre.model, target, lkt, dkt.model, dkt_fam)
print(f"zero-shot on the target: LKT {lz.auc:.3f}, DKT {dz.auc:.3f} "
      f"({dz.extra['unseen']} of {dz.n_predictions} questions unseen)")

print("\nfine-tuning on nested slices of target students ...")
ft = TrainConfig(max_epochs=8, patience=3, batch_size=8, micro_batch_size=8, peak_lr=5e-4, warmup_steps=0)
reports = coldstart_fraction_sweep(pre.model, target, [0.02, 0.1, 0.5], lkt, DktFamily(hidden=32), ft)
print("fraction  students  LKT    DKT")
for l, d in zip(reports[::2], reports[1::2]):
    print(f"{l.value:>8g}  {l.extra['students']:>8}  {l.auc:.3f}  {d.auc:.3f}")
