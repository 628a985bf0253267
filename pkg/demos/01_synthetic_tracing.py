"""Walk through knowledge tracing on simulated students.

We simulate learners with a two-parameter IRT model, render each history as
text, and train two predictors: the text encoder (LKT) and an LSTM over
question ids (DKT). The generator also hands us the true probability behind
every response, so we can see how close each model gets to the best possible
AUC.

Runs in a few minutes on one core:  python demos/01_synthetic_tracing.py
"""

import logging

from lkt.dataset import SyntheticParams, build_lkt_sequences, generate_synthetic, group_by_student
from lkt.evaluation import DktFamily, LktFamily, auc, fit_family, target_split
from lkt.tokenizer import build_vocab
from lkt.training import TrainConfig

logging.basicConfig(level=logging.INFO, format="  %(message)s")

# 1. Simulate. Question text names the concept and ends in a difficulty word.
data = generate_synthetic(200, 30, 6, seed=0, params=SyntheticParams(min_interactions=30, max_interactions=40))
groups = group_by_student(data.records)
ceiling = data.bayes_ceiling()
print(f"{len(groups)} students, {len(data.records)} interactions, Bayes ceiling AUC {ceiling:.3f}")
first = data.records[0]
print(f"a question looks like: {first.question_text!r}")

# 2. Split by student: nobody in the test set is seen during training.
split = target_split(list(groups), seed=0)
vocab = build_vocab([r.concept_text + " " + r.question_text for s in split.pool for r in groups[s]])
seq = build_lkt_sequences({first.student_id: groups[first.student_id][:3]}, vocab)[0]
print("the first three interactions as text:", vocab.decode(seq.token_ids))

# 3. Train both models with early stopping on the validation students.
lkt = LktFamily(vocab, d_model=32, num_layers=2, num_heads=4)
dkt = DktFamily(hidden=32)
print("\ntraining LKT")
lf, lres = fit_family(lkt, groups, split.pool, split.val,
                      TrainConfig(max_epochs=12, patience=4, batch_size=8, micro_batch_size=8,
                                  peak_lr=1e-3, warmup_steps=20))
print("training DKT")
df, dres = fit_family(dkt, groups, split.pool, split.val,
                      TrainConfig(max_epochs=60, patience=8, batch_size=16, micro_batch_size=16,
                                  peak_lr=1e-2, warmup_steps=0))

# 4. Score held-out students. LKT predicts every response with only that one masked.
for name, fam, res in (("LKT", lf, lres), ("DKT", df, dres)):
    s, y = fam.predict(res.model, fam.examples(groups, split.test))
    a = auc(s, y)
    print(f"{name}: test AUC {a:.3f} = {a / ceiling:.0%} of the ceiling (best epoch {res.best_epoch})")
