"""Look inside one prediction.

Train a small text model, pick a student, hide their last response and ask
two questions: where does the encoder attend, and which words would change
the prediction if they were removed?

python demos/03_explain_a_prediction.py
"""

import numpy as np

from lkt.dataset import SyntheticParams, build_lkt_sequences, generate_synthetic, group_by_student, mask_targets
from lkt.evaluation import LktFamily, fit_family, target_split
from lkt.interpret import lime_explain, mean_attention
from lkt.models import lkt_batch_loss
from lkt.tokenizer import build_vocab
from lkt.training import TrainConfig

data = generate_synthetic(150, 20, 4, seed=3, params=SyntheticParams(min_interactions=20, max_interactions=30))
groups = group_by_student(data.records)
vocab = build_vocab([r.concept_text + " " + r.question_text for r in data.records])
fam = LktFamily(vocab, d_model=32, num_layers=2, num_heads=4)
split = target_split(list(groups), seed=0)
_, res = fit_family(fam, groups, split.pool, split.val,
                    TrainConfig(max_epochs=10, patience=3, batch_size=8, micro_batch_size=8,
                                peak_lr=1e-3, warmup_steps=20))
model = res.model

# Keep the explanation readable: the student's last six interactions only.
student = split.test[0]
seq = build_lkt_sequences({student: groups[student][-6:]}, vocab)[0]
ex = mask_targets(seq, [seq.interaction_count - 1])
p = float(lkt_batch_loss(model, [ex])[1].data[0])
print(f"student {student}: P(correct) on the hidden response = {p:.3f}, truth = {int(ex.labels[0])}")
print("input:", vocab.decode(ex.token_ids))

# Head 0 has the steepest distance penalty and looks near the query; the last
# head has none and spreads out over the whole history.
for head, label in ((0, "local"), (3, "global")):
    att = mean_attention(model, ex.token_ids, layer=1, head=head, vocab=vocab)
    top = np.argsort(att.scores)[::-1][:5]
    print(f"\nmost attended tokens (layer 1, {label} head):")
    for i in top:
        print(f"  {i:>3} {att.tokens[i]:<12} {att.scores[i]:.3f}")

target = int(ex.mask_positions[0])
exp = lime_explain(model, ex.token_ids, target, num_samples=400, seed=0, vocab=vocab)
print(f"\nLIME surrogate (R^2 {exp.r2:.2f}); dropping a word moves P(correct) by about -weight:")
for i in np.argsort(-np.abs(exp.weights))[:6]:
    print(f"  {exp.tokens[i]:<12} {exp.weights[i]:+.3f}")
