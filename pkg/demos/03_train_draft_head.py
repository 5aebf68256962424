"""Draft-head training: loss curve and what it buys in acceptance rate.

Trains the feature-predicting head from scratch, then compares n-step
acceptance rates (n-alpha: how often a drafted token survives verification
when the input already contains n of the head's own predicted features)
before and after training.
"""

from demo_common import DRAFT_TRAIN, trained_pair
from specdec import DraftInputMode, compute_alpha_n, init_draft_head, make_corpus
from specdec.training import train_draft_head

target, trained_head, corpus = trained_pair()
held_out = make_corpus(seed=99, size_tokens=6000)

untrained = init_draft_head(target, DraftInputMode.FEATURE_SHIFTED_TOKEN, seed=123)

print("retraining a fresh head to show the curve (~30s)...")
_, curve = train_draft_head(target, corpus, DRAFT_TRAIN)
sampled = curve[:: max(1, len(curve) // 10)]
print("\nepoch step  l_reg    l_cls    l_total")
for row in sampled:
    print(f"{row.epoch:5d} {row.step:4d}  {row.l_reg:.4f}  {row.l_cls:.4f}  {row.l_total:.4f}")
print(f"loss: {curve[0].l_total:.4f} -> {curve[-1].l_total:.4f}")

print("\nacceptance rate with n of the head's own predicted features in context:")
print("head        " + "  ".join(f"{n}-alpha" for n in range(5)))
for label, head in (("untrained", untrained), ("trained", trained_head)):
    alphas = [compute_alpha_n(target, head, held_out, n, temperature=0.0,
                              trials=120, seed=7).alpha for n in range(5)]
    print(f"{label:10s}  " + "  ".join(f"{a:.3f}  " for a in alphas))
