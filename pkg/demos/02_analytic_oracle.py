"""The closed-form ceiling for incomplete-data training.

A model trained only on the incomplete regime can at best learn the rule
"g1 and d1", because g2 and d2 are pinned to zero in its training data.
Scoring that idealized model against the true outcome rule over the 16
equiprobable causal profiles gives an exact AUC as a fraction, plus a
confusion table showing exactly which profiles it gets wrong.
"""

from mmjepa.cohort import label
from mmjepa.evaluation import (
    all_profiles,
    classify_outcomes,
    expected_auc,
    idealized_incomplete_scorer,
)

frac = expected_auc(idealized_incomplete_scorer, label)
print(f"exact expected AUC = {frac} = {float(frac):.6f}")

table = classify_outcomes(all_profiles(), idealized_incomplete_scorer, label)
print("counts:", " ".join(f"{k}={table.counts[k]}" for k in ("TP", "FP", "TN", "FN")))
for outcome in ("TP", "FN", "FP"):
    for prof in table.profiles_with(outcome):
        print(f"  {outcome}: profile (g1,g2,d1,d2)={prof}")

# Reading the table: the one true positive is (1,0,1,0), where g1 and d1
# alone would have been the right call anyway. The false negative
# (0,1,0,1) is a subject whose outcome is driven entirely by the factors
# the incomplete regime never shows. The three false positives fire on
# g1-and-d1 profiles where the hidden bits flip the true label.

# Any scorer over profiles works. A scorer that reads the full rule is a
# sanity check that the machinery tops out at 1.
perfect = lambda p: float(label(p))
print()
print("perfect scorer AUC =", expected_auc(perfect, label))
