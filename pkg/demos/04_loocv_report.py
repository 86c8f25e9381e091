"""
LOOCV classification report and training-support tables
=======================================================

Externally produced leave-one-out predictions are pooled into a single
confusion matrix. The counts below (78 TP, 4 FN, 158 TN, 13 FP over 253
patients) give the optimized-CDIs row of the results table.
"""

import tempfile
from pathlib import Path

from cdisopt import ScheduleSpec, cosine_lr, loocv_aggregate, sample_weights
from cdisopt.metrics import read_predictions, write_predictions

rows = []
for tag, pred, actual, n in [("tp", 1, 1, 78), ("fn", 0, 1, 4), ("tn", 0, 0, 158), ("fp", 1, 0, 13)]:
    rows += [(f"{tag}{i:03d}", pred, actual) for i in range(n)]

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "predictions.csv"
    write_predictions(path, rows)
    folds = [(p, a) for _, p, a in read_predictions(path)]

print(loocv_aggregate(folds).format_table())

###############################################################################
# Inverse-frequency sampler weights for a 171 / 82 class split
labels = [0] * 171 + [1] * 82
w = sample_weights(labels)
print("\nclass-0 weight %.5f, class-1 weight %.5f, ratio %.3f" % (w[0], w[-1], w[-1] / w[0]))

###############################################################################
# Cosine annealing from a 1e-3 learning rate over 10 steps
spec = ScheduleSpec(total_steps=10, eta_max=1e-3)
print("\n".join(f"step {t:2d}: lr {cosine_lr(t, spec):.6f}" for t in range(0, 11, 2)))
