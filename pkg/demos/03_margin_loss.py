"""The margin-based ROI classification loss and its two stock alternatives.

Run:  python3 demos/03_margin_loss.py
"""

import math

import numpy as np

from tsdet.detector import MatchAssignment
from tsdet.losses import (MarginLossConfig, cross_entropy_roi_loss,
                          focal_roi_loss, margin_penalty, margin_roi_loss)
from tsdet.tensor import Tensor

C = 7
cfg = MarginLossConfig()  # s=5, sigma=0.5, w_l=1

# the penalty is a logistic function of the aggregate gap beta - rho
print("penalty at rho == beta, sigma=0:",
      margin_penalty(Tensor(np.float32(0.2)), Tensor(np.float32(0.2)),
                     MarginLossConfig(sigma=0.0)).item(),
      "= log(1.2) =", math.log(1.2))
print("gap sweep (rho - beta from -0.2 to 0.2):")
for gap in np.linspace(-0.2, 0.2, 5):
    v = margin_penalty(Tensor(np.float32(0.5 + gap / 2)), Tensor(np.float32(0.5 - gap / 2)), cfg)
    print(f"  rho-beta={gap:+.2f} -> loss {v.item():.4f}")

# a small batch: two confident foreground rows, four background rows
rng = np.random.default_rng(0)
logits = rng.normal(0, 0.5, (6, C + 1)).astype(np.float32)
logits[0, 2] += 3.0
logits[1, 5] += 3.0
positive = np.array([True, True, False, False, False, False])
matched = np.array([0, 1, -1, -1, -1, -1])
assign = MatchAssignment(positive=positive, negative=~positive, matched_gt=matched,
                         gt_boxes=(None, None), gt_classes=(2, 5))

m, skipped = margin_roi_loss(Tensor(logits), assign, C, cfg)
ce = cross_entropy_roi_loss(Tensor(logits), assign, C)
fl = focal_roi_loss(Tensor(logits), assign, C)
print(f"margin={m.item():.4f}  cross-entropy={ce.item():.4f}  focal={fl.item():.4f}")

# focal collapses to cross-entropy at gamma=0, alpha=1
fl0 = focal_roi_loss(Tensor(logits), assign, C, gamma=0.0, alpha=1.0)
print("focal(gamma=0, alpha=1) == CE:", abs(fl0.item() - ce.item()) < 1e-6)

# raising a background row's background logit raises beta and the loss;
# raising a foreground row's assigned logit lowers it
bumped = logits.copy()
bumped[3, C] += 0.5
hi, _ = margin_roi_loss(Tensor(bumped), assign, C, cfg)
bumped2 = logits.copy()
bumped2[0, 2] += 0.5
lo, _ = margin_roi_loss(Tensor(bumped2), assign, C, cfg)
print(f"monotone: beta up -> {hi.item():.4f} > {m.item():.4f} > rho up -> {lo.item():.4f}")
