"""Detection metrics machinery: greedy matching, interpolated AP, area bands
and the paired t-test.

Run:  python3 demos/05_evaluation_and_ttest.py
"""

from tsdet.evaluate import map_summary, match_detections, paired_t_test
from tsdet.geometry import Box, Detection

# one image, two ground-truth boxes of one class
gts = [(Box(0, 0, 10, 10), 0), (Box(30, 30, 40, 40), 0)]
dets = [
    Detection(Box(0, 0, 10, 10), 0, 0.90),      # true positive
    Detection(Box(60, 60, 70, 70), 0, 0.80),    # false positive
    Detection(Box(30, 30, 40, 40), 0, 0.70),    # true positive
]

log = match_detections(dets, [g for g, _ in gts], [c for _, c in gts], 0.5)
for e in log.entries:
    state = "TP" if e["tp"] else ("ignored" if e["ignored"] else "FP")
    print(f"  det {e['det_index']} score {e['score']:.2f}: {state}")

result = map_summary([dets], [gts], num_classes=1)
print(f"AP50 (101-point) = {result.map50:.4f}   exact-area variant = {result.map50_exact:.4f}")
print(f"mAP50:95 = {result.map50_95:.4f}  medium = {result.map_medium:.4f}  "
      f"large = {result.map_large:.4f}")

# duplicates are penalized: the second hit on a matched box counts as FP
dup = [Detection(Box(0, 0, 10, 10), 0, 0.9), Detection(Box(0, 0, 10, 10), 0, 0.8)]
log = match_detections(dup, [Box(0, 0, 10, 10)], [0], 0.5)
print("duplicate marks:", ["TP" if e["tp"] else "FP" for e in log.entries])

# paired t-test between two methods' per-seed scores
ours = [0.512, 0.498, 0.531, 0.545, 0.476, 0.508, 0.522, 0.491, 0.536, 0.503]
base = [0.489, 0.502, 0.511, 0.530, 0.462, 0.501, 0.505, 0.493, 0.518, 0.495]
rep = paired_t_test(ours, base)
print(f"paired t-test: t={rep.t_statistic:.4f}  p={rep.p_value:.6f}  "
      f"mean diff={rep.mean_difference:.4f}  n={rep.n_pairs}")

same = paired_t_test(ours, ours)
print(f"identical samples: t={same.t_statistic}  p={same.p_value}")
