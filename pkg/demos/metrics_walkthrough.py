"""GAP, AP@K and mAP@K on a handful of hand-written predictions."""
from tristream.fusion import PredictionSet
from tristream.metrics import ap_at_k, build_pool, evaluate, gap

predictions = [
    PredictionSet("clip_a", [(0, 0.92), (2, 0.05), (1, 0.03)]),
    PredictionSet("clip_b", [(2, 0.50), (1, 0.45), (0, 0.05)]),
    PredictionSet("clip_c", [(0, 0.55), (2, 0.40), (1, 0.05)]),
    PredictionSet("clip_d", [(2, 0.70), (1, 0.20), (0, 0.10)]),
]
truth = {"clip_a": {0}, "clip_b": {1}, "clip_c": {2}, "clip_d": {2, 1}}

pool = build_pool(predictions, truth)
print("global ranking (confidence, item, class, correct):")
for e in pool.entries:
    print(f"  {e.confidence:.2f}  {e.item_id}  {e.class_id}  {'yes' if e.is_correct else 'no'}")
print(f"GAP = {gap(pool):.4f}")
for c in range(3):
    print(f"AP@2 of class {c} = {ap_at_k(c, predictions, truth, 2):.4f}")
report = evaluate(predictions, truth, k=20)
print(f"accuracy {report.accuracy:.3f}, mAP@20 {report.map_at_k:.4f}")
