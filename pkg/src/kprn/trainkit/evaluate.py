"""IoU@0.5 grounding accuracy."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from kprn import grounder as gr
from kprn import scene as sc

IOU_THRESHOLD = 0.5


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    skipped: int
    records: list = field(default_factory=list)


def model_predictor(model, config):
    """Predictor ``(scene, query, feats) -> GroundingResult`` for a trained model."""
    grounding = config.grounding if hasattr(config, "grounding") else config

    def predict(scene, query, feats):
        return gr.ground(model, scene, query, grounding, feats=feats)

    return predict


def _score_scene(scene, predict):
    feats = gr.SceneFeatures(scene)
    out = []
    for qi, q in enumerate(scene.queries):
        if q.gt_box is None:
            out.append(None)
            continue
        res = predict(scene, q, feats)
        overlap = sc.iou(res.subject_box, q.gt_box)
        out.append(
            {
                "image_id": scene.image_id,
                "query_index": qi,
                "query": " ".join(q.tokens),
                "pred_box": list(res.subject_box),
                "object_box": list(res.object_box) if res.object_box is not None else None,
                "gt_box": list(q.gt_box),
                "iou": overlap,
                "correct": overlap > IOU_THRESHOLD,
            }
        )
    return out


def evaluate(model, scenes, config, predictor=None, workers=1):
    """Fraction of queries whose predicted subject box has IoU > 0.5 with the
    ground truth. Queries without ``gt_box`` are skipped and counted.

    ``predictor`` overrides the model (used for oracle and baseline
    predictors); ``workers > 1`` scores scenes on a thread pool. Parameters
    are only read here, so sharing them across threads is safe.
    """
    predict = predictor or model_predictor(model, config)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_scene = list(pool.map(lambda s: _score_scene(s, predict), scenes))
    else:
        per_scene = [_score_scene(s, predict) for s in scenes]
    records, skipped = [], 0
    for rows in per_scene:
        for r in rows:
            if r is None:
                skipped += 1
            else:
                records.append(r)
    if not records:
        raise ValueError("evaluation split has no queries with ground truth")
    correct = sum(r["correct"] for r in records)
    return EvalResult(correct / len(records), correct, len(records), skipped, records)
