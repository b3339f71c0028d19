"""Original vs cropped training on the synthetic localized-object set.

For each seed: generate 2 x 100 images at 64x64, run the comparison, then
score every gated anchor's heat box against the ground-truth object box.
The breakdown splits anchors by which embedding of the pair is longer and
also scores the counterfactual map, which is where the localization of the
object goes when the factual map misses it.

    python scripts/desk_compare.py --seeds 0 1 2 --out runs/desk
"""
import argparse
import json
from pathlib import Path

import numpy as np
import torch

from siamcam.config import ExperimentConfig
from siamcam.crop import bbox_from_heatmap, compare_original_vs_cropped, iou
from siamcam.data import generate_synthetic_dataset, preprocess, read_box_manifest
from siamcam.errors import ExplainError
from siamcam.gradcam import COUNTERFACTUAL, FACTUAL, gradcam_map, neuron_weights, normalize_map, upsample
from siamcam.model import forward_pair, load_model


def box_iou(trace, mode, size, truth, config):
    alpha = neuron_weights(trace, "a", mode, target=config.gradcam_target)
    heat = normalize_map(upsample(gradcam_map(alpha, trace.activations_a), size))
    try:
        return iou(bbox_from_heatmap(heat, config.bbox_fraction, config.min_box_fraction), truth)
    except ExplainError:
        return 0.0


def analyse(run_dir: Path, root: Path, result, config) -> dict:
    model = load_model(run_dir / "original.pt")
    truth = read_box_manifest(root)
    rows = []
    for a in result.audit:
        if a.similarity is None or a.similarity <= config.crop_similarity_gate:
            continue
        pa = preprocess(root / a.anchor, config.image_size)
        pb = preprocess(root / a.partner, config.image_size)
        trace = forward_pair(model, pa, pb, capture=True)
        longer = bool(torch.linalg.vector_norm(trace.embedding_a) > torch.linalg.vector_norm(trace.embedding_b))
        f = box_iou(trace, FACTUAL, config.image_size, truth[a.anchor], config)
        cf = box_iou(trace, COUNTERFACTUAL, config.image_size, truth[a.anchor], config)
        rows.append((longer, f >= 0.3, cf >= 0.3))
    rows = np.array(rows, dtype=bool).reshape(-1, 3)
    longer, fact, counter = rows.T

    def rate(mask):
        return float(mask.mean()) if mask.size else float("nan")

    return {
        "gated": int(len(rows)),
        "factual_hit": rate(fact),
        "factual_hit_when_anchor_longer": rate(fact[longer]),
        "factual_hit_when_anchor_shorter": rate(fact[~longer]),
        "factual_or_counterfactual_hit": rate(fact | counter),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--per-class", type=int, default=100)
    args = p.parse_args()
    torch.set_num_threads(1)
    summary = {}
    for seed in args.seeds:
        root = generate_synthetic_dataset(args.out / f"data{seed}", 2, args.per_class, (64, 64), seed=seed)
        config = ExperimentConfig(image_size=(64, 64), epochs=args.epochs, seed=seed)
        run_dir = args.out / f"run{seed}"
        result = compare_original_vs_cropped(config, run_dir, root)
        print(f"seed {seed}\n{result.table()}")
        stats = analyse(run_dir, root, result, config)
        print(json.dumps(stats, indent=2))
        summary[seed] = {"report": result.to_dict(), "localization": stats}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
