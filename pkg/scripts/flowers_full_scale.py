"""Full-scale original vs cropped run on a directory-per-class flower dataset.

Needs the images on disk and a ResNet-50 ImageNet state dict saved with
``torch.save(model.state_dict(), path)``; nothing is downloaded. Expect hours
on a CPU. The reference row is printed next to the measured table.

    python scripts/flowers_full_scale.py --data ~/flowers --weights resnet50.pth --out runs/flowers
"""
import argparse
from pathlib import Path

from siamcam.config import load_config
from siamcam.crop import compare_original_vs_cropped

REFERENCE = {
    "Original": (87.15, 0.872, 0.890, 0.872),
    '"Cropped"': (88.31, 0.883, 0.900, 0.880),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("runs/flowers"))
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    config = load_config(args.config, {
        "backbone_id": "resnet50",
        "pretrained_weights": str(args.weights),
        "image_size": (224, 224),
        "epochs": args.epochs,
        "seed": args.seed,
    })
    result = compare_original_vs_cropped(config, args.out, args.data)
    print(result.table())
    print("\nreference (accuracy %, AUC, precision, recall):")
    for name, row in REFERENCE.items():
        print(f"{name:<12}| {row[0]:>8.2f}% {row[1]:>7.3f} {row[2]:>10.3f} {row[3]:>7.3f}")


if __name__ == "__main__":
    main()
