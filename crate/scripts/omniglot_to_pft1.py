#!/usr/bin/env python3
"""Convert an Omniglot-style image tree into PFT1 tensor files plus a manifest.

Expects the stock Omniglot layout: <src>/<alphabet>/<character>/*.png, one
character directory per class. Images are converted to grayscale, resized,
and scaled to [0, 1] with ink bright (pixels are inverted by default because
Omniglot draws black strokes on white).

Typical use, matching the 20-way training recipe:

    python scripts/omniglot_to_pft1.py images_background data/omniglot \\
        --augment --val-fraction 0.1

With --val-fraction > 0 the classes are shuffled and split into
<dst>/train/manifest.json and <dst>/val/manifest.json; otherwise everything
lands in <dst>/manifest.json. --augment adds the three quarter-turn rotations
as extra classes (class id 4*k + r, matching the library's convention).
"""

import argparse
import json
import random
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def write_pft(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(b"PFT1")
        f.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<I", dim))
        f.write(arr.tobytes())


def load_image(path: Path, size: int, invert: bool) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L").resize((size, size), Image.LANCZOS)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if invert:
        arr = 1.0 - arr
    return arr.reshape(1, size, size)


def collect_classes(src: Path) -> list[list[Path]]:
    classes = []
    for alphabet in sorted(p for p in src.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            images = sorted(character.glob("*.png"))
            if images:
                classes.append(images)
    return classes


def write_split(dst: Path, classes: list[list[Path]], size: int, invert: bool, augment: bool) -> int:
    dst.mkdir(parents=True, exist_ok=True)
    manifest_classes = []
    rotations = range(4) if augment else range(1)
    for base_id, images in enumerate(classes):
        examples = [load_image(p, size, invert) for p in images]
        for r in rotations:
            class_id = 4 * base_id + r if augment else base_id
            files = []
            for i, ex in enumerate(examples):
                # np.rot90 with k=-r turns the image r quarter-turns clockwise.
                rotated = np.rot90(ex, k=-r, axes=(1, 2)) if r else ex
                name = f"class{class_id:05d}_ex{i:05d}.pft"
                write_pft(dst / name, rotated)
                files.append(name)
            manifest_classes.append({"id": class_id, "files": files})
    manifest = {
        "format_version": 1,
        "input_shape": [1, size, size],
        "classes": manifest_classes,
    }
    with open(dst / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return len(manifest_classes)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("src", type=Path, help="Omniglot image root (alphabet/character/*.png)")
    ap.add_argument("dst", type=Path, help="output directory for tensors and manifest")
    ap.add_argument("--size", type=int, default=28, help="output side length (default 28)")
    ap.add_argument("--augment", action="store_true", help="add 90/180/270 degree rotations as new classes")
    ap.add_argument("--val-fraction", type=float, default=0.0, help="fraction of classes held out into a val split")
    ap.add_argument("--limit-classes", type=int, default=0, help="only convert the first N classes (0 = all)")
    ap.add_argument("--seed", type=int, default=0, help="shuffle seed for the train/val split")
    ap.add_argument("--no-invert", action="store_true", help="keep the original polarity (ink dark)")
    args = ap.parse_args()

    if not args.src.is_dir():
        print(f"error: {args.src} is not a directory", file=sys.stderr)
        return 1
    classes = collect_classes(args.src)
    if not classes:
        print(f"error: no character directories with .png files under {args.src}", file=sys.stderr)
        return 1
    if args.limit_classes:
        classes = classes[: args.limit_classes]
    invert = not args.no_invert

    if args.val_fraction > 0.0:
        rng = random.Random(args.seed)
        rng.shuffle(classes)
        n_val = max(1, int(len(classes) * args.val_fraction))
        val, train = classes[:n_val], classes[n_val:]
        n = write_split(args.dst / "train", train, args.size, invert, args.augment)
        print(f"wrote {n} classes to {args.dst / 'train' / 'manifest.json'}")
        n = write_split(args.dst / "val", val, args.size, invert, args.augment)
        print(f"wrote {n} classes to {args.dst / 'val' / 'manifest.json'}")
    else:
        n = write_split(args.dst, classes, args.size, invert, args.augment)
        print(f"wrote {n} classes to {args.dst / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
