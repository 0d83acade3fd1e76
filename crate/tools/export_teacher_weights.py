#!/usr/bin/env python3
"""Export torchvision ResNet weights to the pkgnet tensor-archive format.

Usage:
    python tools/export_teacher_weights.py resnet50 weights/resnet50.tw

The archive keeps the original state_dict names (conv1.weight,
layer1.0.bn1.running_mean, ...); pkgnet folds batch norms into the
convolutions at load time. The classifier head is dropped.
"""

import argparse
import json
import struct
import sys
from pathlib import Path

BACKBONES = {
    "resnet18": "resnet18",
    "resnet50": "resnet50",
    "resnext50": "resnext50_32x4d",
    "resnext50_32x4d": "resnext50_32x4d",
    "wide_resnet50": "wide_resnet50_2",
    "wide_resnet50_2": "wide_resnet50_2",
}

MAGIC = b"PKGT"
FORMAT_VERSION = 1


def write_archive(path: Path, meta: dict, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        meta_bytes = json.dumps(meta).encode()
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            for d in t.shape:
                f.write(struct.pack("<I", d))
            f.write(t.astype("<f4").tobytes())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("backbone", choices=sorted(BACKBONES))
    parser.add_argument("output", type=Path, help="destination .tw file")
    args = parser.parse_args()

    try:
        import torchvision.models as models
    except ImportError:
        print("error: torchvision is required (pip install torch torchvision)", file=sys.stderr)
        return 1

    tv_name = BACKBONES[args.backbone]
    model = getattr(models, tv_name)(weights="IMAGENET1K_V1")
    model.eval()

    tensors = {}
    for name, tensor in model.state_dict().items():
        if name.startswith("fc.") or name.endswith("num_batches_tracked"):
            continue
        tensors[name] = tensor.detach().numpy()

    args.output.parent.mkdir(parents=True, exist_ok=True)
    meta = {"backbone": args.backbone, "source": f"torchvision {tv_name} IMAGENET1K_V1"}
    write_archive(args.output, meta, tensors)
    print(f"wrote {len(tensors)} tensors to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
