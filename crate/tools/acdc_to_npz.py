"""Convert the preprocessed ACDC release (HDF5 slices and volumes) to the
per-slice `.npz` layout read by `evil`.

Input layout (as distributed with common semi-supervised ACDC baselines):

    SRC/data/slices/<case>_slice_<k>.h5   training slices, keys image/label
    SRC/data/<case>.h5                    validation/test volumes, [D, H, W]
    SRC/train_slices.list, SRC/val.list, SRC/test.list

Output:

    DST/slices/<case>_slice_<k>.npz       image float32, label uint8
    DST/train.list, DST/val.list, DST/test.list
    DST/splits/labeled_<r>_0.txt          first patients of the training list

Usage: python3 tools/acdc_to_npz.py SRC DST
"""

import argparse
from pathlib import Path

import h5py
import numpy as np

RATIOS = (0.05, 0.10, 0.20)


def read_list(path):
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def save(dst, stem, image, label):
    np.savez(dst / "slices" / f"{stem}.npz", image=image.astype(np.float32), label=label.astype(np.uint8))
    return stem


def convert_train(src, dst):
    stems = []
    for name in read_list(src / "train_slices.list"):
        with h5py.File(src / "data" / "slices" / f"{name}.h5", "r") as f:
            stems.append(save(dst, name, f["image"][:], f["label"][:]))
    return stems


def convert_volumes(src, dst, list_name):
    stems = []
    for case in read_list(src / list_name):
        case = case.removesuffix(".h5")
        with h5py.File(src / "data" / f"{case}.h5", "r") as f:
            image, label = f["image"][:], f["label"][:]
        for k in range(image.shape[0]):
            stems.append(save(dst, f"{case}_slice_{k}", image[k], label[k]))
    return stems


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("src", type=Path)
    parser.add_argument("dst", type=Path)
    args = parser.parse_args()

    (args.dst / "slices").mkdir(parents=True, exist_ok=True)
    lists = {
        "train.list": convert_train(args.src, args.dst),
        "val.list": convert_volumes(args.src, args.dst, "val.list"),
        "test.list": convert_volumes(args.src, args.dst, "test.list"),
    }
    for name, stems in lists.items():
        (args.dst / name).write_text("".join(f"{s}\n" for s in stems))

    patients = sorted({s.split("_")[0] for s in lists["train.list"]})
    (args.dst / "splits").mkdir(exist_ok=True)
    for r in RATIOS:
        count = max(1, round(len(patients) * r))
        (args.dst / "splits" / f"labeled_{r:.2f}_0.txt").write_text("".join(f"{p}\n" for p in patients[:count]))
    print(" ".join(f"{k}: {len(v)} slices" for k, v in lists.items()), f"({len(patients)} training patients)")


if __name__ == "__main__":
    main()
