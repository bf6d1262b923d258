"""Long-running MNIST comparison: two shared layers against full averaging.

Needs the four MNIST IDX files (plain or gzipped) in one directory. Runs the
reference profile (100 devices, 40 rounds) with
two shared layers and with all four shared, on the same seeds, and prints the
final mean personalized accuracy of each. Expect hours of CPU time.

    python scripts/mnist_recipe.py --mnist-dir data/mnist --seeds 0 1 2
"""
import argparse
from pathlib import Path

import numpy as np
import yaml

from wfl_pma.config import from_dict
from wfl_pma.experiment import run_experiment

FILES = {
    "data.mnist.train_images": "train-images-idx3-ubyte",
    "data.mnist.train_labels": "train-labels-idx1-ubyte",
    "data.mnist.test_images": "t10k-images-idx3-ubyte",
    "data.mnist.test_labels": "t10k-labels-idx1-ubyte",
}


def locate(folder: Path, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        if (folder / name).exists():
            return str(folder / name)
    raise SystemExit(f"missing {stem}[.gz] in {folder}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/mnist.yaml")
    ap.add_argument("--mnist-dir", required=True, type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/mnist")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    # the paths go in before validation, which rejects an MNIST source without them
    raw = yaml.safe_load(Path(args.config).read_text()) or {}
    mnist = raw.setdefault("data", {}).setdefault("mnist", {})
    for key, stem in FILES.items():
        mnist[key.rsplit(".", 1)[1]] = locate(args.mnist_dir, stem)
    base = from_dict(raw)
    final = {}
    for depth in (2, 4):
        cfg = base.replace(**{"learning.split_depth": depth})
        results = run_experiment(cfg, out=Path(args.out) / f"split_depth={depth}",
                                 seeds=args.seeds, threads=args.threads)
        final[depth] = [r.rows[-1]["mean_accuracy"] for r in results]
        print(f"split_depth={depth}: " + " ".join(f"{a:.4f}" for a in final[depth]), flush=True)
    gain = np.array(final[2]) - np.array(final[4])
    print(f"partial minus full, per seed: {' '.join(f'{g:+.4f}' for g in gain)}")
    print("partial >= full on every seed" if np.all(gain >= 0) else "full won on some seed")


if __name__ == "__main__":
    main()
