"""Build an offline MNIST directory from digits that ship inside packages.

Full MNIST needs a download. The npm ``mnist`` package carries 10,000
digits and is the default source; the mlxtend wheel carries 5,000.

    python demos/prepare_mnist_subset.py data/mnist            # runs `npm pack mnist`
    python demos/prepare_mnist_subset.py data/mnist --tarball mnist-1.1.0.tgz
    python demos/prepare_mnist_subset.py data/mnist --source mlxtend
    export DGBENCH_DATA=data/mnist
"""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

from dgbench.data import save_mnist_idx
from dgbench.sources import mlxtend_digits, npm_mnist_digits


def npm_pack(directory: Path) -> Path:
    subprocess.run(["npm", "pack", "mnist", "--silent"], cwd=directory, check=True, stdout=subprocess.DEVNULL)
    return next(directory.glob("mnist-*.tgz"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", nargs="?", default="data/mnist")
    ap.add_argument("--source", choices=["npm", "mlxtend"], default="npm")
    ap.add_argument("--tarball", help="an already downloaded npm mnist tarball")
    args = ap.parse_args(argv)

    try:
        if args.source == "mlxtend":
            images, labels = mlxtend_digits()
        elif args.tarball:
            images, labels = npm_mnist_digits(args.tarball)
        else:
            with tempfile.TemporaryDirectory() as tmp:
                images, labels = npm_mnist_digits(npm_pack(Path(tmp)))
    except (FileNotFoundError, subprocess.CalledProcessError) as e:
        sys.exit(f"could not read digits: {e}")
    save_mnist_idx(args.out, images, labels)
    print(f"wrote {len(labels)} digits to {args.out}")


if __name__ == "__main__":
    main()
