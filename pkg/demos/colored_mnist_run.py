"""Train ERM and IRM once each on Colored MNIST and print per-domain accuracy.

Needs an MNIST IDX directory (see prepare_mnist_subset.py):

    python demos/colored_mnist_run.py data/mnist --steps 1000
"""

import argparse

from dgbench.data import get_dataset
from dgbench.hparams import default_hparams
from dgbench.seeds import derive_seed
from dgbench.sweep import run_training

ap = argparse.ArgumentParser()
ap.add_argument("data_dir")
ap.add_argument("--steps", type=int, default=1000)
ap.add_argument("--test-env", type=int, default=2)
args = ap.parse_args()

ds = get_dataset("cmnist", data_dir=args.data_dir, seed=0).with_splits([0, 1, 2])
for name in ("ERM", "IRM"):
    hp = {**default_hparams(name, "mnist"), "arch": "mlp", "mlp_pool": 2}
    seeds = {p: derive_seed(0, [("demo", name), ("purpose", p)]) for p in ("init", "batch")}
    rec = run_training(ds, name, args.test_env, hp, seeds, args.steps, checkpoint_freq=args.steps // 10)
    last = rec.checkpoints[-1]
    accs = "  ".join(f"{d}: {a['val']:.3f}" for d, a in last["accs"].items())
    print(f"{name:4s} step {last['step']}  {accs}  (test domain {ds.domains[args.test_env].name})")
