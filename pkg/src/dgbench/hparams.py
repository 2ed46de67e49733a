"""Default values and random-search distributions for every hyperparameter."""

from __future__ import annotations

import numpy as np

from .seeds import derive_seed

FAMILIES = ("mnist", "resnet")


def _log10_uniform(lo, hi):
    return lambda r: float(10 ** r.uniform(lo, hi))


def _log2_uniform_int(lo, hi):
    return lambda r: int(round(2 ** r.uniform(lo, hi)))


def _log10_uniform_int(lo, hi):
    return lambda r: int(round(10 ** r.uniform(lo, hi)))


def _choice(options):
    return lambda r: float(options[r.integers(len(options))])


def _const(value):
    return lambda r: value


# name -> (default, sampler, support) per family; support is what tests check
def _table(family: str) -> dict[str, dict[str, tuple]]:
    mnist = family == "mnist"
    if family not in FAMILIES:
        raise ValueError(f"unknown dataset family {family!r}; expected one of {FAMILIES}")
    lr = (0.001, _log10_uniform(-4.5, -3.5), ("log10", -4.5, -3.5)) if mnist else (
        5e-5, _log10_uniform(-5, -3.5), ("log10", -5, -3.5))
    lr_gd = (0.001, _log10_uniform(-4.5, -2.5), ("log10", -4.5, -2.5)) if mnist else (
        5e-5, _log10_uniform(-5, -3.5), ("log10", -5, -3.5))
    batch = (64, _log2_uniform_int(3, 9), ("log2int", 3, 9)) if mnist else (32, _log2_uniform_int(3, 5.5), ("log2int", 3, 5.5))
    wd = (0.0, _const(0.0), ("const", 0.0)) if mnist else (0.0, _log10_uniform(-6, -2), ("log10", -6, -2))
    common = {
        "lr": lr,
        "batch_size": batch,
        "weight_decay": wd,
        "dropout": (0.0, _choice([0.0, 0.1, 0.5]), ("choice", 0.0, 0.1, 0.5)),
    }
    adversarial = {
        "lr_g": lr_gd,
        "lr_d": lr_gd,
        "weight_decay_g": wd,
        "lambda": (1.0, _log10_uniform(-2, 2), ("log10", -2, 2)),
        "weight_decay_d": (0.0, _log10_uniform(-6, -2), ("log10", -6, -2)),
        "d_steps_per_g_step": (1, _log2_uniform_int(0, 3), ("log2int", 0, 3)),
        "grad_penalty": (0.0, _log10_uniform(-2, 1), ("log10", -2, 1)),
        "beta1": (0.5, _choice([0.0, 0.5]), ("choice", 0.0, 0.5)),
    }
    return {
        "ERM": common,
        "IRM": {
            **common,
            "irm_lambda": (100.0, _log10_uniform(-1, 5), ("log10", -1, 5)),
            "irm_penalty_anneal_iters": (500, _log10_uniform_int(0, 4), ("log10int", 0, 4)),
        },
        "DRO": {**common, "dro_eta": (0.01, _log10_uniform(-1, 1), ("log10", -1, 1))},
        "Mixup": {**common, "mixup_alpha": (0.2, _log10_uniform(0, 4), ("log10", 0, 4))},
        "MLDG": {**common, "mldg_beta": (1.0, _log10_uniform(-1, 1), ("log10", -1, 1))},
        "CORAL": {**common, "mmd_gamma": (1.0, _log10_uniform(-1, 1), ("log10", -1, 1))},
        "MMD": {**common, "mmd_gamma": (1.0, _log10_uniform(-1, 1), ("log10", -1, 1))},
        "DANN": {**common, **adversarial},
        "CDANN": {**common, **adversarial},
    }


def _entries(algorithm: str, family: str):
    table = _table(family)
    if algorithm not in table:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {', '.join(table)}")
    return table[algorithm]


def default_hparams(algorithm: str, dataset_family: str = "mnist") -> dict:
    return {name: entry[0] for name, entry in _entries(algorithm, dataset_family).items()}


def random_hparams(algorithm: str, dataset_family: str, seed: int) -> dict:
    """Each knob gets its own RNG keyed by name, so adding knobs never shifts others."""
    out = {}
    for name, (_, sampler, _) in _entries(algorithm, dataset_family).items():
        out[name] = sampler(np.random.default_rng(derive_seed(seed, [("hparam", name)])))
    return out


def sample_hparams(algorithm: str, dataset_family: str = "mnist", trial: int = 0, seed: int = 0) -> dict:
    """Trial 0 is the default configuration; later trials are random draws."""
    if trial == 0:
        return default_hparams(algorithm, dataset_family)
    return random_hparams(algorithm, dataset_family, seed)


def hparam_support(algorithm: str, dataset_family: str = "mnist") -> dict[str, tuple]:
    return {name: entry[2] for name, entry in _entries(algorithm, dataset_family).items()}
