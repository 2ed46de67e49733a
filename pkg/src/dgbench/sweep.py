"""Single training runs and the resumable sweep over algorithms, test domains, trials and repetitions."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .algorithms import ALGORITHMS, make_algorithm
from .autodiff import NumericError
from .data import MultiDomainDataset, get_dataset, sample_minibatches
from .hparams import sample_hparams
from .records import RunRecord, append_record, read_records
from .seeds import derive_seed
from .selection import ORACLE_QUERY_LIMIT

log = logging.getLogger(__name__)

EVAL_BATCH = 512


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def accuracy(algorithm, x: np.ndarray, y: np.ndarray, batch_size: int = EVAL_BATCH) -> float:
    if len(y) == 0:
        return 0.0
    logits = algorithm.predict(x, batch_size=batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def evaluate(algorithm, dataset: MultiDomainDataset) -> dict:
    """Accuracy on every domain's train and val split."""
    out = {}
    for d in dataset.domains:
        accs = {}
        for split in ("train", "val"):
            idx = d.split_indices(split)
            accs[split] = accuracy(algorithm, d.inputs(idx), d.y[idx])
        out[d.name] = accs
    return out


def run_training(
    dataset: MultiDomainDataset,
    algorithm: str,
    test_env: int,
    hparams: dict,
    seeds: dict,
    n_steps: int,
    checkpoint_freq: int,
    held_out: int | None = None,
    trial: int = 0,
    repetition: int = 0,
    dataset_name: str | None = None,
) -> RunRecord:
    """Train one model on every domain except ``test_env`` (and ``held_out``).

    ``seeds`` needs ``init`` (weights, dropout, pairings) and ``batch``
    (minibatch sampling). Accuracies are recorded every ``checkpoint_freq``
    steps and at the final step. A non-finite value stops the run and marks
    the record failed.
    """
    n_dom = len(dataset)
    if not 0 <= test_env < n_dom:
        raise ValueError(f"test_env {test_env} out of range for {n_dom} domains")
    if held_out is not None and (held_out == test_env or not 0 <= held_out < n_dom):
        raise ValueError(f"held_out {held_out} must be a training domain other than test_env {test_env}")
    if n_steps < 1 or checkpoint_freq < 1:
        raise ValueError("n_steps and checkpoint_freq must be >= 1")
    train_envs = [i for i in range(n_dom) if i not in (test_env, held_out)]
    if not train_envs:
        raise ValueError("no training domains left")
    if any(d.train_idx is None for d in dataset.domains):
        raise ValueError("dataset has no train/val splits; use dataset.with_splits(seeds)")

    algo = make_algorithm(
        algorithm, dataset.input_shape, dataset.num_classes, len(train_envs), hparams, seeds["init"], dataset.family
    )
    batch_rng = np.random.default_rng(seeds["batch"])
    batch_size = int(algo.hparams["batch_size"])
    record = RunRecord(
        algorithm=algorithm,
        dataset=dataset_name or dataset.name,
        test_env=test_env,
        trial=trial,
        repetition=repetition,
        hparams=_jsonable(algo.hparams),
        seeds=dict(seeds),
        domains=dataset.domain_names,
        train_envs=train_envs,
        split_sizes={d.name: {"train": len(d.train_idx), "val": len(d.val_idx)} for d in dataset.domains},
        n_steps=n_steps,
        held_out=held_out,
    )
    for step in range(1, n_steps + 1):
        batches = sample_minibatches(dataset, train_envs, batch_size, batch_rng)
        try:
            algo.update(batches)
        except NumericError as e:
            record.status = "failed"
            record.failed_step = step
            record.error = str(e)
            return record
        if step % checkpoint_freq == 0 or step == n_steps:
            record.checkpoints.append({"step": step, "accs": evaluate(algo, dataset)})
    return record


# sweeps --------------------------------------------------------------------


@dataclass
class SweepPlan:
    dataset: str
    algorithms: Sequence[str]
    trials: int = 20
    reps: int = 3
    master_seed: int = 0
    workers: int = 1
    test_envs: Sequence[int] | None = None
    n_steps: int | None = None
    checkpoint_freq: int | None = None
    lodo: bool = False
    overrides: dict = field(default_factory=dict)
    data_dir: str | None = None
    dataset_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.trials <= ORACLE_QUERY_LIMIT:
            raise ValueError(f"trials must be in [1, {ORACLE_QUERY_LIMIT}], got {self.trials}")
        if self.reps < 1 or self.workers < 1:
            raise ValueError("reps and workers must be >= 1")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {a!r}; valid names: {', '.join(ALGORITHMS)}")


def dataset_seed(plan: SweepPlan) -> int:
    return derive_seed(plan.master_seed, [("dataset", plan.dataset), ("purpose", "generate")])


def split_seeds(master_seed: int, dataset: str, rep: int, n_domains: int) -> list[int]:
    return [derive_seed(master_seed, [("rep", rep), ("dataset", dataset), ("purpose", "split"), ("domain", d)])
            for d in range(n_domains)]


def cell_key(cell: dict) -> str:
    blob = json.dumps(_jsonable(cell), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def plan_cells(plan: SweepPlan, dataset: MultiDomainDataset) -> list[dict]:
    """Every run the plan asks for, in a fixed order, with hparams and seeds resolved."""
    n_dom = len(dataset)
    test_envs = list(range(n_dom)) if plan.test_envs is None else list(plan.test_envs)
    for t in test_envs:
        if not 0 <= t < n_dom:
            raise ValueError(f"test_env {t} out of range for {n_dom} domains")
    if plan.lodo and n_dom < 3:
        raise ValueError("leave-one-domain-out needs at least two training domains")
    n_steps = plan.n_steps or dataset.n_steps
    freq = plan.checkpoint_freq or dataset.checkpoint_freq
    cells = []
    for rep in range(plan.reps):
        for alg in plan.algorithms:
            for t in test_envs:
                for trial in range(plan.trials):
                    path = [("rep", rep), ("algorithm", alg), ("dataset", plan.dataset), ("test_env", t), ("trial", trial)]
                    hp = sample_hparams(alg, dataset.family, trial, derive_seed(plan.master_seed, path + [("purpose", "hparams")]))
                    hp.update(plan.overrides)
                    held = [None] + ([i for i in range(n_dom) if i != t] if plan.lodo else [])
                    for h in held:
                        sub = path + ([("held_out", h)] if h is not None else [])
                        seeds = {p: derive_seed(plan.master_seed, sub + [("purpose", p)]) for p in ("init", "batch")}
                        cell = {
                            "algorithm": alg, "dataset": plan.dataset, "dataset_kwargs": plan.dataset_kwargs,
                            "test_env": t, "trial": trial, "repetition": rep, "held_out": h,
                            "hparams": _jsonable(hp), "seeds": seeds, "n_steps": n_steps, "checkpoint_freq": freq,
                            "split_seeds": split_seeds(plan.master_seed, plan.dataset, rep, n_dom),
                        }
                        cell["key"] = cell_key(cell)
                        cells.append(cell)
    return cells


_WORKER_DATASET: MultiDomainDataset | None = None


def _init_worker(dataset: MultiDomainDataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_cell(cell: dict, dataset: MultiDomainDataset | None = None) -> RunRecord:
    dataset = dataset if dataset is not None else _WORKER_DATASET
    try:
        record = run_training(
            dataset.with_splits(cell["split_seeds"]),
            cell["algorithm"], cell["test_env"], cell["hparams"], cell["seeds"],
            cell["n_steps"], cell["checkpoint_freq"], held_out=cell["held_out"],
            trial=cell["trial"], repetition=cell["repetition"], dataset_name=cell["dataset"],
        )
    except Exception as e:  # a crashed cell must not take the sweep down
        record = _error_record(cell, dataset, f"{type(e).__name__}: {e}")
    record.key = cell["key"]
    return record


def _error_record(cell: dict, dataset: MultiDomainDataset, message: str) -> RunRecord:
    t, h = cell["test_env"], cell["held_out"]
    return RunRecord(
        algorithm=cell["algorithm"], dataset=cell["dataset"], test_env=t, trial=cell["trial"],
        repetition=cell["repetition"], hparams=cell["hparams"], seeds=cell["seeds"],
        domains=dataset.domain_names, train_envs=[i for i in range(len(dataset)) if i not in (t, h)],
        split_sizes={}, n_steps=cell["n_steps"], status="error", held_out=h, error=message, key=cell["key"],
    )


def _pending(cells: list[dict], existing: list[RunRecord]) -> list[dict]:
    """Cells without a finished record; crashed cells get one retry."""
    done, crashes = set(), {}
    for r in existing:
        if r.status in ("ok", "failed"):
            done.add(r.key)
        else:
            crashes[r.key] = crashes.get(r.key, 0) + 1
    return [c for c in cells if c["key"] not in done and crashes.get(c["key"], 0) < 2]


def load_plan_dataset(plan: SweepPlan) -> MultiDomainDataset:
    return get_dataset(plan.dataset, plan.data_dir, seed=dataset_seed(plan), **plan.dataset_kwargs)


def run_sweep(plan: SweepPlan, out_path, dataset: MultiDomainDataset | None = None) -> int:
    """Run every missing cell of ``plan``, appending one JSONL line per run.

    Returns the number of records written. Completed cells already in
    ``out_path`` are skipped, so an interrupted sweep resumes where it left
    off and a finished one is a no-op.
    """
    if dataset is None:
        dataset = load_plan_dataset(plan)
    cells = plan_cells(plan, dataset)
    written = 0
    for _ in range(2):  # second pass retries cells that crashed in the first
        todo = _pending(cells, read_records(out_path))
        if not todo:
            break
        log.info("sweep %s: %d of %d cells to run", plan.dataset, len(todo), len(cells))
        if plan.workers == 1:
            for cell in todo:
                append_record(out_path, _run_cell(cell, dataset))
                written += 1
        else:
            with ProcessPoolExecutor(plan.workers, initializer=_init_worker, initargs=(dataset,)) as pool:
                futures = {pool.submit(_run_cell, c): c for c in todo}
                try:
                    for fut in as_completed(futures):
                        try:
                            record = fut.result()
                        except Exception as e:  # the worker process itself died
                            record = _error_record(futures[fut], dataset, f"{type(e).__name__}: {e}")
                        append_record(out_path, record)
                        written += 1
                except KeyboardInterrupt:
                    pool.shutdown(wait=True, cancel_futures=True)
                    raise
    return written


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
