import json

import numpy as np
import pytest

from dgbench.data import get_dataset, make_toy_dataset
from dgbench.hparams import default_hparams
from dgbench.records import (
    RunRecord,
    append_record,
    attach_sub_runs,
    canonical_lines,
    dumps,
    group_cells,
    read_records,
)
from dgbench.sweep import SweepPlan, plan_cells, run_sweep, run_training

FAST = {"arch": "linear", "lr": 1e-2, "batch_size": 16}


def _toy(n_domains=2, **kw):
    return get_dataset("toy", seed=0, spurious=(0.0,) * n_domains, n_per_domain=60, **kw)


def _plan(algs=("ERM",), **kw):
    kw.setdefault("trials", 2)
    kw.setdefault("reps", 1)
    kw.setdefault("n_steps", 6)
    kw.setdefault("checkpoint_freq", 3)
    kw.setdefault("overrides", FAST)
    return SweepPlan("toy", list(algs), **kw)


# single runs ---------------------------------------------------------------


def test_checkpoint_schedule():
    ds = _toy().with_splits([1, 2])
    r = run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 10, 5)
    assert [c["step"] for c in r.checkpoints] == [5, 10]
    assert r.status == "ok" and r.train_envs == [0]
    r = run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 7, 5)
    assert [c["step"] for c in r.checkpoints] == [5, 7]


def test_record_carries_every_domain_and_split():
    ds = _toy(3).with_splits([1, 2, 3])
    r = run_training(ds, "ERM", 0, FAST, {"init": 0, "batch": 0}, 2, 1)
    assert r.domains == ["env0", "env1", "env2"]
    for c in r.checkpoints:
        assert set(c["accs"]) == set(r.domains)
        assert all(set(a) == {"train", "val"} for a in c["accs"].values())
    assert r.split_sizes["env0"] == {"train": 48, "val": 12}


def test_rerun_is_bit_identical():
    ds = _toy().with_splits([1, 2])
    a = run_training(ds, "DRO", 1, {**FAST, "dropout": 0.5}, {"init": 3, "batch": 4}, 20, 5)
    b = run_training(ds, "DRO", 1, {**FAST, "dropout": 0.5}, {"init": 3, "batch": 4}, 20, 5)
    assert dumps(a) == dumps(b)


def test_erm_fits_separable_toy():
    ds = get_dataset("toy", seed=0).with_splits([1, 2])
    r = run_training(ds, "ERM", 1, FAST, {"init": 1, "batch": 2}, 500, 100)
    assert r.checkpoints[-1]["accs"]["env0"]["train"] == 1.0


def test_divergence_marks_record_failed():
    ds = _toy().with_splits([1, 2])
    r = run_training(ds, "ERM", 1, {"lr": 1e200, "batch_size": 16}, {"init": 1, "batch": 2}, 20, 5)
    assert r.status == "failed" and r.failed_step is not None and "non-finite" in r.error
    assert not r.ok
    json.loads(dumps(r))


def test_bad_arguments():
    ds = _toy().with_splits([1, 2])
    with pytest.raises(ValueError):
        run_training(ds, "ERM", 2, FAST, {"init": 0, "batch": 0}, 5, 1)
    with pytest.raises(ValueError):
        run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 5, 1, held_out=1)
    with pytest.raises(ValueError):
        run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 0, 1)


# records -------------------------------------------------------------------


def test_record_round_trip(tmp_path):
    ds = _toy().with_splits([1, 2])
    r = run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 4, 2)
    path = tmp_path / "r.jsonl"
    append_record(path, r)
    append_record(path, r)
    back = read_records(path)
    assert len(back) == 2 and dumps(back[0]) == dumps(r)
    assert RunRecord.from_dict(r.to_dict()) == r


def test_read_records_missing_file_is_empty(tmp_path):
    assert read_records(tmp_path / "none.jsonl") == []


def test_canonical_lines_ignore_order(tmp_path):
    ds = _toy().with_splits([1, 2])
    a = run_training(ds, "ERM", 1, FAST, {"init": 0, "batch": 0}, 2, 1)
    b = run_training(ds, "ERM", 0, FAST, {"init": 0, "batch": 0}, 2, 1)
    for name, order in (("x", (a, b)), ("y", (b, a))):
        for r in order:
            append_record(tmp_path / name, r)
    assert canonical_lines(tmp_path / "x") == canonical_lines(tmp_path / "y")


# sweeps --------------------------------------------------------------------


def test_plan_counts():
    assert len(plan_cells(_plan(trials=2, reps=3), _toy())) == 2 * 3 * 2
    lodo = plan_cells(_plan(trials=2, reps=1, lodo=True), _toy(3))
    # 3 test domains x 2 trials, each with 2 leave-one-out sub-runs
    assert len(lodo) == 6 + 12
    assert len({c["key"] for c in lodo}) == len(lodo)


def test_plan_validation():
    with pytest.raises(ValueError):
        _plan(trials=21)
    with pytest.raises(ValueError):
        _plan(algs=("ERM", "VREx"))
    with pytest.raises(ValueError):
        plan_cells(_plan(lodo=True), _toy(2))
    with pytest.raises(ValueError):
        plan_cells(_plan(test_envs=[5]), _toy(2))


def test_plan_trial_zero_defaults_and_overrides():
    cells = plan_cells(_plan(algs=("IRM",), trials=3, overrides={"arch": "linear"}), _toy())
    first = [c for c in cells if c["trial"] == 0]
    assert all(c["hparams"]["irm_lambda"] == 100.0 and c["hparams"]["arch"] == "linear" for c in first)
    assert cells[1]["hparams"] != cells[0]["hparams"]


def test_plan_seeds_are_distinct():
    cells = plan_cells(_plan(algs=("ERM", "DRO"), trials=4, reps=2), _toy())
    inits = [c["seeds"]["init"] for c in cells]
    assert len(set(inits)) == len(inits)
    # the same repetition shares data splits, a new one reshuffles them
    by_rep = {c["repetition"]: c["split_seeds"] for c in cells}
    assert by_rep[0] != by_rep[1]


def test_sweep_writes_one_record_per_cell_and_resumes(tmp_path):
    out = tmp_path / "s.jsonl"
    plan = _plan(algs=("ERM", "DRO"), reps=2)
    assert run_sweep(plan, out) == 2 * 2 * 2 * 2
    first = canonical_lines(out)
    assert run_sweep(plan, out) == 0
    assert canonical_lines(out) == first
    for r in read_records(out):
        assert r.test_env not in r.train_envs


def test_sweep_resumes_after_partial_file(tmp_path):
    full, part = tmp_path / "full.jsonl", tmp_path / "part.jsonl"
    plan = _plan(trials=3)
    run_sweep(plan, full)
    lines = full.read_text().splitlines(keepends=True)
    part.write_text("".join(lines[:2]))
    assert run_sweep(plan, part) == len(lines) - 2
    assert canonical_lines(part) == canonical_lines(full)


def test_sweep_lodo_records_attach(tmp_path):
    out = tmp_path / "s.jsonl"
    plan = _plan(trials=1, lodo=True, dataset_kwargs={"spurious": (0.0, 0.0, 0.0), "n_per_domain": 40})
    run_sweep(plan, out)
    parents = attach_sub_runs(read_records(out))
    assert len(parents) == 3
    for p in parents:
        assert sorted(s.held_out for s in p.sub_runs) == p.train_envs


def test_crashed_cells_are_retried_once(tmp_path):
    out = tmp_path / "s.jsonl"
    # Mixup needs two training domains; with two domains in total every run crashes
    plan = _plan(algs=("Mixup",), trials=1)
    assert run_sweep(plan, out) == 4
    recs = read_records(out)
    assert all(r.status == "error" and "Mixup" in r.error for r in recs)
    assert run_sweep(plan, out) == 0


def test_workers_do_not_change_records(tmp_path):
    plan_a = _plan(algs=("ERM", "IRM"), trials=2)
    plan_b = _plan(algs=("ERM", "IRM"), trials=2, workers=2)
    run_sweep(plan_a, tmp_path / "a")
    run_sweep(plan_b, tmp_path / "b")
    assert canonical_lines(tmp_path / "a") == canonical_lines(tmp_path / "b")


def test_group_cells_sorted_by_trial(tmp_path):
    out = tmp_path / "s.jsonl"
    run_sweep(_plan(trials=3), out)
    recs = read_records(out)[::-1]
    groups = group_cells(recs)
    assert len(groups) == 2
    for rs in groups.values():
        assert [r.trial for r in rs] == [0, 1, 2]


def test_master_seed_changes_results(tmp_path):
    run_sweep(_plan(master_seed=0), tmp_path / "a")
    run_sweep(_plan(master_seed=1), tmp_path / "b")
    a = [json.loads(x)["seeds"] for x in canonical_lines(tmp_path / "a")]
    b = [json.loads(x)["seeds"] for x in canonical_lines(tmp_path / "b")]
    assert a != b and np.all([x != y for x, y in zip(a, b)])


def test_run_training_needs_splits():
    ds = make_toy_dataset(n_domains=2, n_per_domain=20)
    with pytest.raises(ValueError, match="with_splits"):
        run_training(ds, "ERM", 0, default_hparams("ERM"), {"init": 0, "batch": 0}, 2, 1)
