"""Model selection criteria over run records.

Each criterion returns a :class:`Selection` naming the chosen run and
checkpoint, the score it was chosen by, and the test-domain accuracy it
reports (on the test domain's larger split). Scoring code only ever
looks up the domains its criterion is allowed to see.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .records import RunRecord

ORACLE_QUERY_LIMIT = 20


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class Selection:
    record: RunRecord
    step: int
    score: float
    test_acc: float


def _pooled_acc(record: RunRecord, accs: dict, names: Sequence[str], splits: Sequence[str]) -> float:
    num = den = 0.0
    for name in names:
        for split in splits:
            n = record.split_sizes[name][split]
            num += accs[name][split] * n
            den += n
    return num / den


def _test_acc(record: RunRecord, checkpoint: dict) -> float:
    return checkpoint["accs"][record.test_domain]["train"]


def _check(records: Sequence[RunRecord]) -> list[RunRecord]:
    if not records:
        raise SelectionError("no records to select from")
    for r in records:
        if r.test_env in r.train_envs:
            raise SelectionError(f"record trial={r.trial} trained on its test domain {r.test_env}")
    ok = sorted((r for r in records if r.ok), key=lambda r: r.trial)
    if not ok:
        raise SelectionError("every record in the group failed")
    return ok


def training_domain_score(record: RunRecord, checkpoint: dict) -> float:
    names = [record.domains[i] for i in record.train_envs]
    return _pooled_acc(record, checkpoint["accs"], names, ("val",))


def select_training_domain(records: Sequence[RunRecord]) -> Selection:
    """Best (trial, checkpoint) by accuracy on the pooled training-domain validation splits.

    Ties go to the lower trial index, then the earlier step.
    """
    best = None
    for r in _check(records):
        for ckpt in r.checkpoints:
            score = training_domain_score(r, ckpt)
            if best is None or score > best[0]:
                best = (score, r, ckpt)
    score, r, ckpt = best
    return Selection(r, ckpt["step"], score, _test_acc(r, ckpt))


def leave_one_out_score(record: RunRecord) -> float:
    """Mean over held-out sub-runs of final accuracy on the domain each one skipped."""
    subs = record.sub_runs
    expected = sorted(record.train_envs)
    if sorted(s.held_out for s in subs) != expected:
        raise SelectionError(
            f"trial {record.trial}: sub-runs hold out {sorted(s.held_out for s in subs)}, expected {expected}"
        )
    accs = []
    for s in subs:
        name = s.domains[s.held_out]
        accs.append(_pooled_acc(s, s.checkpoints[-1]["accs"], [name], ("train", "val")))
    return sum(accs) / len(accs)


def select_leave_one_out(records: Sequence[RunRecord]) -> Selection:
    """Trial whose held-out sub-runs score best; reports its full run's final checkpoint."""
    best = None
    for r in _check(records):
        if not r.sub_runs:
            raise SelectionError(f"trial {r.trial} has no leave-one-out sub-runs")
        if not all(s.ok for s in r.sub_runs):
            continue
        score = leave_one_out_score(r)
        if best is None or score > best[0]:
            best = (score, r)
    if best is None:
        raise SelectionError("no trial has a complete set of successful sub-runs")
    score, r = best
    final = r.checkpoints[-1]
    return Selection(r, final["step"], score, _test_acc(r, final))


def select_oracle(records: Sequence[RunRecord], query_limit: int = ORACLE_QUERY_LIMIT) -> Selection:
    """Best trial by test-domain validation accuracy at the final checkpoint only."""
    if len(records) > query_limit:
        raise SelectionError(f"{len(records)} trials exceed the oracle query limit of {query_limit}")
    best = None
    for r in _check(records):
        final = r.checkpoints[-1]
        score = final["accs"][r.test_domain]["val"]
        if best is None or score > best[0]:
            best = (score, r, final)
    score, r, final = best
    return Selection(r, final["step"], score, _test_acc(r, final))


CRITERIA = {
    "training_domain": select_training_domain,
    "leave_one_out": select_leave_one_out,
    "oracle": select_oracle,
}

ALIASES = {"train": "training_domain", "training": "training_domain", "loo": "leave_one_out", "lodo": "leave_one_out"}


def get_criterion(name: str):
    name = ALIASES.get(name, name)
    try:
        return CRITERIA[name]
    except KeyError:
        raise SelectionError(f"unknown criterion {name!r}; expected one of {', '.join(CRITERIA)}") from None
