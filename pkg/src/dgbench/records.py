"""Run records and their JSONL encoding."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

SCHEMA_VERSION = 1


@dataclass
class RunRecord:
    """Everything one training run produced.

    ``checkpoints`` is a list of ``{"step": int, "accs": {domain: {"train": a, "val": b}}}``.
    Leave-one-domain-out runs carry ``held_out`` (a training-domain index
    they skipped) and are nested under their parent's ``sub_runs`` after
    loading.
    """

    algorithm: str
    dataset: str
    test_env: int
    trial: int
    repetition: int
    hparams: dict
    seeds: dict
    domains: list[str]
    train_envs: list[int]
    split_sizes: dict
    n_steps: int
    status: str = "ok"
    checkpoints: list = field(default_factory=list)
    held_out: int | None = None
    failed_step: int | None = None
    error: str | None = None
    key: str = ""
    sub_runs: list["RunRecord"] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def ok(self) -> bool:
        return self.status == "ok" and bool(self.checkpoints)

    @property
    def test_domain(self) -> str:
        return self.domains[self.test_env]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sub_runs"] = [s.to_dict() for s in self.sub_runs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        kwargs["sub_runs"] = [cls.from_dict(s) for s in d.get("sub_runs", [])]
        return cls(**kwargs)


def dumps(record: RunRecord) -> str:
    """Canonical single-line JSON (sorted keys, no whitespace)."""
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)


def append_record(path: str | os.PathLike, record: RunRecord) -> None:
    """Append one whole line with a single write."""
    line = dumps(record) + "\n"
    with open(path, "a", encoding="utf-8") as f:
        f.write(line)
        f.flush()


def read_records(path: str | os.PathLike) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(RunRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed record ({e})") from None
    return out


def canonical_lines(path: str | os.PathLike) -> list[str]:
    """Record lines sorted, for order-insensitive comparison of sweep outputs."""
    with open(path, encoding="utf-8") as f:
        return sorted(line for line in f if line.strip())


def attach_sub_runs(records: Iterable[RunRecord]) -> list[RunRecord]:
    """Nest held-out sub-runs under the full run of the same cell and trial."""
    records = list(records)
    parents = {}
    for r in records:
        if r.held_out is None:
            parents[(r.algorithm, r.dataset, r.test_env, r.trial, r.repetition)] = r
    for r in records:
        if r.held_out is not None:
            parent = parents.get((r.algorithm, r.dataset, r.test_env, r.trial, r.repetition))
            if parent is not None and all(s.held_out != r.held_out or s.key != r.key for s in parent.sub_runs):
                parent.sub_runs.append(r)
    for p in parents.values():
        p.sub_runs.sort(key=lambda s: s.held_out)
    return list(parents.values())


def group_cells(records: Iterable[RunRecord]) -> dict[tuple, list[RunRecord]]:
    """Full runs keyed by ``(algorithm, dataset, test_env, repetition)``, sorted by trial."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in attach_sub_runs(records):
        groups.setdefault((r.algorithm, r.dataset, r.test_env, r.repetition), []).append(r)
    for v in groups.values():
        v.sort(key=lambda r: r.trial)
    return groups
