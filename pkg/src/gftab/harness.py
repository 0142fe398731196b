"""Experiment grids, the JSON-lines results store, and tabular reports."""

from __future__ import annotations

import csv
import fcntl
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import WinMatrix, macro_f1, win_matrix_from_scores
from .tabular import TabularDataset, make_split
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

# method name -> TrainConfig overrides
METHODS: dict[str, dict] = {
    "gftab": {},
    "no_vsn": {"disable_vsn": True},
    "no_tree": {"disable_tree": True},
    "cat_permute": {"cat_strategy": "permute"},
    "cat_random": {"cat_strategy": "random"},
    "cat_embed": {"cat_strategy": "embed"},
    "cat_none": {"cat_strategy": "none"},
    "supervised": {"supervised_only": True},
}
ABLATION_GRID = ("gftab", "no_vsn", "no_tree", "cat_permute", "cat_random", "cat_embed", "cat_none")


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    method: str
    seed: int
    label_fraction: float
    noise_fraction: float
    f1: float
    wall_seconds: float

    @property
    def key(self) -> tuple:
        return (self.dataset, self.method, self.seed, self.label_fraction, self.noise_fraction)

    @property
    def setting(self) -> tuple[float, float]:
        return (self.label_fraction, self.noise_fraction)


class ResultsStore:
    """Append-only JSON-lines file of :class:`RunRecord`.

    Appends rewrite a temp file and rename it over the store under an
    exclusive lock, so concurrent writers never interleave partial lines.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def records(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(RunRecord(**json.loads(line)))
        return out

    def completed(self) -> set[tuple]:
        return {r.key for r in self.records()}

    def append(self, record: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lock_path = self.path.with_name(self.path.name + ".lock")
        with open(lock_path, "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                existing = self.path.read_bytes() if self.path.exists() else b""
                if any(r.key == record.key for r in self.records()):
                    raise ValueError(f"duplicate run record {record.key}")
                fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name + ".")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(existing)
                    fh.write((json.dumps(asdict(record), sort_keys=True) + "\n").encode())
                os.replace(tmp, self.path)
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)


def method_config(base: TrainConfig, method: str, seed: int) -> TrainConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {sorted(METHODS)}")
    return replace(base, seed=seed, **METHODS[method])


def run_cell(
    ds: TabularDataset,
    method: str,
    seed: int,
    label_fraction: float,
    noise_fraction: float,
    base: TrainConfig,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> float:
    """Test macro-F1 of one (method, seed, setting) run."""
    split = make_split(ds, label_fraction, noise_fraction, val_fraction, test_fraction, seed)
    res = fit(ds, split, method_config(base, method, seed))
    pred = res.model.predict(res.dataset, split.test_idx)
    return macro_f1(pred, res.dataset.labels[split.test_idx], ds.n_classes)


def run_experiment(
    datasets: Mapping[str, TabularDataset | str | Path],
    methods: Sequence[str],
    settings: Sequence[tuple[float, float]],
    seeds: Sequence[int],
    out_path: str | Path,
    base: TrainConfig = TrainConfig(),
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> ResultsStore:
    """Run the Cartesian grid, skipping cells already in the store.

    A failing cell is logged and skipped; the rest of the grid still runs.
    """
    store = ResultsStore(out_path)
    try:
        store.path.parent.mkdir(parents=True, exist_ok=True)
        store.path.touch(exist_ok=True)
    except OSError as e:
        raise OSError(f"results store {out_path} is not writable: {e}") from e
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    done = store.completed()
    for name, src in datasets.items():
        ds = src if isinstance(src, TabularDataset) else TabularDataset.load(src)
        for rho, eta in settings:
            for method in methods:
                for seed in seeds:
                    key = (name, method, seed, rho, eta)
                    if key in done:
                        continue
                    t0 = time.perf_counter()
                    try:
                        f1 = run_cell(ds, method, seed, rho, eta, base, val_fraction, test_fraction)
                    except Exception:
                        log.exception("cell %s failed; skipping", key)
                        continue
                    store.append(RunRecord(name, method, seed, rho, eta, float(f1), time.perf_counter() - t0))
                    done.add(key)
    return store


def _cell_stats(records: Iterable[RunRecord]) -> dict[tuple, tuple[float, float, int]]:
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.dataset, r.setting, r.method), []).append(r.f1)
    # population std: a single seed reports +-0
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


def win_matrix(
    records: Sequence[RunRecord],
    label_fraction: float,
    noise_fraction: float,
    methods: Sequence[str] | None = None,
    datasets: Sequence[str] | None = None,
) -> WinMatrix:
    """Strict-win proportions over datasets, comparing seed-averaged F1."""
    recs = [r for r in records if r.setting == (label_fraction, noise_fraction)]
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in recs))
    if datasets is None:
        datasets = list(dict.fromkeys(r.dataset for r in recs))
    stats = _cell_stats(recs)
    setting = (label_fraction, noise_fraction)
    scores = np.empty((len(methods), len(datasets)))
    for i, m in enumerate(methods):
        for j, d in enumerate(datasets):
            if (d, setting, m) not in stats:
                raise ValueError(f"missing record for method {m!r} on dataset {d!r} at setting {setting}")
            scores[i, j] = stats[(d, setting, m)][0]
    return win_matrix_from_scores(scores, methods, datasets)


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.4f} ±{std:.4f}"


def _ranks(values: Sequence[float]) -> list[int]:
    # dense ranking on the displayed value
    uniq = sorted({round(v, 4) for v in values}, reverse=True)
    return [uniq.index(round(v, 4)) + 1 for v in values]


def summarize(records: Sequence[RunRecord]):
    """Rows ``(dataset, setting, method, mean, std, n, rank)`` and per-setting win matrices."""
    if not records:
        raise ValueError("empty results store")
    stats = _cell_stats(records)
    methods = list(dict.fromkeys(r.method for r in records))
    settings = sorted({r.setting for r in records})
    datasets = list(dict.fromkeys(r.dataset for r in records))
    rows = []
    for setting in settings:
        for d in datasets:
            present = [m for m in methods if (d, setting, m) in stats]
            if not present:
                continue
            ranks = _ranks([stats[(d, setting, m)][0] for m in present])
            for m, rk in zip(present, ranks):
                mean, std, n = stats[(d, setting, m)]
                rows.append((d, setting, m, mean, std, n, rk))
    wins = {}
    for setting in settings:
        complete = [d for d in datasets if all((d, setting, m) in stats for m in methods)]
        if complete and len(methods) > 1:
            wins[setting] = win_matrix(records, *setting, methods=methods, datasets=complete)
    return rows, wins


MARKS = {1: " [1st]", 2: " [2nd]", 3: " [3rd]"}


def report(records: Sequence[RunRecord], fmt: str = "table") -> str:
    """Mean ± std per (dataset, setting, method), top three marked, win matrices appended."""
    rows, wins = summarize(records)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "dataset", "label_fraction", "noise_fraction", "method", "opponent", "mean", "std", "n", "rank"])
        for d, (rho, eta), m, mean, std, n, rk in rows:
            w.writerow(["cell", d, rho, eta, m, "", repr(mean), repr(std), n, rk])
        for (rho, eta), wm in wins.items():
            for i, a in enumerate(wm.methods):
                for j, b in enumerate(wm.methods):
                    w.writerow(["win", "", rho, eta, a, b, repr(float(wm.W[i, j])), "", len(wm.datasets), ""])
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    methods = list(dict.fromkeys(r.method for r in records))
    lines = []
    settings = list(dict.fromkeys(s for _, s, *_ in rows))
    for setting in settings:
        lines.append(f"== label_fraction={setting[0]} noise_fraction={setting[1]} ==")
        header = ["dataset"] + methods
        table = [header]
        for d in dict.fromkeys(r[0] for r in rows if r[1] == setting):
            cells = {m: (mean, std, rk) for dd, s, m, mean, std, n, rk in rows if dd == d and s == setting}
            line = [d]
            for m in methods:
                if m in cells:
                    mean, std, rk = cells[m]
                    line.append(format_cell(mean, std) + MARKS.get(rk, ""))
                else:
                    line.append("-")
            table.append(line)
        lines.extend(_align(table))
        if setting in wins:
            wm = wins[setting]
            lines.append(f"-- win matrix over {len(wm.datasets)} dataset(s): row beats column --")
            wt = [[""] + list(wm.methods)]
            for i, m in enumerate(wm.methods):
                wt.append([m] + [f"{v:.3f}" for v in wm.W[i]])
            lines.extend(_align(wt))
        lines.append("")
    return "\n".join(lines)


def _align(table: list[list[str]]) -> list[str]:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
