"""Mixed-variable tabular datasets: schema, CSV ingestion, splits, synthetic data."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

DATASET_FORMAT = "gftab-dataset/1"


class SchemaError(ValueError):
    """Schema and data disagree."""


class DatasetRejected(ValueError):
    """Dataset fails a preprocessing criterion as a whole."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    cardinality: int | None = None
    ordered: bool = False
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 2:
                raise SchemaError(f"column {self.name!r}: categorical cardinality must be >= 2")
            if self.categories is not None and len(self.categories) != self.cardinality:
                raise SchemaError(f"column {self.name!r}: {len(self.categories)} categories for cardinality {self.cardinality}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            d["cardinality"] = self.cardinality
            d["ordered"] = self.ordered
            if self.categories is not None:
                d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        unknown = set(d) - {"name", "kind", "cardinality", "ordered", "categories"}
        if unknown:
            raise SchemaError(f"column {d.get('name')!r}: unknown keys {sorted(unknown)}")
        cats = d.get("categories")
        return cls(
            name=str(d["name"]),
            kind=str(d["kind"]).lower(),
            cardinality=None if d.get("cardinality") is None else int(d["cardinality"]),
            ordered=bool(d.get("ordered", False)),
            categories=None if cats is None else tuple(str(c) for c in cats),
        )


@dataclass(frozen=True)
class DatasetSchema:
    columns: tuple[ColumnSpec, ...]
    target: str
    classes: tuple[str, ...] | None = None

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if self.target in names:
            raise SchemaError(f"target {self.target!r} is listed among feature columns")
        if self.classes is not None and len(self.classes) < 2:
            raise SchemaError("target needs at least 2 classes")

    @property
    def cont_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if not c.is_categorical]

    @property
    def cat_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.is_categorical]

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([c.cardinality for c in self.cat_columns], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        if self.classes is None:
            raise SchemaError("target classes not resolved")
        return len(self.classes)

    def to_dict(self) -> dict:
        d: dict = {"target": self.target, "columns": [c.to_dict() for c in self.columns]}
        if self.classes is not None:
            d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        unknown = set(d) - {"target", "columns", "classes"}
        if unknown:
            raise SchemaError(f"schema: unknown keys {sorted(unknown)}")
        if "target" not in d:
            raise SchemaError("schema: missing 'target'")
        classes = d.get("classes")
        return cls(
            columns=tuple(ColumnSpec.from_dict(c) for c in d.get("columns", [])),
            target=str(d["target"]),
            classes=None if classes is None else tuple(str(c) for c in classes),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Standardized continuous matrix + categorical codes + optional labels.

    ``cont_mean``/``cont_std`` are the raw-scale statistics that produced
    ``cont``; :meth:`restandardize` refits them on a subset of rows.
    """

    schema: DatasetSchema
    cont: np.ndarray
    cat: np.ndarray
    labels: np.ndarray
    label_present: np.ndarray
    cont_mean: np.ndarray
    cont_std: np.ndarray
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.cont.shape[0]
        if self.cat.shape[0] != n or self.labels.shape[0] != n or self.label_present.shape[0] != n:
            raise SchemaError("row counts disagree")
        if self.cont.shape[1] != len(self.schema.cont_columns) or self.cat.shape[1] != len(self.schema.cat_columns):
            raise SchemaError("matrix widths disagree with schema")
        card = self.schema.cardinalities
        if self.cat.size and ((self.cat < 0).any() or (self.cat >= card[None, :]).any()):
            raise SchemaError("categorical code out of range")
        if not np.isfinite(self.cont).all():
            raise SchemaError("non-finite continuous values")
        for a in (self.cont, self.cat, self.labels, self.label_present, self.cont_mean, self.cont_std):
            a.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.cont.shape[0]

    @property
    def m_cont(self) -> int:
        return self.cont.shape[1]

    @property
    def m_cat(self) -> int:
        return self.cat.shape[1]

    @property
    def n_classes(self) -> int:
        return self.schema.n_classes

    def restandardize(self, fit_idx: np.ndarray) -> "TabularDataset":
        """Refit standardization statistics on ``fit_idx`` rows only."""
        raw = self.cont * self.cont_std + self.cont_mean
        mean, std = _fit_standardizer(raw[fit_idx])
        return replace(self, cont=(raw - mean) / std, cont_mean=mean, cont_std=std)

    def decode_categorical(self) -> list[list[str]]:
        cols = self.schema.cat_columns
        return [[cols[j].categories[c] for j, c in enumerate(row)] for row in self.cat.tolist()]

    def save(self, path: str | Path) -> None:
        header = {"format": DATASET_FORMAT, "schema": self.schema.to_dict(), "report": self.report}
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.array(json.dumps(header, sort_keys=True)),
                cont=self.cont,
                cat=self.cat,
                labels=self.labels,
                label_present=self.label_present,
                cont_mean=self.cont_mean,
                cont_std=self.cont_std,
            )

    @classmethod
    def load(cls, path: str | Path) -> "TabularDataset":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != DATASET_FORMAT:
                raise SchemaError(f"unsupported dataset format {header.get('format')!r}")
            return cls(
                schema=DatasetSchema.from_dict(header["schema"]),
                cont=z["cont"].copy(),
                cat=z["cat"].copy(),
                labels=z["labels"].copy(),
                label_present=z["label_present"].copy(),
                cont_mean=z["cont_mean"].copy(),
                cont_std=z["cont_std"].copy(),
                report=header.get("report", {}),
            )


def _fit_standardizer(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


_NAT_SPLIT = re.compile(r"(\d+(?:\.\d+)?)")


def natural_key(s: str):
    """Sort key placing '2' before '10' and 'level 2' before 'level 10'."""
    key = []
    for part in _NAT_SPLIT.split(s):
        if not part:
            continue
        if _NAT_SPLIT.fullmatch(part):
            key.append((0, float(part), part))
        else:
            key.append((1, 0.0, part.lower()))
    return key


def ingest(
    csv_path: str | Path,
    schema: DatasetSchema,
    missing_threshold: float = 0.30,
    na_values: Sequence[str] = ("",),
) -> TabularDataset:
    """Read a CSV against ``schema`` and apply the preprocessing criteria.

    Columns above ``missing_threshold`` missing rate and categorical columns
    with a single observed category are dropped (listed under
    ``report["dropped"]``). Remaining gaps are imputed with the median
    (continuous) or mode (categorical), so no row is lost.
    """
    na = set(na_values)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    if schema.target not in header:
        raise SchemaError(f"target column {schema.target!r} missing from CSV")
    declared = [c.name for c in schema.columns]
    missing_cols = [n for n in declared if n not in header]
    extra_cols = [n for n in header if n not in declared and n != schema.target]
    if missing_cols or extra_cols:
        raise SchemaError(f"schema/CSV column mismatch: missing {missing_cols}, unexpected {extra_cols}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate CSV header names")
    pos = {h: i for i, h in enumerate(header)}
    for r_i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"row {r_i + 2}: expected {len(header)} fields, got {len(r)}")
    n = len(rows)
    if n == 0:
        raise SchemaError("CSV has no data rows")

    raw = {h: [r[pos[h]].strip() for r in rows] for h in header}
    miss = {c.name: np.array([v in na for v in raw[c.name]]) for c in schema.columns}
    missing_rates = {k: float(v.mean()) for k, v in miss.items()}
    total = sum(int(v.sum()) for v in miss.values())
    overall = total / (n * len(schema.columns)) if schema.columns else 0.0
    if overall > missing_threshold:
        raise DatasetRejected(f"dataset missing rate {overall:.3f} exceeds {missing_threshold}")

    dropped: dict[str, str] = {}
    kept: list[ColumnSpec] = []
    cont_cols: list[np.ndarray] = []
    cat_cols: list[np.ndarray] = []
    for spec in schema.columns:
        m = miss[spec.name]
        if missing_rates[spec.name] > missing_threshold:
            dropped[spec.name] = f"missing rate {missing_rates[spec.name]:.3f}"
            continue
        values = raw[spec.name]
        if not spec.is_categorical:
            try:
                x = np.array([np.nan if mi else float(v) for v, mi in zip(values, m)], dtype=np.float64)
            except ValueError as e:
                raise SchemaError(f"column {spec.name!r}: non-numeric value ({e})") from None
            if np.isnan(x).all():
                dropped[spec.name] = "no observed values"
                continue
            x[np.isnan(x)] = np.nanmedian(x)
            kept.append(spec)
            cont_cols.append(x)
            continue
        observed = [v for v, mi in zip(values, m) if not mi]
        if spec.categories is not None:
            vocab = list(spec.categories)
            unknown = sorted(set(observed) - set(vocab))
            if unknown:
                raise SchemaError(f"column {spec.name!r}: values {unknown[:5]} not among declared categories")
        else:
            distinct = list(dict.fromkeys(observed))
            if len(distinct) > spec.cardinality:
                raise SchemaError(
                    f"column {spec.name!r}: {len(distinct)} distinct values exceed declared cardinality {spec.cardinality}"
                )
            vocab = sorted(distinct, key=natural_key) if spec.ordered else distinct
        if len(set(observed)) <= 1:
            dropped[spec.name] = "single observed category"
            continue
        index = {v: i for i, v in enumerate(vocab)}
        codes = np.array([index[v] if not mi else -1 for v, mi in zip(values, m)], dtype=np.int64)
        if (codes < 0).any():
            counts = np.bincount(codes[codes >= 0], minlength=len(vocab))
            codes[codes < 0] = int(np.argmax(counts))
        kept.append(replace(spec, cardinality=len(vocab), categories=tuple(vocab)))
        cat_cols.append(codes)

    y_raw = raw[schema.target]
    present = np.array([v not in na for v in y_raw])
    if schema.classes is not None:
        classes = list(schema.classes)
        unknown = sorted({v for v, p in zip(y_raw, present) if p} - set(classes))
        if unknown:
            raise SchemaError(f"target values {unknown[:5]} not among declared classes")
    else:
        classes = sorted({v for v, p in zip(y_raw, present) if p}, key=natural_key)
    if len(classes) < 2:
        raise SchemaError(f"target {schema.target!r} needs at least 2 classes, found {len(classes)}")
    cls_index = {c: i for i, c in enumerate(classes)}
    labels = np.array([cls_index[v] if p else -1 for v, p in zip(y_raw, present)], dtype=np.int64)

    cont = np.stack(cont_cols, axis=1) if cont_cols else np.zeros((n, 0))
    cat = np.stack(cat_cols, axis=1) if cat_cols else np.zeros((n, 0), dtype=np.int64)
    mean, std = _fit_standardizer(cont)
    out_schema = DatasetSchema(columns=tuple(kept), target=schema.target, classes=tuple(classes))
    report = {
        "n_rows": n,
        "missing_rates": missing_rates,
        "overall_missing_rate": overall,
        "dropped": dropped,
    }
    return TabularDataset(
        schema=out_schema,
        cont=(cont - mean) / std,
        cat=cat,
        labels=labels,
        label_present=present,
        cont_mean=mean,
        cont_std=std,
        report=report,
    )


def write_csv(ds: TabularDataset, path: str | Path) -> None:
    """Write raw-scale values back out as CSV (codes decoded to categories)."""
    raw_cont = ds.cont * ds.cont_std + ds.cont_mean
    cont_names = [c.name for c in ds.schema.cont_columns]
    cat_specs = ds.schema.cat_columns
    classes = ds.schema.classes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in ds.schema.columns] + [ds.schema.target])
        ci = {n: j for j, n in enumerate(cont_names)}
        ki = {c.name: j for j, c in enumerate(cat_specs)}
        for i in range(ds.n_rows):
            row = []
            for c in ds.schema.columns:
                if c.is_categorical:
                    j = ki[c.name]
                    row.append(cat_specs[j].categories[ds.cat[i, j]])
                else:
                    row.append(repr(float(raw_cont[i, ci[c.name]])))
            row.append(classes[ds.labels[i]] if ds.label_present[i] else "")
            w.writerow(row)


@dataclass(frozen=True, eq=False)
class SemiSplit:
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    label_fraction: float
    noise_fraction: float
    seed: int
    noisy_labels: np.ndarray  # aligned with labeled_idx

    @property
    def pool_idx(self) -> np.ndarray:
        return np.sort(np.concatenate([self.labeled_idx, self.unlabeled_idx]))


def proportional_allocation(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` draws over classes."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() == 0:
        return np.zeros_like(counts)
    quota = counts * total / counts.sum()
    alloc = np.floor(quota).astype(np.int64)
    remainder = int(total - alloc.sum())
    # stable tie-break on class index
    order = np.lexsort((np.arange(len(counts)), -(quota - alloc)))
    alloc[order[:remainder]] += 1
    return np.minimum(alloc, counts)


def _stratified_take(idx: np.ndarray, y: np.ndarray, size: int, rng: np.random.Generator, k: int):
    counts = np.bincount(y[idx], minlength=k)
    alloc = proportional_allocation(counts, size)
    take = []
    for c in range(k):
        members = idx[y[idx] == c]
        if alloc[c]:
            take.append(rng.choice(members, size=alloc[c], replace=False))
    chosen = np.sort(np.concatenate(take)) if take else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(idx, chosen)
    return chosen, rest


def make_split(
    ds: TabularDataset,
    label_fraction: float,
    noise_fraction: float = 0.0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
    seed: int = 0,
) -> SemiSplit:
    """Stratified val/test/labeled/unlabeled split with symmetric label noise."""
    if not 0.0 < label_fraction <= 1.0:
        raise SplitError("label_fraction must be in (0, 1]")
    if not 0.0 <= noise_fraction < 1.0 + 1e-12:
        raise SplitError("noise_fraction must be in [0, 1]")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1.0:
        raise SplitError("val_fraction + test_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    k = ds.n_classes
    y = ds.labels
    known = np.flatnonzero(ds.label_present)
    n_known = len(known)
    test_idx, rest = _stratified_take(known, y, round(test_fraction * n_known), rng, k)
    val_idx, rest = _stratified_take(rest, y, round(val_fraction * n_known), rng, k)
    unknown = np.flatnonzero(~ds.label_present)
    pool_size = len(rest) + len(unknown)
    n_l = round(label_fraction * pool_size)
    if n_l == 0:
        raise SplitError("label_fraction x pool size rounds to 0 labeled rows")
    if n_l > len(rest):
        raise SplitError(f"requested {n_l} labeled rows but only {len(rest)} pool rows carry labels")
    labeled_idx, rest = _stratified_take(rest, y, n_l, rng, k)
    if len(np.unique(y[labeled_idx])) < 2:
        raise SplitError("labeled set contains fewer than 2 classes")
    unlabeled_idx = np.sort(np.concatenate([rest, unknown]))

    noisy = y[labeled_idx].copy()
    n_noise = round(noise_fraction * n_l)
    if n_noise:
        flip = rng.choice(n_l, size=n_noise, replace=False)
        shift = rng.integers(1, k, size=n_noise)
        noisy[flip] = (noisy[flip] + shift) % k
    return SemiSplit(
        labeled_idx=labeled_idx,
        unlabeled_idx=unlabeled_idx,
        val_idx=val_idx,
        test_idx=test_idx,
        label_fraction=label_fraction,
        noise_fraction=noise_fraction,
        seed=seed,
        noisy_labels=noisy,
    )


def generate_synthetic(
    n_rows: int,
    m_cont: int,
    m_cat: int,
    k_classes: int,
    separation: float,
    seed: int,
) -> TabularDataset:
    """Class-conditional Gaussian / multinomial mixture.

    Class ``k`` shifts every continuous feature mean by ``separation * k``
    (classes sit ``separation`` apart per coordinate). Categorical columns
    alternate ordered/unordered with cardinality 3..8; their class-conditional
    logits are ``separation`` times a fixed random score table, so
    ``separation=0`` gives label-independent features.
    """
    if min(n_rows, m_cont, m_cat) < 1 or k_classes < 2:
        raise ValueError("counts must be >= 1 and k_classes >= 2")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, k_classes, size=n_rows)
    raw = rng.standard_normal((n_rows, m_cont)) + separation * y[:, None]
    cards = [3 + (j % 6) for j in range(m_cat)]
    cat = np.empty((n_rows, m_cat), dtype=np.int64)
    for j, n in enumerate(cards):
        scores = 0.5 * rng.standard_normal((k_classes, n))
        logits = separation * scores
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(n_rows)
        cat[:, j] = np.minimum((u[:, None] > np.cumsum(p[y], axis=1)).sum(axis=1), n - 1)
    cols = [ColumnSpec(f"x{j}", "continuous") for j in range(m_cont)]
    cols += [
        ColumnSpec(f"c{j}", "categorical", cardinality=n, ordered=j % 2 == 0, categories=tuple(f"v{i}" for i in range(n)))
        for j, n in enumerate(cards)
    ]
    schema = DatasetSchema(columns=tuple(cols), target="y", classes=tuple(str(c) for c in range(k_classes)))
    mean, std = _fit_standardizer(raw)
    return TabularDataset(
        schema=schema,
        cont=(raw - mean) / std,
        cat=cat,
        labels=y.astype(np.int64),
        label_present=np.ones(n_rows, dtype=bool),
        cont_mean=mean,
        cont_std=std,
    )
