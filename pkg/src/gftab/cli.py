"""``gftab`` command line.

Exit codes: 0 ok, 1 check failure or runtime error, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import harness, plotting
from .corruption import enumerate_corruption_probability, min_neighborhood_size
from .metrics import macro_f1
from .tabular import DatasetSchema, SemiSplit, TabularDataset, generate_synthetic, ingest, make_split, write_csv
from .trainer import fit, load_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class StageError(Exception):
    def __init__(self, stage: str, err: BaseException, code: int):
        super().__init__(f"{stage}: {err}")
        self.code = code


def out_root() -> Path:
    return Path(os.environ.get(config_mod.ENV_OUT_ROOT, "runs"))


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, KeyError, FileNotFoundError) as e:
        raise StageError(stage, e, EXIT_USAGE) from e
    except Exception as e:  # noqa: BLE001 - surfaced with the stage name
        raise StageError(stage, e, EXIT_CHECK) from e


def _load_dataset(path: str, schema: str | None, cfg: config_mod.CliConfig) -> TabularDataset:
    p = Path(path)
    if p.suffix == ".csv":
        if schema is None:
            raise ValueError("--schema is required with a CSV --data file")
        return ingest(p, DatasetSchema.load(schema), cfg.data.missing_threshold, cfg.data.na_values)
    return TabularDataset.load(p)


def save_split(split: SemiSplit, path: Path) -> None:
    np.savez(
        path,
        labeled_idx=split.labeled_idx,
        unlabeled_idx=split.unlabeled_idx,
        val_idx=split.val_idx,
        test_idx=split.test_idx,
        noisy_labels=split.noisy_labels,
        params=np.array([split.label_fraction, split.noise_fraction, split.seed], dtype=np.float64),
    )


def load_split(path: Path) -> SemiSplit:
    with np.load(path) as z:
        rho, eta, seed = z["params"]
        return SemiSplit(
            labeled_idx=z["labeled_idx"],
            unlabeled_idx=z["unlabeled_idx"],
            val_idx=z["val_idx"],
            test_idx=z["test_idx"],
            label_fraction=float(rho),
            noise_fraction=float(eta),
            seed=int(seed),
            noisy_labels=z["noisy_labels"],
        )


# -- commands --------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = _stage("config", config_mod.load, args.config)
    schema = _stage("schema", DatasetSchema.load, args.schema)
    ds = _stage("ingest", ingest, args.csv, schema, cfg.data.missing_threshold, cfg.data.na_values)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    rep = ds.report
    print(f"N={ds.n_rows} M_cont={ds.m_cont} M_cat={ds.m_cat} K={ds.n_classes}")
    print("missing rates:")
    for name, rate in rep["missing_rates"].items():
        print(f"  {name}: {rate:.4f}")
    print("dropped:" + ("" if rep["dropped"] else " none"))
    for name, why in rep["dropped"].items():
        print(f"  {name}: {why}")
    print(f"wrote {out}")
    return EXIT_OK


def parse_gamma_grid(text: str | None) -> list[Fraction]:
    if not text:
        return [Fraction(i, 100) for i in range(1, 100)]
    if ":" in text:
        lo, hi, step = (Fraction(x) for x in text.split(":"))
        out, g = [], lo
        while g <= hi:
            out.append(g)
            g += step
        return out
    return [Fraction(x) for x in text.split(",")]


def corruption_audit(n_max: int, gammas: list[Fraction], out=sys.stdout) -> int:
    """Compare the enumerated shift probability with its closed form, then
    check that ceil(2n(1-gamma)-1) is exactly where p(s) <= gamma begins."""
    mismatches = 0
    p: dict[tuple[int, int], Fraction] = {}
    print("# n s p_enumerated p_closed_form", file=out)
    for n in range(2, n_max + 1):
        for s in range(1, n):
            exact = enumerate_corruption_probability(n, s)
            closed = 1 - Fraction(s + 1, 2 * n)
            p[n, s] = exact
            ok = exact == closed
            mismatches += not ok
            print(f"{n} {s} {exact} {closed}{'' if ok else '  MISMATCH'}", file=out)
    print("# gamma n s_threshold s_used p(s_used)", file=out)
    for g in gammas:
        if not 0 < g < 1:
            raise ValueError(f"gamma {g} outside (0, 1)")
        for n in range(2, n_max + 1):
            raw = math.ceil(2 * n * (1 - g) - 1)
            ok = all((p[n, s] <= g) == (s >= raw) for s in range(1, n))
            used = min_neighborhood_size(n, float(g))
            ok &= used == min(max(raw, 1), n - 1)
            mismatches += not ok
            print(f"{float(g):g} {n} {raw} {used} {p[n, used]}{'' if ok else '  MISMATCH'}", file=out)
    return mismatches


def cmd_corrupt_audit(args) -> int:
    gammas = _stage("gamma-grid", parse_gamma_grid, args.gamma_grid)
    if args.n_max < 2:
        raise StageError("corrupt-audit", ValueError("--n-max must be >= 2"), EXIT_USAGE)
    sink = open(os.devnull, "w") if args.quiet else sys.stdout
    try:
        bad = _stage("corrupt-audit", corruption_audit, args.n_max, gammas, sink)
    finally:
        if args.quiet:
            sink.close()
    if bad:
        print(f"FAIL: {bad} mismatches")
        return EXIT_CHECK
    print("OK: 0 mismatches")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _stage("config", config_mod.load, args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    ds = _stage("data", _load_dataset, args.data, args.schema, cfg)
    out = Path(args.out) if args.out else out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.yaml")
    s = cfg.split
    split = _stage("split", make_split, ds, s.label_fraction, s.noise_fraction, s.val_fraction, s.test_fraction, cfg.train.seed)
    save_split(split, out / "split.npz")
    resume = out / "last.ckpt" if args.resume else None
    if resume is not None and not resume.exists():
        raise StageError("train", FileNotFoundError(f"{resume} not found"), EXIT_USAGE)
    res = _stage("train", fit, ds, split, cfg.train, history_path=out / "history.jsonl", checkpoint_dir=out, resume=resume)
    if res.history:
        plotting.history_figure(res.history, out / "history.png")
    print(f"epochs={len(res.history)} best_epoch={res.best_epoch} best_val_f1={res.best_f1:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    split_path = Path(args.split_file) if args.split_file else ckpt.parent / "split.npz"
    cfg = config_mod.CliConfig()
    ds = _stage("data", _load_dataset, args.data, args.schema, cfg)
    split = _stage("split", load_split, split_path)
    model, state, ds = _stage("checkpoint", load_checkpoint, ckpt, ds, split)
    if state.best_params is not None:
        model.encoder.load_state_dict(state.best_params)
    model.encoder.eval()
    idx = {
        "val": split.val_idx,
        "test": split.test_idx,
        "labeled": split.labeled_idx,
        "pool": split.pool_idx,
    }[args.split]
    idx = idx[ds.label_present[idx]]
    if len(idx) == 0:
        raise StageError("eval", ValueError(f"split {args.split!r} has no labeled rows"), EXIT_USAGE)
    pred = model.predict(ds, idx)
    f1 = macro_f1(pred, ds.labels[idx], ds.n_classes)
    print(f"split={args.split} n={len(idx)} macro_f1={f1:.4f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _stage("config", config_mod.load, args.config)
    g = cfg.grid
    base = Path(args.config).parent if args.config else Path(".")
    if not g.datasets:
        raise StageError("grid", ValueError("grid.datasets is empty"), EXIT_USAGE)
    datasets = {Path(p).stem: (base / p) for p in g.datasets}
    seeds = (args.seed,) if args.seed is not None else g.seeds
    store = Path(args.store) if args.store else (out_root() / g.store)
    s = cfg.split
    st = _stage(
        "grid",
        harness.run_experiment,
        datasets,
        g.methods,
        g.settings,
        seeds,
        store,
        cfg.train,
        s.val_fraction,
        s.test_fraction,
    )
    cfg.dump(store.with_name(store.stem + ".config.yaml"))
    print(f"{len(st.records())} records in {store}")
    return EXIT_OK


def cmd_report(args) -> int:
    store = harness.ResultsStore(args.store)
    if not store.path.exists():
        raise StageError("report", FileNotFoundError(f"{store.path} not found"), EXIT_USAGE)
    records = _stage("report", store.records)
    text = _stage("report", harness.report, records, args.format)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(harness.report(records, "csv"))
        (out / "report.txt").write_text(harness.report(records, "table"))
        _, wins = harness.summarize(records)
        for p in plotting.win_matrix_figures(wins, out):
            print(f"wrote {p}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = _stage(
        "synth",
        generate_synthetic,
        args.n_rows,
        args.m_cont,
        args.m_cat,
        args.k,
        args.separation,
        args.seed if args.seed is not None else 0,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    if args.csv:
        write_csv(ds, out.with_suffix(".csv"))
        ds.schema.dump(out.with_suffix(".schema.yaml"))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gftab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV + schema -> canonical dataset file")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("corrupt-audit", help="exact check of the categorical corruption rate")
    p.add_argument("--n-max", type=int, default=64)
    p.add_argument("--gamma-grid", help="comma list or lo:hi:step (default 0.01:0.99:0.01)")
    p.add_argument("--quiet", action="store_true", help="print only the verdict")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_corrupt_audit)

    p = sub.add_parser("train", help="fit one model")
    p.add_argument("--data", required=True, help="canonical dataset (.npz) or CSV with --schema")
    p.add_argument("--schema")
    p.add_argument("--config")
    p.add_argument("--out", help=f"output directory (default ${config_mod.ENV_OUT_ROOT}/train)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="macro-F1 of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--split", choices=("val", "test", "labeled", "pool"), default="test")
    p.add_argument("--split-file", help="default: split.npz next to the checkpoint")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an experiment grid into a results store")
    p.add_argument("--config", required=True)
    p.add_argument("--store", help=f"results store (default ${config_mod.ENV_OUT_ROOT}/<grid.store>)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="tables, CSV and win-matrix figures from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--out-dir", help="also write report.csv, report.txt and figures here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the synthetic fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-rows", type=int, default=2000)
    p.add_argument("--m-cont", type=int, default=4)
    p.add_argument("--m-cat", type=int, default=4)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--csv", action="store_true", help="also write CSV and schema")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"error [{e}]", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
