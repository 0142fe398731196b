"""Semi-supervised optimisation of ``L_sim + beta * L_ce``."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .corruption import CategoricalCorruptionCfg, STRATEGIES, categorical_views, permute_mix
from .encoder import EncoderConfig, GFTabEncoder
from .geodesic import NORM_FLOOR, DegenerateSubspace, kernel_from_views
from .metrics import macro_f1
from .tabular import SemiSplit, TabularDataset
from .trees import GbdtConfig, GbdtModel, train_gbdt

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GFTAB-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    lam: float = 0.8
    gamma: float = 0.5
    batch_labeled: int = 64
    batch_unlabeled: int = 256
    lr: float = 2e-3
    weight_decay: float = 1e-4
    lr_step_epochs: int = 50
    lr_decay_factor: float = 0.5
    warmup_epochs: int = 0
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    disable_vsn: bool = False
    disable_tree: bool = False
    supervised_only: bool = False
    cat_strategy: str = "neighborhood"
    embed_noise_sigma: float = 0.1
    loss_variant: str = "gftab"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        # lam = 0.5 is allowed as the identity-view diagnostic (soft == hard)
        if not 0.5 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0.5, 1]")
        if self.cat_strategy not in STRATEGIES:
            raise ValueError(f"unknown cat_strategy {self.cat_strategy!r}")
        if self.loss_variant != "gftab":
            raise ValueError("only the 'gftab' similarity loss is implemented")
        if self.batch_unlabeled < self.encoder.D:
            raise ValueError("batch_unlabeled must be >= subspace dimension D")
        if min(self.batch_labeled, self.max_epochs, self.patience, self.lr_step_epochs) < 1 or self.warmup_epochs < 0:
            raise ValueError("batch sizes, epochs and patience must be positive")

    def categorical_cfg(self) -> CategoricalCorruptionCfg:
        return CategoricalCorruptionCfg(gamma=self.gamma, strategy=self.cat_strategy, embed_noise_sigma=self.embed_noise_sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "gbdt" in d:
            d["gbdt"] = GbdtConfig(**d["gbdt"])
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay every ``lr_step_epochs`` with optional linear warmup (0-based epoch)."""
    lr = cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)
    if cfg.warmup_epochs:
        lr *= min(1.0, (epoch + 1) / cfg.warmup_epochs)
    return lr


@dataclass
class Batch:
    x_cont: np.ndarray
    x_cat: np.ndarray
    leaf_ids: np.ndarray | None = None
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x_cont.shape[0]


def _take(ds: TabularDataset, idx, leaf_ids=None, y=None) -> Batch:
    return Batch(
        x_cont=ds.cont[idx],
        x_cat=ds.cat[idx],
        leaf_ids=None if leaf_ids is None else leaf_ids[idx],
        y=y,
    )


def gfk_similarity_torch(z_soft: torch.Tensor, z_hard: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Row-wise kernel cosine; rows with a vanishing kernel norm score 0."""
    # symmetrized so swapping the views is exact in floating point
    sh = 0.5 * (torch.einsum("bi,ij,bj->b", z_soft, A, z_hard) + torch.einsum("bi,ij,bj->b", z_hard, A, z_soft))
    ss = torch.einsum("bi,ij,bj->b", z_soft, A, z_soft).clamp_min(0.0)
    hh = torch.einsum("bi,ij,bj->b", z_hard, A, z_hard).clamp_min(0.0)
    ok = (ss > NORM_FLOOR**2) & (hh > NORM_FLOOR**2)
    denom = torch.sqrt(torch.where(ok, ss * hh, torch.ones_like(ss)))
    return torch.where(ok, sh / denom, torch.zeros_like(sh))


@dataclass
class StepResult:
    loss_total: float
    loss_sim: float
    loss_ce: float
    skipped: bool = False


class GFTabModel:
    """Encoder + frozen GBDT + optimiser, the unit that is trained and checkpointed."""

    def __init__(self, encoder: GFTabEncoder, gbdt: GbdtModel, cfg: TrainConfig):
        self.encoder = encoder
        self.gbdt = gbdt
        self.cfg = cfg
        # leaf rows are sparse lookups: decaying them would move rows no sample touched
        decay = [p for n, p in encoder.named_parameters() if n != "leaf_table"]
        groups = [{"params": decay, "weight_decay": cfg.weight_decay}]
        groups.append({"params": [encoder.leaf_table], "weight_decay": 0.0})
        self.optimizer = torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)

    @classmethod
    def build(cls, ds: TabularDataset, gbdt: GbdtModel, cfg: TrainConfig, use_tree: bool | None = None) -> "GFTabModel":
        torch.manual_seed(cfg.seed)
        enc = GFTabEncoder(
            cfg.encoder,
            m_cont=ds.m_cont,
            cardinalities=ds.schema.cardinalities,
            n_classes=ds.n_classes,
            n_leaves=gbdt.n_leaves,
            use_vsn=not cfg.disable_vsn,
        )
        return cls(enc, gbdt, cfg)

    @property
    def use_tree(self) -> bool:
        return self.gbdt.n_trees > 0

    def tree_features(self, ds: TabularDataset, idx=slice(None)) -> np.ndarray:
        return np.hstack([ds.cont[idx], ds.cat[idx].astype(np.float64)])

    def labeled_tokens(self, batch: Batch) -> torch.Tensor:
        tokens = self.encoder.column_tokens(torch.from_numpy(np.ascontiguousarray(batch.x_cont)), batch.x_cat)
        if self.use_tree and batch.leaf_ids is not None:
            tokens = torch.cat([tokens, self.encoder.tree_tokens(batch.leaf_ids)], dim=-2)
        return tokens

    def logits(self, batch: Batch) -> torch.Tensor:
        return self.encoder.classify(self.labeled_tokens(batch))

    def predict(self, ds: TabularDataset, idx) -> np.ndarray:
        idx = np.asarray(idx)
        leaf = self.gbdt.apply(self.tree_features(ds, idx)) if self.use_tree else None
        batch = Batch(ds.cont[idx], ds.cat[idx], leaf)
        with torch.no_grad():
            return self.logits(batch).argmax(dim=-1).numpy()

    def views(self, batch: Batch, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Soft and hard token sequences for an unlabeled batch."""
        cfg = self.cfg
        parts_soft, parts_hard = [], []
        if batch.x_cont.shape[1]:
            tokens, _ = self.encoder.continuous_tokens(torch.from_numpy(np.ascontiguousarray(batch.x_cont)))
            soft, hard, _ = permute_mix(tokens, cfg.lam, seed=rng)
            parts_soft.append(soft)
            parts_hard.append(hard)
        if batch.x_cat.shape[1]:
            cs, ch, ns, nh = categorical_views(batch.x_cat, self.encoder.cardinalities, cfg.categorical_cfg(), rng)
            parts_soft.append(self.encoder.categorical_tokens(cs, ns))
            parts_hard.append(self.encoder.categorical_tokens(ch, nh))
        return torch.cat(parts_soft, dim=-2), torch.cat(parts_hard, dim=-2)

    def losses(self, labeled: Batch | None, unlabeled: Batch | None, rng: np.random.Generator):
        """``(total, sim, ce)`` tensors; raises DegenerateSubspace on rank-deficient views."""
        zero = torch.zeros((), dtype=torch.float64)
        loss_sim = zero
        if unlabeled is not None and len(unlabeled):
            t_soft, t_hard = self.views(unlabeled, rng)
            z_soft = self.encoder.encode_view(t_soft)
            z_hard = self.encoder.encode_view(t_hard)
            kernel = kernel_from_views(z_soft.detach().numpy(), z_hard.detach().numpy(), self.cfg.encoder.D)
            A = torch.from_numpy(kernel.A)
            loss_sim = (1.0 - gfk_similarity_torch(z_soft, z_hard, A)).mean()
        loss_ce = zero
        if labeled is not None and len(labeled):
            loss_ce = F.cross_entropy(self.logits(labeled), torch.as_tensor(labeled.y, dtype=torch.long))
        return loss_sim + self.cfg.beta * loss_ce, loss_sim, loss_ce

    def train_step(self, labeled: Batch | None, unlabeled: Batch | None, rng: np.random.Generator, lr: float | None = None) -> StepResult:
        """One joint update on both loss terms."""
        if lr is not None:
            for g in self.optimizer.param_groups:
                g["lr"] = lr
        self.encoder.train()
        self.optimizer.zero_grad(set_to_none=False)
        try:
            total, sim, ce = self.losses(labeled, unlabeled, rng)
        except DegenerateSubspace as e:
            log.warning("skipping step: %s", e)
            return StepResult(math.nan, math.nan, math.nan, skipped=True)
        total.backward()
        self.optimizer.step()
        return StepResult(total.item(), sim.item(), ce.item())

    # -- checkpoint payload -------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v.detach().numpy() for k, v in self.encoder.state_dict().items()}
        state = self.optimizer.state_dict()
        for pid, st in state["state"].items():
            for k, v in st.items():
                out[f"optim/{pid}/{k}"] = torch.as_tensor(v).detach().numpy()
        for k, v in self.gbdt.to_arrays().items():
            out[f"gbdt/{k}"] = v
        return out

    def optimizer_groups(self) -> list[dict]:
        return self.optimizer.state_dict()["param_groups"]

    def load_arrays(self, arrays: dict[str, np.ndarray], groups: list[dict]) -> None:
        sd = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
        self.encoder.load_state_dict(sd)
        st: dict = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, pid, name = k.split("/", 2)
                st.setdefault(int(pid), {})[name] = torch.from_numpy(v.copy())
        self.optimizer.load_state_dict({"state": st, "param_groups": copy.deepcopy(groups)})


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def unlabeled_batch_indices(pool: np.ndarray, batch: int, global_step: int, seed: int) -> np.ndarray:
    """Batch ``global_step`` of the unlabeled pool cycled through fresh permutations."""
    n = len(pool)
    if n == 0:
        return pool[:0]
    b = min(batch, n)
    start = global_step * b
    out = []
    while len(out) < b:
        cycle, offset = divmod(start, n)
        perm = _stream(seed, 1, cycle).permutation(n)
        take = perm[offset : offset + b - len(out)]
        out.extend(pool[take].tolist())
        start += len(take)
    return np.array(out, dtype=np.int64)


@dataclass
class FitState:
    epoch: int = 0  # epochs completed
    best_f1: float = -1.0
    best_epoch: int = 0
    since_best: int = 0
    best_params: dict | None = None
    history: list[dict] = field(default_factory=list)
    stopped: bool = False


@dataclass
class FitResult:
    model: GFTabModel
    history: list[dict]
    best_epoch: int
    best_f1: float
    dataset: TabularDataset


def prepare(ds: TabularDataset, split: SemiSplit, cfg: TrainConfig) -> tuple[TabularDataset, GbdtModel]:
    """Standardize on the train pool and fit the (frozen) GBDT on labeled rows."""
    ds = ds.restandardize(split.pool_idx)
    X = np.hstack([ds.cont, ds.cat.astype(np.float64)])
    gcfg = replace(cfg.gbdt, n_trees=0) if cfg.disable_tree else cfg.gbdt
    gbdt = train_gbdt(X[split.labeled_idx], split.noisy_labels, gcfg, n_classes=ds.n_classes)
    return ds, gbdt


def fit(
    ds: TabularDataset,
    split: SemiSplit,
    cfg: TrainConfig,
    *,
    history_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> FitResult:
    """Train with early stopping on validation macro-F1; returns the best-epoch model.

    With ``checkpoint_dir`` set, ``last.ckpt`` is written after every epoch
    and ``best.ckpt`` whenever validation F1 improves. ``resume`` continues
    from a ``last.ckpt`` and reproduces the uninterrupted run exactly.
    """
    if len(split.val_idx) == 0:
        raise ValueError("fit needs a validation set")
    if resume is not None:
        model, state, ds = load_checkpoint(resume, ds=ds, split=split)
        if model.cfg.to_dict() != replace(cfg, max_epochs=model.cfg.max_epochs).to_dict():
            raise CheckpointError("checkpoint was trained with a different configuration")
        model.cfg = cfg
    else:
        ds, gbdt = prepare(ds, split, cfg)
        model = GFTabModel.build(ds, gbdt, cfg)
        state = FitState()

    leaf_ids = model.gbdt.apply(model.tree_features(ds)) if model.use_tree else None
    lab = split.labeled_idx
    noisy = split.noisy_labels
    pool_u = np.array([], dtype=np.int64) if cfg.supervised_only else split.unlabeled_idx
    steps_per_epoch = math.ceil(len(lab) / cfg.batch_labeled)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if history_path is not None:
        Path(history_path).write_text("".join(json.dumps(h) + "\n" for h in state.history))

    while not state.stopped and state.epoch < cfg.max_epochs:
        e = state.epoch
        lr = learning_rate(cfg, e)
        order = _stream(cfg.seed, 0, e).permutation(len(lab))
        sums = np.zeros(3)
        done = 0
        for t in range(steps_per_epoch):
            sel = order[t * cfg.batch_labeled : (t + 1) * cfg.batch_labeled]
            lb = _take(ds, lab[sel], leaf_ids, noisy[sel])
            ub = None
            if len(pool_u):
                ub = _take(ds, unlabeled_batch_indices(pool_u, cfg.batch_unlabeled, e * steps_per_epoch + t, cfg.seed))
            res = model.train_step(lb, ub, _stream(cfg.seed, 2, e, t), lr=lr)
            if not res.skipped:
                sums += (res.loss_sim, res.loss_ce, res.loss_total)
                done += 1
        model.encoder.eval()
        val_pred = model.predict(ds, split.val_idx)
        val_f1 = macro_f1(val_pred, ds.labels[split.val_idx], ds.n_classes)
        mean = sums / done if done else np.full(3, np.nan)
        rec = {
            "epoch": e + 1,
            "loss_sim": float(mean[0]),
            "loss_ce": float(mean[1]),
            "loss_total": float(mean[2]),
            "val_f1": float(val_f1),
            "lr": lr,
        }
        state.history.append(rec)
        state.epoch = e + 1
        if val_f1 > state.best_f1:
            state.best_f1 = float(val_f1)
            state.best_epoch = e + 1
            state.since_best = 0
            state.best_params = {k: v.clone() for k, v in model.encoder.state_dict().items()}
            if ckpt_dir is not None:
                save_checkpoint(model, state, ckpt_dir / "best.ckpt", ds)
        else:
            state.since_best += 1
            if state.since_best >= cfg.patience:
                state.stopped = True
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if ckpt_dir is not None:
            save_checkpoint(model, state, ckpt_dir / "last.ckpt", ds)
        log.info("epoch %d sim=%.4f ce=%.4f val_f1=%.4f", e + 1, mean[0], mean[1], val_f1)

    if state.best_params is not None:
        model.encoder.load_state_dict(state.best_params)
    model.encoder.eval()
    return FitResult(model=model, history=state.history, best_epoch=state.best_epoch, best_f1=state.best_f1, dataset=ds)


# -- checkpoint file -------------------------------------------------------
#
# Layout: MAGIC, 8-byte little-endian header length, UTF-8 JSON header,
# then raw C-order little-endian array bytes in header order. The header
# lists {name, dtype, shape, offset, nbytes} per array plus "meta".


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, offset, blobs = [], 0, []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "entries": entries, "meta": meta, "data_bytes": offset}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    hlen = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: truncated or corrupt header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    pos += hlen
    if len(data) - pos != header["data_bytes"]:
        raise CheckpointError(f"{path}: truncated data ({len(data) - pos} of {header['data_bytes']} bytes)")
    arrays = {}
    for ent in header["entries"]:
        start = pos + ent["offset"]
        buf = data[start : start + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return arrays, header["meta"]


def save_checkpoint(model: GFTabModel, state: FitState, path: str | Path, ds: TabularDataset | None = None) -> None:
    arrays = model.arrays()
    if state.best_params is not None:
        arrays.update({f"best/{k}": v.numpy() for k, v in state.best_params.items()})
    if ds is not None:
        arrays["data/cont_mean"] = ds.cont_mean
        arrays["data/cont_std"] = ds.cont_std
    enc = model.encoder
    meta = {
        "config": model.cfg.to_dict(),
        "encoder": {
            "m_cont": enc.m_cont,
            "cardinalities": enc.cardinalities,
            "n_classes": enc.n_classes,
            "n_leaves": enc.n_leaves,
            "use_vsn": enc.vsn.enabled,
        },
        "optimizer_groups": model.optimizer_groups(),
        "epoch": state.epoch,
        "best_f1": state.best_f1,
        "best_epoch": state.best_epoch,
        "since_best": state.since_best,
        "stopped": state.stopped,
        "history": state.history,
        "rng": {"seed": model.cfg.seed, "next_epoch": state.epoch},
    }
    write_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path, ds: TabularDataset | None = None, split: SemiSplit | None = None):
    """Rebuild ``(model, state, ds)``. ``ds`` is re-standardized with the saved statistics."""
    arrays, meta = read_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    em = meta["encoder"]
    enc = GFTabEncoder(
        cfg.encoder,
        m_cont=em["m_cont"],
        cardinalities=em["cardinalities"],
        n_classes=em["n_classes"],
        n_leaves=em["n_leaves"],
        use_vsn=em["use_vsn"],
    )
    gbdt = GbdtModel.from_arrays({k[len("gbdt/"):]: v for k, v in arrays.items() if k.startswith("gbdt/")})
    model = GFTabModel(enc, gbdt, cfg)
    model.load_arrays(arrays, meta["optimizer_groups"])
    best = {k[len("best/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best/")}
    state = FitState(
        epoch=meta["epoch"],
        best_f1=meta["best_f1"],
        best_epoch=meta["best_epoch"],
        since_best=meta["since_best"],
        best_params=best or None,
        history=meta["history"],
        stopped=meta["stopped"],
    )
    if ds is not None and "data/cont_mean" in arrays:
        raw = ds.cont * ds.cont_std + ds.cont_mean
        mean, std = arrays["data/cont_mean"], arrays["data/cont_std"]
        ds = replace(ds, cont=(raw - mean) / std, cont_mean=mean, cont_std=std)
    return model, state, ds
