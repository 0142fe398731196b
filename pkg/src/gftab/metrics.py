"""Macro-F1 and pairwise win matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def macro_f1(predictions, labels, k: int) -> float:
    """Unweighted mean of per-class F1 over all ``k`` classes.

    A class with precision + recall = 0 (including a class absent from both
    vectors) contributes 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or len(pred) == 0:
        raise ValueError("predictions and labels must be equal-length non-empty vectors")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= k or true.max() >= k:
        raise ValueError(f"class index outside [0, {k - 1}]")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(k), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(k), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    return float(f1.mean())


@dataclass(frozen=True, eq=False)
class WinMatrix:
    methods: tuple[str, ...]
    W: np.ndarray
    datasets: tuple[str, ...] = ()

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = (self.methods.index(m) for m in pair)
        return float(self.W[i, j])


def win_matrix_from_scores(scores: np.ndarray, methods: Sequence[str], datasets: Sequence[str] = ()) -> WinMatrix:
    """``scores`` is methods x datasets; entry (i, j) counts strict wins of i over j."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(methods):
        raise ValueError("scores must be (n_methods, n_datasets)")
    m = scores.shape[1]
    if m == 0:
        raise ValueError("no datasets to compare on")
    wins = (scores[:, None, :] > scores[None, :, :]).sum(axis=2)
    return WinMatrix(methods=tuple(methods), W=wins / m, datasets=tuple(datasets))
