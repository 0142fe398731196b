"""Soft/hard view construction for continuous tokens and categorical codes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

STRATEGIES = ("neighborhood", "permute", "random", "embed", "none")


@dataclass(frozen=True)
class ContinuousCorruptionCfg:
    lam: float = 0.8
    resample_permutation_each_batch: bool = True

    def __post_init__(self):
        if not 0.5 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0.5, 1], got {self.lam}")


@dataclass(frozen=True)
class CategoricalCorruptionCfg:
    gamma: float = 0.5
    strategy: str = "neighborhood"
    embed_noise_sigma: float = 0.1
    per_column_s: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown categorical strategy {self.strategy!r}")

    def neighborhood_sizes(self, cardinalities) -> np.ndarray:
        if self.per_column_s is not None:
            return np.asarray(self.per_column_s, dtype=np.int64)
        return np.array([min_neighborhood_size(int(n), self.gamma) for n in cardinalities], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class EmbedNoise:
    """Instruction for the encoder to perturb selected categorical tokens."""

    mask: np.ndarray  # B x M_cat, True where noise is added
    sigma: float
    seed: int

    def sample(self, d_emb: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        noise = rng.standard_normal(self.mask.shape + (d_emb,)) * self.sigma
        return noise * self.mask[..., None]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def permute_mix(tokens, lam: float, seed=None, sigma=None):
    """Mix per-variable token rows with a permuted copy of themselves.

    ``tokens`` has the variable axis second-to-last (``M x d`` or
    ``B x M x d``; numpy or torch). Returns ``(soft, hard, sigma)`` with
    ``soft = lam*X + (1-lam)*X[sigma]`` and ``hard = (1-lam)*X + lam*X[sigma]``;
    both views share one permutation.
    """
    if not 0.5 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0.5, 1], got {lam}")
    m = tokens.shape[-2]
    if m < 1:
        raise ValueError("need at least one continuous variable")
    if sigma is None:
        sigma = _rng(seed).permutation(m)
    permuted = tokens[..., sigma, :]
    soft = lam * tokens + (1.0 - lam) * permuted
    hard = (1.0 - lam) * tokens + lam * permuted
    return soft, hard, sigma


def min_neighborhood_size(n: int, gamma: float) -> int:
    """ceil(2n(1-gamma) - 1) clamped to the valid range [1, n-1]."""
    if n < 2:
        raise ValueError("need n >= 2 categories")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    # decimal reading of gamma: in floats 2*10*(1-0.9)-1 is 1.0000000000000004
    g = Fraction(repr(float(gamma)))
    raw = math.ceil(2 * n * (1 - g) - 1)
    return int(min(max(raw, 1), n - 1))


def corruption_probability(n: int, s: int) -> float:
    """Probability that neighborhood corruption moves a uniform category."""
    _check_ns(n, s)
    return 1.0 - (s + 1) / (2 * n)


def enumerate_corruption_probability(n: int, s: int) -> Fraction:
    """Exact shift probability by counting all (c, k) pairs."""
    _check_ns(n, s)
    shifted = 0
    for c in range(n):
        for k in range(-s, s + 1):
            if k != 0 and 0 <= c + k <= n - 1:
                shifted += 1
    return Fraction(shifted, n * 2 * s)


def _check_ns(n: int, s: int) -> None:
    if n < 2 or not 1 <= s <= n - 1:
        raise ValueError(f"need n >= 2 and 1 <= s <= n-1, got n={n}, s={s}")


def _neighborhood_shift(codes: np.ndarray, card: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = np.floor(rng.random(codes.shape) * (2 * s)).astype(np.int64)
    u = np.minimum(u, 2 * s - 1)
    k = np.where(u < s, u - s, u - s + 1)
    shifted = codes + k
    ok = (shifted >= 0) & (shifted <= card - 1)
    return np.where(ok, shifted, codes)


def corrupt_categorical(codes: np.ndarray, cardinalities, cfg: CategoricalCorruptionCfg, seed) -> tuple[np.ndarray, np.ndarray]:
    """Neighborhood corruption: soft view uses per-column ``s``, hard view ``s=1``.

    Each (row, column, view) draws its own offset from the nonzero integers
    in ``[-s, s]``; shifts leaving ``[0, n-1]`` fall back to the original code.
    """
    codes = np.asarray(codes, dtype=np.int64)
    card = np.asarray(cardinalities, dtype=np.int64)
    s = cfg.neighborhood_sizes(card)
    if s.shape != card.shape:
        raise ValueError("one neighborhood size per categorical column required")
    if ((s < 1) | (s > card - 1)).any():
        raise ValueError(f"neighborhood sizes {s.tolist()} outside [1, n-1] for cardinalities {card.tolist()}")
    rng_soft, rng_hard = _rng(seed).spawn(2)
    soft = _neighborhood_shift(codes, card, s, rng_soft)
    hard = _neighborhood_shift(codes, card, np.ones_like(s), rng_hard)
    return soft, hard


def corrupt_baseline(codes: np.ndarray, cardinalities, strategy: str, rate: float, seed, embed_noise_sigma: float = 0.1):
    """Alternative categorical corruptions. Returns ``(codes, embed_noise)``.

    ``embed_noise`` is an :class:`EmbedNoise` directive for ``"embed"`` and
    ``None`` otherwise.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    codes = np.asarray(codes, dtype=np.int64)
    card = np.asarray(cardinalities, dtype=np.int64)
    if strategy == "none":
        return codes.copy(), None
    if strategy == "neighborhood":
        raise ValueError("use corrupt_categorical for neighborhood corruption")
    rng = _rng(seed)
    selected = rng.random(codes.shape) < rate
    if strategy == "permute":
        shift = np.floor(rng.random(codes.shape) * (card - 1)).astype(np.int64) + 1
        return np.where(selected, (codes + shift) % card, codes), None
    if strategy == "random":
        b = codes.shape[0]
        if b < 2:
            return codes.copy(), None
        other = np.floor(rng.random(codes.shape) * (b - 1)).astype(np.int64)
        rows = np.arange(b)[:, None]
        other = other + (other >= rows)
        donor = np.take_along_axis(codes, other, axis=0)
        return np.where(selected, donor, codes), None
    if strategy == "embed":
        noise_seed = int(rng.integers(0, 2**63 - 1))
        return codes.copy(), EmbedNoise(mask=selected, sigma=embed_noise_sigma, seed=noise_seed)
    raise ValueError(f"unknown strategy {strategy!r}")


def categorical_views(codes: np.ndarray, cardinalities, cfg: CategoricalCorruptionCfg, seed):
    """Soft and hard categorical views for any strategy.

    Returns ``(soft_codes, hard_codes, soft_noise, hard_noise)``. Baseline
    strategies corrupt the soft view at rate ``gamma`` and the hard view at
    rate 1.
    """
    if cfg.strategy == "neighborhood":
        soft, hard = corrupt_categorical(codes, cardinalities, cfg, seed)
        return soft, hard, None, None
    r_soft, r_hard = _rng(seed).spawn(2)
    soft, n_soft = corrupt_baseline(codes, cardinalities, cfg.strategy, cfg.gamma, r_soft, cfg.embed_noise_sigma)
    hard, n_hard = corrupt_baseline(codes, cardinalities, cfg.strategy, 1.0, r_hard, cfg.embed_noise_sigma)
    return soft, hard, n_soft, n_hard
