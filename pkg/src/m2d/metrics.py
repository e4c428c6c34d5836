"""Evaluation metrics over the retrieval embedding space.

FID between Gaussian fits, R-Precision Top1/2/3 against sampled text
pools, multimodal distance, diversity over random disjoint pairs, and
multimodality across repeated generations per caption. All functions are
pure and reproducible under a fixed rng.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import M2dError, ShapeError


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, d)
    source: str = "real"

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"feature set must be (N, d), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise M2dError(f"feature set {self.source!r} has non-finite rows")
        object.__setattr__(self, "features", arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class EmbeddingPair:
    motion_feat: np.ndarray
    text_feat: np.ndarray
    pair_id: str = ""

    def __post_init__(self):
        m = np.asarray(self.motion_feat, dtype=np.float64)
        t = np.asarray(self.text_feat, dtype=np.float64)
        for name, v in (("motion_feat", m), ("text_feat", t)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-3:
                raise M2dError(f"{name} of pair {self.pair_id!r} is not unit-norm")
        object.__setattr__(self, "motion_feat", m)
        object.__setattr__(self, "text_feat", t)


def matrix_sqrt_psd(m: np.ndarray, sym_tol: float = 1e-8, eig_floor: float = -1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [eig_floor, 0) are clamped to zero; anything below
    eig_floor means the input is not PSD and raises.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix_sqrt_psd needs a square matrix, got {m.shape}")
    asym = np.abs(m - m.T).max()
    if asym > sym_tol:
        raise M2dError(f"matrix_sqrt_psd: input asymmetric by {asym:.3e} (tol {sym_tol:.0e})")
    eigvals, eigvecs = np.linalg.eigh((m + m.T) / 2.0)
    if eigvals.min() < eig_floor:
        raise M2dError(f"matrix_sqrt_psd: eigenvalue {eigvals.min():.3e} below {eig_floor:.0e}")
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    s = (eigvecs * root) @ eigvecs.T
    return (s + s.T) / 2.0


def _gaussian_fit(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    mu = fs.features.mean(axis=0)
    sigma = np.cov(fs.features, rowvar=False)  # unbiased (N-1)
    return mu, np.atleast_2d(sigma)


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    The cross term Tr((S1 S2)^(1/2)) is reduced to the PSD problem
    Tr((sqrt(S1) S2 sqrt(S1))^(1/2)).
    """
    if real.n < 2 or gen.n < 2:
        raise M2dError(f"fid needs N >= 2 on both sides, got {real.n} and {gen.n}")
    if real.dim != gen.dim:
        raise ShapeError(f"feature dims differ: {real.dim} vs {gen.dim}")
    mu1, s1 = _gaussian_fit(real)
    mu2, s2 = _gaussian_fit(gen)
    root1 = matrix_sqrt_psd(s1)
    inner = root1 @ s2 @ root1
    tr_cross = np.trace(matrix_sqrt_psd((inner + inner.T) / 2.0))
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid_diagonal_reference(mu1, d1, mu2, d2) -> float:
    """Closed form for diagonal covariances: sum((dmu)^2 + (sqrt(v1)-sqrt(v2))^2)."""
    mu1, d1, mu2, d2 = map(np.asarray, (mu1, d1, mu2, d2))
    return float(np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(d1) - np.sqrt(d2)) ** 2))


def r_precision(pairs: Sequence[EmbeddingPair], pool_size: int = 32,
                rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """Top-1/2/3 retrieval accuracy against pools of mismatched texts.

    Each motion competes its true text against pool_size - 1 distinct
    other pairs' texts, ranked by Euclidean distance; ties do not demote
    the true text.
    """
    rng = rng or np.random.default_rng(0)
    n = len(pairs)
    if n < pool_size:
        raise M2dError(f"r_precision needs at least pool_size={pool_size} pairs, got {n}")
    motions = np.stack([p.motion_feat for p in pairs])
    texts = np.stack([p.text_feat for p in pairs])
    hits = np.zeros(3)
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)  # skip the true pair's own index
        d_true = float(np.linalg.norm(motions[i] - texts[i]))
        d_others = np.linalg.norm(texts[others] - motions[i], axis=1)
        rank = 1 + int(np.sum(d_others < d_true))
        for k in range(3):
            hits[k] += rank <= k + 1
    top1, top2, top3 = (hits / n).tolist()
    return top1, top2, top3


def mm_dist(pairs: Sequence[EmbeddingPair]) -> float:
    """Mean Euclidean distance between matched motion and text features."""
    if not pairs:
        raise M2dError("mm_dist needs at least one pair")
    return float(np.mean([np.linalg.norm(p.motion_feat - p.text_feat) for p in pairs]))


def diversity_needs_replacement(n: int, n_pairs: int) -> bool:
    return n < 2 * n_pairs


def diversity(features: FeatureSet, n_pairs: int = 100,
              rng: np.random.Generator | None = None) -> float:
    """Mean distance over n_pairs random pairs, disjoint when N allows.

    With fewer than 2 * n_pairs rows, pair members are drawn with
    replacement (self-pairs excluded); surface that via
    ``diversity_needs_replacement`` in any report.
    """
    rng = rng or np.random.default_rng(0)
    x = features.features
    if features.n < 2:
        raise M2dError(f"diversity needs N >= 2, got {features.n}")
    if diversity_needs_replacement(features.n, n_pairs):
        a = rng.integers(0, features.n, size=n_pairs)
        b = rng.integers(0, features.n, size=n_pairs)
        for i in range(n_pairs):
            while b[i] == a[i]:
                b[i] = rng.integers(0, features.n)
    else:
        perm = rng.permutation(features.n)[: 2 * n_pairs]
        a, b = perm[:n_pairs], perm[n_pairs:]
    return float(np.linalg.norm(x[a] - x[b], axis=1).mean())


def multimodality(
    generate_fn: Callable[[str, int], object],
    embed_fn: Callable[[object], np.ndarray],
    texts: Sequence[str],
    per_text: int = 20,
    n_pairs_per_text: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean pairwise feature distance among repeated generations per text."""
    if per_text < 2:
        raise M2dError("multimodality needs per_text >= 2")
    if not texts:
        raise M2dError("multimodality needs at least one text")
    rng = rng or np.random.default_rng(0)
    per_text_means = []
    for text in texts:
        seeds = rng.integers(0, 2**63 - 1, size=per_text)
        feats = np.stack([embed_fn(generate_fn(text, int(seed))) for seed in seeds])
        dists = []
        for _ in range(n_pairs_per_text):
            i, j = rng.choice(per_text, size=2, replace=False)
            dists.append(np.linalg.norm(feats[i] - feats[j]))
        per_text_means.append(np.mean(dists))
    return float(np.mean(per_text_means))


@dataclass
class MetricReport:
    fid: float | None = None
    r_top1: float | None = None
    r_top2: float | None = None
    r_top3: float | None = None
    mm_dist: float | None = None
    diversity: float | None = None
    multimodality: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("r_top1", "r_top2", "r_top3"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise M2dError(f"{name}={v} outside [0, 1]")
        for name in ("fid", "mm_dist", "diversity", "multimodality"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise M2dError(f"{name}={v} must be finite and >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
