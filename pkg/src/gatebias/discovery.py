"""Rank SAE features by how strongly they separate CALL from NO_CALL records.

Two scores are computed per feature: the mean activation gap between the
target and reference classes, and the directional AUROC (probability that a
random target record activates the feature more than a random reference
record). A feature set is the intersection of the top-R lists of both scores.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .dataset import ActivationDataset
from .errors import DataError


class Side(str, enum.Enum):
    CALL = "CALL"
    NO_CALL = "NO_CALL"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class FeatureScore:
    feature_id: int
    delta_ce: float
    auroc: float

    def __post_init__(self):
        if not 0.0 <= self.auroc <= 1.0:
            raise DataError(f"feature {self.feature_id}: AUROC {self.auroc} outside [0, 1]")


@dataclass(frozen=True)
class FeatureSet:
    side: Side
    scores: tuple[FeatureScore, ...]
    R: int
    n_features: int | None = None

    def __post_init__(self):
        ids = [s.feature_id for s in self.scores]
        if len(set(ids)) != len(ids):
            raise DataError("feature set ids must be unique")
        if self.n_features is not None and any(i < 0 or i >= self.n_features for i in ids):
            raise DataError(f"feature id outside [0, {self.n_features})")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.feature_id for s in self.scores)

    def __len__(self) -> int:
        return len(self.scores)

    def top(self, r: int) -> tuple[int, ...]:
        if r > len(self.scores):
            raise DataError(f"{self.side} basis has {len(self.scores)} features, fewer than r={r}")
        return self.ids[:r]

    def to_json(self) -> dict:
        return {
            "side": self.side.value,
            "R": self.R,
            "features": [{"id": s.feature_id, "delta_ce": s.delta_ce, "auroc": s.auroc} for s in self.scores],
        }

    @classmethod
    def from_json(cls, obj: dict, n_features: int | None = None) -> "FeatureSet":
        try:
            scores = tuple(FeatureScore(int(f["id"]), float(f["delta_ce"]), float(f["auroc"])) for f in obj["features"])
            return cls(Side(obj["side"]), scores, int(obj["R"]), n_features)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed feature report: {exc}") from exc


def _split_classes(activations, labels, target_side):
    Z = np.asarray(activations)
    call = np.asarray(labels).astype(bool)
    if Z.ndim != 2 or Z.shape[0] != call.shape[0]:
        raise DataError(f"activations {Z.shape} do not match {call.shape[0]} labels")
    target = call if Side(target_side) is Side.CALL else ~call
    if target.all() or not target.any():
        raise DataError("both D+ and D- must be nonempty")
    return Z, target


def mean_gap(activations, labels, target_side=Side.CALL) -> np.ndarray:
    """E_target[z_j] - E_reference[z_j]; ``labels`` is True on CALL-decision rows."""
    Z, target = _split_classes(activations, labels, target_side)
    Z = Z.astype(np.float64, copy=False)
    return Z[target].mean(axis=0) - Z[~target].mean(axis=0)


def directional_auroc(activations, labels, target_side=Side.CALL) -> np.ndarray:
    """P(z_j(target) > z_j(reference)) per feature, ties weighted 0.5, via rank sums."""
    Z, target = _split_classes(activations, labels, Side.CALL)
    n_pos = int(target.sum())
    n_neg = target.size - n_pos
    out = np.full(Z.shape[1], 0.5)
    # constant columns are all ties; skipping them saves most of the work on sparse codes
    live = np.flatnonzero(Z.max(axis=0) != Z.min(axis=0))
    for start in range(0, live.size, 256):
        cols = live[start:start + 256]
        ranks = rankdata(Z[:, cols], axis=0)
        u = ranks[target].sum(axis=0) - n_pos * (n_pos + 1) / 2.0
        out[cols] = u / (n_pos * n_neg)
    # the reference-side statistic is the complement, taken literally so the mirror is exact
    return out if Side(target_side) is Side.CALL else 1.0 - out


def _top(values: np.ndarray, R: int) -> np.ndarray:
    # stable sort on the negated score keeps lower ids first among ties
    return np.argsort(-values, kind="stable")[:R]


def rank_intersection(gaps, aurocs, R: int, side=Side.CALL) -> FeatureSet:
    gaps = np.asarray(gaps, dtype=np.float64)
    aurocs = np.asarray(aurocs, dtype=np.float64)
    if gaps.shape != aurocs.shape or gaps.ndim != 1:
        raise DataError("gaps and aurocs must be vectors of equal length")
    M = gaps.size
    if R < 1:
        raise DataError(f"R must be >= 1, got {R}")
    if R > M:
        raise DataError(f"R={R} exceeds the {M} available features")
    common = np.intersect1d(_top(gaps, R), _top(aurocs, R))
    if common.size == 0:
        warnings.warn(f"{Side(side).value}: top-{R} lists are disjoint; widen R", RuntimeWarning, stacklevel=2)
    order = np.lexsort((common, -gaps[common], -aurocs[common]))
    scores = tuple(FeatureScore(int(j), float(gaps[j]), float(aurocs[j])) for j in common[order])
    return FeatureSet(Side(side), scores, int(R), M)


def score_features(Z: np.ndarray, call: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CALL-side gaps and AUROCs; the NO_CALL side is their exact mirror."""
    return mean_gap(Z, call, Side.CALL), directional_auroc(Z, call, Side.CALL)


def discover(dataset: ActivationDataset, sae, R: int) -> tuple[FeatureSet, FeatureSet]:
    """CALL basis and NO_CALL basis from the D+/D- records of ``dataset``."""
    from .sae import encode_batched

    gating = dataset.gating()
    call = gating.call_mask
    if not call.any() or call.all():
        raise DataError("discovery needs nonempty D+ and D-")
    Z = encode_batched(sae, gating.H)
    gap, auc = score_features(Z, call)
    C = rank_intersection(gap, auc, R, Side.CALL)
    # swapping target and reference negates the gap and reflects the AUROC
    N = rank_intersection(-gap, 1.0 - auc, R, Side.NO_CALL)
    return C, N


def write_feature_csv(feature_set: FeatureSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["side", "rank", "feature_id", "delta_ce", "auroc"])
        for rank, s in enumerate(feature_set.scores, start=1):
            w.writerow([feature_set.side.value, rank, s.feature_id, repr(s.delta_ce), repr(s.auroc)])


def dictionary_pca(sae) -> np.ndarray:
    """Two principal-component coordinates per decoder column (M x 2)."""
    D = np.asarray(sae.W_dec, dtype=np.float64).T
    D = D - D.mean(axis=0)
    _, _, vt = np.linalg.svd(D, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the largest-magnitude loading of each component is positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    coords = D @ (comps * signs[:, None]).T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords
