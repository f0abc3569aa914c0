"""Logistic probes on SAE features and raw residuals, scored by cross-validated AUROC."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .dataset import ActivationDataset
from .errors import DataError

RAW = "RAW"


class InputKind(str, enum.Enum):
    DISCOVERED = "DISCOVERED"
    RANDOM = "RANDOM"
    RAW = "RAW"


@dataclass
class ProbeModel:
    w: np.ndarray
    b: float
    l2: float
    feature_ids: tuple[int, ...] | str = RAW
    converged: bool = True
    n_iter: int = 0
    objective: float = float("nan")
    trace: tuple[float, ...] = ()

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.w.shape[0]:
            raise DataError(f"probe expects {self.w.shape[0]} inputs, got {X.shape[-1]}")
        return X @ self.w + self.b

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))


def auroc(scores, y) -> float:
    """Mann-Whitney AUROC of ``scores`` for positives ``y == 1``; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(y).astype(bool).ravel()
    if scores.shape != y.shape:
        raise DataError(f"{scores.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _objective(Xa, y, theta, l2):
    eta = Xa @ theta
    # mean of softplus(eta) - y*eta, written with log_expit for stability
    nll = -np.mean(y * log_expit(eta) + (1.0 - y) * log_expit(-eta))
    return nll + 0.5 * l2 * float(theta[:-1] @ theta[:-1])


def fit_logistic(X, y, l2: float | None = None, tol: float = 1e-8, max_iter: int = 100) -> ProbeModel:
    """L2-penalised logistic regression by damped Newton iterations.

    Minimises ``mean(log(1 + exp(eta)) - y * eta) + l2/2 * ||w||^2`` with an
    unpenalised intercept. Converged when the gradient's max-norm drops below
    ``tol``; otherwise the best iterate is returned with ``converged=False``.
    ``l2`` defaults to ``1/n``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(np.float64).ravel()
    n, p = X.shape
    if y.shape[0] != n:
        raise DataError(f"{n} rows but {y.shape[0]} labels")
    if n < 2:
        raise DataError("logistic fit needs at least two examples")
    if y.min() == y.max():
        raise DataError("logistic fit needs both classes present")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be binary")
    l2 = 1.0 / n if l2 is None else float(l2)
    if l2 < 0:
        raise DataError(f"l2 must be >= 0, got {l2}")

    Xa = np.hstack([X, np.ones((n, 1))])
    penalty = np.full(p + 1, l2)
    penalty[-1] = 0.0
    theta = np.zeros(p + 1)
    theta[-1] = np.log(y.mean() / (1.0 - y.mean()))
    f = _objective(Xa, y, theta, l2)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(Xa @ theta)
        grad = Xa.T @ (mu - y) / n + penalty * theta
        if np.max(np.abs(grad)) < tol:
            converged = True
            it -= 1
            break
        wts = mu * (1.0 - mu)
        hess = (Xa * wts[:, None]).T @ Xa / n + np.diag(penalty)
        try:
            if np.linalg.cond(hess) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(hess + 1e-8 * np.eye(p + 1), grad)
        t = 1.0
        slope = float(grad @ step)
        while True:
            cand = theta - t * step
            f_new = _objective(Xa, y, cand, l2)
            if f_new <= f - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if f_new > f:
            # no descent possible at machine precision
            mu = expit(Xa @ theta)
            grad = Xa.T @ (mu - y) / n + penalty * theta
            converged = bool(np.max(np.abs(grad)) < max(tol, 1e-6))
            break
        theta, f = cand, f_new
        trace.append(f)
    return ProbeModel(theta[:-1].copy(), float(theta[-1]), l2, RAW, converged, it, float(f), tuple(trace))


# -- cross-validated curves -----------------------------------------------------------


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold index per example; each class is shuffled then dealt round-robin."""
    y = np.asarray(y).astype(bool)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    out = np.empty(y.size, dtype=np.int64)
    for cls in (True, False):
        idx = np.flatnonzero(y == cls)
        if idx.size < folds:
            raise DataError(f"class {'positive' if cls else 'negative'} has {idx.size} examples, fewer than {folds} folds")
        out[rng.permutation(idx)] = np.arange(idx.size) % folds
    return out


def _standardize(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def _cv_auroc(X, y, fold, folds, l2):
    scores = []
    for f in range(folds):
        tr, te = fold != f, fold == f
        Xtr, Xte = _standardize(X[tr], X[te])
        model = fit_logistic(Xtr, y[tr], l2=l2)
        scores.append(auroc(model.decision_function(Xte), y[te]))
    return np.asarray(scores)


@dataclass
class ProbeCurve:
    counts: list[int]
    side: str
    mean: dict[str, list[float]] = field(default_factory=dict)
    std: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"side": self.side, "counts": list(self.counts), "mean": self.mean, "std": self.std}


COMBINED = "COMBINED"


def _interleave(feature_sets) -> list[int]:
    """Ranked ids taken alternately from each set (first of each, then second of each, ...)."""
    out: list[int] = []
    for rank in range(max(len(fs) for fs in feature_sets)):
        for fs in feature_sets:
            if rank < len(fs) and fs.ids[rank] not in out:
                out.append(fs.ids[rank])
    return out


def cv_curves(dataset: ActivationDataset, sae, feature_sets, counts, folds: int = 5, seed: int = 0,
              l2: float | None = None) -> ProbeCurve:
    """Cross-validated probe AUROC for discovered, random and raw inputs.

    ``feature_sets`` is one feature set or several. With one set the positive
    class is its target side and the top-k ids are its first k. With several,
    the positive class is the first set's side and the top-k ids are taken
    alternately from each set's ranking, so a count of k always means k
    columns. Random features are drawn per fold, uniformly from features
    outside every listed set. The raw-residual entry is fitted once and
    repeated for every count.
    """
    from .sae import encode_batched

    sets = [feature_sets] if hasattr(feature_sets, "ids") else list(feature_sets)
    if not sets:
        raise DataError("probe curves need at least one feature set")
    gating = dataset.gating()
    if len(gating) == 0:
        raise DataError("probe curves need D+ and D- records")
    y = gating.call_mask if sets[0].side == "CALL" else gating.nocall_mask
    fold = stratified_folds(y, folds, seed)
    Z = encode_batched(sae, gating.H).astype(np.float64)
    H = gating.H.astype(np.float64)
    ids = list(sets[0].ids) if len(sets) == 1 else _interleave(sets)
    pool = np.setdiff1d(np.arange(sae.M), ids)
    counts = [int(k) for k in counts]
    for k in counts:
        if k < 1 or k > sae.M:
            raise DataError(f"feature count {k} outside [1, {sae.M}]")
        if k > len(ids):
            raise DataError(f"feature count {k} exceeds the {len(ids)} discovered features")
        if k > pool.size:
            raise DataError(f"feature count {k} exceeds the {pool.size} non-discovered features")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    raw = _cv_auroc(H, y, fold, folds, l2)
    curve = ProbeCurve(counts, str(sets[0].side) if len(sets) == 1 else COMBINED)
    for kind in InputKind:
        curve.mean[kind.value], curve.std[kind.value] = [], []
    for k in counts:
        disc = _cv_auroc(Z[:, ids[:k]], y, fold, folds, l2)
        rand = []
        for f in range(folds):
            cols = rng.choice(pool, size=k, replace=False)
            tr, te = fold != f, fold == f
            Xtr, Xte = _standardize(Z[tr][:, cols], Z[te][:, cols])
            model = fit_logistic(Xtr, y[tr], l2=l2)
            rand.append(auroc(model.decision_function(Xte), y[te]))
        for kind, vals in ((InputKind.DISCOVERED, disc), (InputKind.RANDOM, np.asarray(rand)), (InputKind.RAW, raw)):
            curve.mean[kind.value].append(float(np.mean(vals)))
            curve.std[kind.value].append(float(np.std(vals)))
    return curve
