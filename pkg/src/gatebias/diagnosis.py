"""Signed activation margin, the offset-plus-slope decision model, and geometry exports.

The margin of a record is the norm-weighted mean activation over the CALL
basis minus the same quantity over the NO_CALL basis. Regressing decisions on
the margin with a one-dimensional logistic model separates evidence sensitivity
(the slope) from an activation-independent calling offset (the intercept).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import ActivationDataset, Correctness
from .errors import DataError
from .probe import fit_logistic

CURVE_GRID = np.round(np.arange(-40, 41) / 10.0, 1)


@dataclass(frozen=True)
class MarginModel:
    """Fitted ``P(CALL | m) = sigmoid(beta * m + beta0)``.

    The neutral boundary ``m_star`` is computed once and ``beta0`` is stored as
    ``-(m_star * beta)``, which moves it by at most one rounding step but makes
    ``m_star * beta == -beta0`` hold exactly in floating point.
    """

    beta: float
    beta0: float
    margin_mean: float
    margin_std: float
    call_ids: tuple[int, ...] = ()
    nocall_ids: tuple[int, ...] = ()
    n_fit: int = 0
    converged: bool = True
    m_star: float | None = None

    def __post_init__(self):
        if self.beta == 0:
            object.__setattr__(self, "m_star", float("nan"))
            return
        m_star = -self.beta0 / self.beta if self.m_star is None else float(self.m_star)
        object.__setattr__(self, "m_star", m_star)
        object.__setattr__(self, "beta0", -(m_star * self.beta))

    @property
    def valid(self) -> bool:
        return self.beta > 0

    def predict(self, m) -> np.ndarray:
        return expit(self.beta * np.asarray(m, dtype=np.float64) + self.beta0)

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "beta0": self.beta0,
            "m_star": self.m_star,
            "n": self.n_fit,
            "margin_mean": self.margin_mean,
            "margin_std": self.margin_std,
            "converged": self.converged,
            "valid": self.valid,
            "call_ids": list(self.call_ids),
            "nocall_ids": list(self.nocall_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MarginModel":
        try:
            return cls(
                float(obj["beta"]), float(obj["beta0"]), float(obj["margin_mean"]), float(obj["margin_std"]),
                tuple(int(i) for i in obj.get("call_ids", ())), tuple(int(i) for i in obj.get("nocall_ids", ())),
                int(obj["n"]), bool(obj.get("converged", True)),
                None if obj.get("m_star") is None else float(obj["m_star"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed bias report: {exc}") from exc


def margin(z, C_ids, N_ids, decoder_norms):
    """(a_C, a_N, m) for one code vector or a batch of them (rows)."""
    C_ids = np.asarray(C_ids, dtype=np.int64)
    N_ids = np.asarray(N_ids, dtype=np.int64)
    if C_ids.size == 0 or N_ids.size == 0:
        raise DataError("margin needs nonempty CALL and NO_CALL feature sets")
    z = np.asarray(z, dtype=np.float64)
    norms = np.asarray(decoder_norms, dtype=np.float64)
    a_c = (z[..., C_ids] * norms[C_ids]).mean(axis=-1)
    a_n = (z[..., N_ids] * norms[N_ids]).mean(axis=-1)
    return a_c, a_n, a_c - a_n


def fit_bias_model(margins, decisions, l2: float = 0.0, tol: float = 1e-10, call_ids=(), nocall_ids=(),
                   max_iter: int = 100) -> MarginModel:
    """Logistic fit of CALL decisions on the scalar margin."""
    m = np.asarray(margins, dtype=np.float64).ravel()
    y = np.asarray(decisions).astype(bool).ravel()
    if m.size != y.size:
        raise DataError(f"{m.size} margins for {y.size} decisions")
    if m.size < 10:
        raise DataError(f"bias model needs at least 10 records, got {m.size}")
    if y.all() or not y.any():
        raise DataError("bias model needs both CALL and NO_CALL decisions")
    fit = fit_logistic(m[:, None], y, l2=l2, tol=tol, max_iter=max_iter)
    return MarginModel(
        float(fit.w[0]), fit.b, float(m.mean()), float(m.std()),
        tuple(int(i) for i in call_ids), tuple(int(i) for i in nocall_ids), int(m.size), fit.converged,
    )


def neutral_boundary(model: MarginModel) -> float:
    if not model.valid:
        raise DataError(f"neutral boundary undefined for slope {model.beta} <= 0")
    return model.m_star


def dataset_margins(dataset: ActivationDataset, sae, C_ids, N_ids):
    from .sae import encode_batched

    Z = encode_batched(sae, dataset.H)
    return margin(Z, C_ids, N_ids, sae.decoder_norms)


def diagnose(dataset: ActivationDataset, sae, C_ids, N_ids, l2: float = 0.0) -> MarginModel:
    """Fit the bias model on the D+/D- records of ``dataset``."""
    gating = dataset.gating()
    _, _, m = dataset_margins(gating, sae, C_ids, N_ids)
    return fit_bias_model(m, gating.call_mask, l2=l2, call_ids=C_ids, nocall_ids=N_ids)


@dataclass(frozen=True)
class GeometryRecord:
    a_call: float
    a_nocall: float
    m: float
    decision: str
    correctness: str


@dataclass
class GeometryExport:
    a_call: np.ndarray
    a_nocall: np.ndarray
    margin: np.ndarray
    call: np.ndarray
    correctness: np.ndarray
    grid: np.ndarray
    curve: np.ndarray | None

    def __len__(self) -> int:
        return self.margin.size

    def records(self) -> list[GeometryRecord]:
        return [
            GeometryRecord(float(c), float(n), float(m), "CALL" if k else "NO_CALL", Correctness(int(q)).name)
            for c, n, m, k, q in zip(self.a_call, self.a_nocall, self.margin, self.call, self.correctness)
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a_C", "a_N", "m", "decision", "correctness"])
            for r in self.records():
                w.writerow([repr(r.a_call), repr(r.a_nocall), repr(r.m), r.decision, r.correctness])


def geometry_export(dataset: ActivationDataset, sae, C_ids, N_ids, model: MarginModel | None = None) -> GeometryExport:
    """Per-record margin coordinates plus the fitted decision curve on a standardized grid.

    The curve is ``sigmoid(beta * (g * std) + beta0)`` for grid points ``g``,
    i.e. the grid rescales the margin by its spread without re-centering, so the
    offset stays visible as a left shift of the 0.5 crossing.
    """
    gating = dataset.gating()
    if len(gating) == 0:
        raise DataError("geometry export needs D+ or D- records")
    a_c, a_n, m = dataset_margins(gating, sae, C_ids, N_ids)
    if model is None and gating.call_mask.any() and not gating.call_mask.all() and len(gating) >= 10:
        model = fit_bias_model(m, gating.call_mask, call_ids=C_ids, nocall_ids=N_ids)
    curve = None if model is None else model.predict(CURVE_GRID * model.margin_std)
    return GeometryExport(a_c, a_n, m, gating.call_mask.copy(), gating.correctness.copy(), CURVE_GRID.copy(), curve)


@dataclass(frozen=True)
class FailureContrast:
    side: str
    feature_ids: tuple[int, ...]
    mean_false_call: np.ndarray
    mean_true_nocall: np.ndarray

    @property
    def difference(self) -> np.ndarray:
        return self.mean_false_call - self.mean_true_nocall

    def to_json(self) -> dict:
        return {
            "side": self.side,
            "features": [
                {"id": j, "false_call": float(a), "true_nocall": float(b), "difference": float(a - b)}
                for j, a, b in zip(self.feature_ids, self.mean_false_call, self.mean_true_nocall)
            ],
        }


def failure_contrast(dataset: ActivationDataset, sae, feature_set) -> FailureContrast:
    """Mean activation of each listed feature on over-calls versus correct abstentions."""
    from .sae import encode_batched

    if not dataset.has_correctness:
        raise DataError("failure contrast needs correctness labels")
    fc = dataset.correctness == Correctness.FALSE_CALL
    tn = dataset.correctness == Correctness.TRUE_NOCALL
    if not fc.any() or not tn.any():
        raise DataError("failure contrast needs both FALSE_CALL and TRUE_NOCALL records")
    ids = np.asarray(feature_set.ids, dtype=np.int64)
    Z = encode_batched(sae, dataset.H)[:, ids].astype(np.float64)
    return FailureContrast(str(feature_set.side), tuple(int(i) for i in ids), Z[fc].mean(axis=0), Z[tn].mean(axis=0))
