"""Margin-cancelling steering and the feature-scaling reference interventions.

Calibration refits the margin model on the top-r features of each side and
reads off the shift ``delta_r = -beta0_r / beta_r`` that would move the
neutral boundary back to zero. The steering vector spreads that shift over the
decoder directions of the selected features, weighted by how strongly each one
separates CALL from NO_CALL decisions on the calibration records.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import ActivationDataset, Split
from .diagnosis import MarginModel, fit_bias_model, margin
from .errors import ConfigError, DataError
from .sae import encode, encode_batched

DEFAULT_RS = (5, 10, 15, 20, 25, 30)
DEFAULT_ALPHA = 0.8


class Method(str, enum.Enum):
    INIT = "INIT"
    SUPPRESS = "SUPPRESS"
    PROMOTE = "PROMOTE"
    AMCS = "AMCS"


class PlanStatus(str, enum.Enum):
    OK = "OK"
    SKIPPED = "SKIPPED"


@dataclass(frozen=True, eq=False)
class SteeringPlan:
    r: int
    alpha: float
    call_ids: tuple[int, ...]
    nocall_ids: tuple[int, ...]
    call_weights: np.ndarray
    nocall_weights: np.ndarray
    fit: MarginModel
    status: PlanStatus
    delta_r: float | None = None
    vector: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "r": self.r,
            "alpha": self.alpha,
            "delta_r": self.delta_r,
            "beta_r": self.fit.beta,
            "beta0_r": self.fit.beta0,
            "feature_ids": {"CALL": list(self.call_ids), "NO_CALL": list(self.nocall_ids)},
            "weights": {"CALL": self.call_weights.tolist(), "NO_CALL": self.nocall_weights.tolist()},
            "vector": None if self.vector is None else self.vector.astype(np.float32).tolist(),
            "status": self.status.value,
            "fit": self.fit.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SteeringPlan":
        try:
            vec = obj.get("vector")
            return cls(
                int(obj["r"]),
                float(obj["alpha"]),
                tuple(int(i) for i in obj["feature_ids"]["CALL"]),
                tuple(int(i) for i in obj["feature_ids"]["NO_CALL"]),
                np.asarray(obj["weights"]["CALL"], dtype=np.float64),
                np.asarray(obj["weights"]["NO_CALL"], dtype=np.float64),
                MarginModel.from_json(obj["fit"]),
                PlanStatus(obj["status"]),
                None if obj.get("delta_r") is None else float(obj["delta_r"]),
                None if vec is None else np.asarray(vec, dtype=np.float32).astype(np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed steering plan: {exc}") from exc


def _require_no_test(dataset: ActivationDataset) -> None:
    if np.any(dataset.split == Split.TEST):
        raise DataError("calibration must not see TEST-split records")


def attribution_gaps(cal_dataset: ActivationDataset, sae, side_ids) -> np.ndarray:
    """Mean activation on CALL decisions minus mean on NO_CALL decisions, per listed feature."""
    gating = cal_dataset.gating()
    call = gating.call_mask
    if not call.any() or call.all():
        raise DataError("attribution gaps need both CALL and NO_CALL decisions")
    ids = np.asarray(side_ids, dtype=np.int64)
    Z = encode_batched(sae, gating.H)[:, ids].astype(np.float64)
    return Z[call].mean(axis=0) - Z[~call].mean(axis=0)


def weights(gaps) -> np.ndarray:
    a = np.abs(np.asarray(gaps, dtype=np.float64))
    if a.size == 0:
        raise DataError("no gaps to weight")
    total = a.sum()
    if total == 0:
        warnings.warn("all attribution gaps are zero; using uniform weights", RuntimeWarning, stacklevel=2)
        return np.full(a.size, 1.0 / a.size)
    return a / total


def steering_vector(sae, call_ids, nocall_ids, w_call, w_nocall, r: int, alpha: float, delta_r: float) -> np.ndarray:
    D = np.asarray(sae.W_dec, dtype=np.float64)
    u_call = D[:, list(call_ids)] @ w_call
    u_nocall = D[:, list(nocall_ids)] @ w_nocall
    return alpha * r * delta_r * u_call + (1.0 - alpha) * r * (-delta_r) * u_nocall


def calibrate(cal_dataset: ActivationDataset, sae, C, N, r: int, alpha: float = DEFAULT_ALPHA,
              l2: float = 0.0) -> SteeringPlan:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if r < 1:
        raise ConfigError(f"r must be >= 1, got {r}")
    _require_no_test(cal_dataset)
    call_ids, nocall_ids = C.top(r), N.top(r)
    gating = cal_dataset.gating()
    call = gating.call_mask
    if not call.any() or call.all():
        raise DataError("calibration needs both CALL and NO_CALL decisions")
    Z = encode_batched(sae, gating.H)
    _, _, m = margin(Z, call_ids, nocall_ids, sae.decoder_norms)
    fit = fit_bias_model(m, call, l2=l2, call_ids=call_ids, nocall_ids=nocall_ids)

    Zf = Z.astype(np.float64)
    gap = Zf[call].mean(axis=0) - Zf[~call].mean(axis=0)
    w_c = weights(gap[list(call_ids)])
    w_n = weights(gap[list(nocall_ids)])
    if not fit.valid:
        return SteeringPlan(r, alpha, call_ids, nocall_ids, w_c, w_n, fit, PlanStatus.SKIPPED)
    delta = fit.m_star
    vec = steering_vector(sae, call_ids, nocall_ids, w_c, w_n, r, alpha, delta)
    return SteeringPlan(r, alpha, call_ids, nocall_ids, w_c, w_n, fit, PlanStatus.OK, float(delta), vec)


def budget_sweep(cal_dataset, sae, C, N, rs=DEFAULT_RS, alpha: float = DEFAULT_ALPHA) -> list[SteeringPlan]:
    return [calibrate(cal_dataset, sae, C, N, int(r), alpha) for r in rs]


def _usable(plan: SteeringPlan) -> np.ndarray:
    if plan.status is not PlanStatus.OK or plan.vector is None:
        raise DataError(f"plan for r={plan.r} was skipped (fitted slope {plan.fit.beta:.4g} <= 0)")
    return plan.vector


def apply(h, plan: SteeringPlan) -> np.ndarray:
    v = _usable(plan)
    h = np.asarray(h)
    if h.shape[-1] != v.shape[0]:
        raise DataError(f"activation width {h.shape[-1]} does not match plan width {v.shape[0]}")
    return (h + v).astype(np.result_type(h.dtype, np.float64), copy=False)


def feature_scale(h, sae, ids, factor: float) -> np.ndarray:
    """Rescale the listed features' contribution to ``h`` by ``factor``."""
    if factor < 0:
        raise ConfigError(f"scaling factor must be >= 0, got {factor}")
    h = np.asarray(h, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    z = encode(sae, h)
    dz = (factor - 1.0) * z[..., ids]
    return h + dz @ np.asarray(sae.W_dec, dtype=np.float64)[:, ids].T


def realized_margin_shift(sae, samples, plan: SteeringPlan) -> dict:
    v = _usable(plan)
    H = np.asarray(samples, dtype=np.float64)
    norms = sae.decoder_norms
    _, _, m0 = margin(encode_batched(sae, H), plan.call_ids, plan.nocall_ids, norms)
    _, _, m1 = margin(encode_batched(sae, H + v), plan.call_ids, plan.nocall_ids, norms)
    dm = m1 - m0
    return {
        "mean": float(dm.mean()),
        "median": float(np.median(dm)),
        "std": float(dm.std()),
        "n": int(dm.size),
        "target": plan.delta_r,
    }


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    tc_acc: float
    nc_acc: float
    overall: float

    @classmethod
    def score(cls, decided_call, required_call) -> "Metrics":
        decided = np.asarray(decided_call, dtype=bool)
        req = np.asarray(required_call, dtype=bool)
        if decided.shape != req.shape:
            raise DataError("decision and requirement vectors differ in length")
        tc = 100.0 * float(np.mean(decided[req])) if req.any() else float("nan")
        nc = 100.0 * float(np.mean(~decided[~req])) if (~req).any() else float("nan")
        overall = 100.0 * float(np.mean(decided == req))
        return cls(tc, nc, overall)

    def to_json(self) -> dict:
        return {"tc_acc": self.tc_acc, "nc_acc": self.nc_acc, "overall": self.overall}


@dataclass
class InterventionResult:
    method: Method
    per_r: dict[int, Metrics] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    @property
    def mean(self) -> Metrics | None:
        if not self.per_r:
            return None
        vals = np.array([[m.tc_acc, m.nc_acc, m.overall] for m in self.per_r.values()])
        return Metrics(*(float(x) for x in vals.mean(axis=0)))

    @property
    def tc_acc(self) -> float:
        return self.mean.tc_acc

    @property
    def nc_acc(self) -> float:
        return self.mean.nc_acc

    @property
    def overall(self) -> float:
        return self.mean.overall

    def to_json(self) -> dict:
        mean = self.mean
        return {
            "method": self.method.value,
            "per_r": {str(r): m.to_json() for r, m in sorted(self.per_r.items())},
            "mean": None if mean is None else mean.to_json(),
            "skipped": sorted(self.skipped),
        }


def _intervene(method: Method, H, sae, r, C, N, plan, suppress_factor, promote_factor):
    if method is Method.INIT:
        return H
    if method is Method.SUPPRESS:
        return feature_scale(H, sae, C.top(r), suppress_factor)
    if method is Method.PROMOTE:
        return feature_scale(H, sae, N.top(r), promote_factor)
    return apply(H, plan)


def evaluate(test_dataset: ActivationDataset, gt, surrogate_config, method, rs=DEFAULT_RS, *, sae=None, C=None,
             N=None, plans=None, seed: int = 0, suppress_factor: float = 0.5,
             promote_factor: float = 1.5) -> InterventionResult:
    """Accuracy of an intervention at each budget r, with decisions re-drawn from the planted model.

    All methods share the same uniform draws (fixed by ``seed``), so differences
    between rows reflect only the intervention.
    """
    from .surrogate import resample_decisions

    if gt is None:
        raise DataError("evaluation needs ground truth for re-deriving decisions")
    if not test_dataset.has_correctness:
        raise DataError("evaluation needs ground-truth required decisions")
    method = Method(method)
    required = test_dataset.required_call
    H = test_dataset.H.astype(np.float64)
    result = InterventionResult(method)
    plan_by_r = {} if plans is None else {p.r: p for p in plans}
    if method is Method.AMCS:
        rs = sorted(plan_by_r) if plans is not None and rs is None else rs
    if method in (Method.SUPPRESS, Method.PROMOTE) and (sae is None or C is None or N is None):
        raise DataError(f"{method.value} needs the SAE and both feature sets")
    for r in rs:
        r = int(r)
        plan = None
        if method is Method.AMCS:
            if r not in plan_by_r:
                raise DataError(f"no steering plan for r={r}")
            plan = plan_by_r[r]
            if plan.status is PlanStatus.SKIPPED:
                result.skipped.append(r)
                continue
        H2 = _intervene(method, H, sae, r, C, N, plan, suppress_factor, promote_factor)
        steered = resample_decisions(test_dataset.with_activations(H2), gt, surrogate_config, seed)
        result.per_r[r] = Metrics.score(steered.call_mask, required)
    return result


def results_rows(results: list[InterventionResult]) -> list[list]:
    """Table rows: method, metric, one column per r, mean, change versus INIT."""
    rs = sorted({r for res in results for r in res.per_r} | {r for res in results for r in res.skipped})
    init = next((res.mean for res in results if res.method is Method.INIT), None)
    rows = [["method", "metric", *[f"r={r}" for r in rs], "mean", "delta_vs_init"]]
    for res in results:
        mean = res.mean
        for metric in ("tc_acc", "nc_acc", "overall"):
            cells = [
                "SKIPPED" if r in res.skipped else ("" if r not in res.per_r else f"{getattr(res.per_r[r], metric):.2f}")
                for r in rs
            ]
            m = "" if mean is None else f"{getattr(mean, metric):.2f}"
            delta = "" if mean is None or init is None else f"{getattr(mean, metric) - getattr(init, metric):+.2f}"
            rows.append([res.method.value, metric, *cells, m, delta])
    return rows


def write_results_csv(results: list[InterventionResult], path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(results_rows(results))
