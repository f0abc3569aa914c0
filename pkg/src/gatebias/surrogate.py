"""Synthetic residual-stream activations with a planted, biased gating decision.

Each record carries nonnegative latent evidence on a few orthonormal CALL and
NO_CALL atoms. The emitted decision is CALL with probability
``sigmoid(beta_true * margin + beta0_true)``, where the margin is the mean CALL
evidence minus the mean NO_CALL evidence as read off the activation vector.
Because ``beta0_true`` is known, every downstream estimate can be checked
against the value it should recover.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit
from scipy.stats import truncnorm

from ._validation import coerce
from .dataset import ActivationDataset, Behavior, Provenance, Split, correctness_from
from .errors import DataError

_STREAMS = ("atoms", "evidence", "noise", "decisions")


class SurrogateConfig(BaseModel):
    """Parameters of the planted decision process.

    Per-atom evidence follows a normal distribution with location
    ``evidence_shape * s`` and scale ``s`` truncated to ``[0, inf)``, where ``s``
    is chosen so that the mean equals ``evidence_scale``. Negative shapes give a
    heavy mass near zero with an exponential-like tail.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int = Field(64, ge=1)
    n_call_atoms: int = Field(1, ge=1)
    n_nocall_atoms: int = Field(1, ge=1)
    beta_true: float = Field(3.0, gt=0)
    beta0_true: float = 1.0
    noise_sigma: float = Field(0.02, ge=0)
    evidence_scale: float = Field(0.5, gt=0)
    evidence_shape: float = Field(-3.0, ge=-20, le=50)
    correct_threshold: float = 0.7
    n_records: int = Field(20000, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _atoms_fit(self):
        if self.d < self.n_call_atoms + self.n_nocall_atoms:
            raise ValueError(
                f"d={self.d} must be >= n_call_atoms + n_nocall_atoms "
                f"= {self.n_call_atoms + self.n_nocall_atoms}"
            )
        return self

    @property
    def neutral_margin(self) -> float:
        return -self.beta0_true / self.beta_true


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Planted dictionary and per-record latent evidence.

    ``basis`` holds a full orthonormal basis of R^d as rows; the first
    ``n_call_atoms`` rows are the CALL atoms, the next ``n_nocall_atoms`` the
    NO_CALL atoms.
    """

    basis: np.ndarray
    n_call_atoms: int
    n_nocall_atoms: int
    evidence_call: np.ndarray
    evidence_nocall: np.ndarray
    correct_threshold: float

    @property
    def call_atoms(self) -> np.ndarray:
        return self.basis[: self.n_call_atoms]

    @property
    def nocall_atoms(self) -> np.ndarray:
        return self.basis[self.n_call_atoms: self.n_call_atoms + self.n_nocall_atoms]

    @property
    def a_call(self) -> np.ndarray:
        return self.evidence_call.mean(axis=1)

    @property
    def a_nocall(self) -> np.ndarray:
        return self.evidence_nocall.mean(axis=1)

    @property
    def latent_margin(self) -> np.ndarray:
        return self.a_call - self.a_nocall

    @property
    def required_call(self) -> np.ndarray:
        return self.latent_margin > self.correct_threshold

    def to_json(self) -> dict:
        return {
            "basis": self.basis.tolist(),
            "n_call_atoms": self.n_call_atoms,
            "n_nocall_atoms": self.n_nocall_atoms,
            "evidence_call": self.evidence_call.tolist(),
            "evidence_nocall": self.evidence_nocall.tolist(),
            "correct_threshold": self.correct_threshold,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        try:
            n_c, n_n = int(obj["n_call_atoms"]), int(obj["n_nocall_atoms"])
            return cls(
                np.asarray(obj["basis"], dtype=np.float64),
                n_c,
                n_n,
                np.asarray(obj["evidence_call"], dtype=np.float64).reshape(-1, n_c),
                np.asarray(obj["evidence_nocall"], dtype=np.float64).reshape(-1, n_n),
                float(obj["correct_threshold"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed ground-truth document: {exc}") from exc


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STREAMS, children)}


def orthonormal_basis(d: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of a seeded orthonormal basis (QR of a Gaussian, signs fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q.T)


@lru_cache(maxsize=64)
def _evidence_law(shape: float) -> tuple[float, float]:
    """(truncation point a, mean) of the unit-scale truncated normal."""
    a = -shape
    return a, float(truncnorm.mean(a, np.inf, loc=shape, scale=1.0))


def sample_evidence(config: SurrogateConfig, size, rng: np.random.Generator) -> np.ndarray:
    a, unit_mean = _evidence_law(config.evidence_shape)
    s = config.evidence_scale / unit_mean
    return truncnorm.rvs(a, np.inf, loc=config.evidence_shape * s, scale=s, size=size, random_state=rng)


def planted_margin(H: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean projection of each row onto the CALL and NO_CALL atoms, and their difference."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != gt.basis.shape[1]:
        raise DataError(f"activations of shape {H.shape} do not match d={gt.basis.shape[1]}")
    a_c = (H @ gt.call_atoms.T).mean(axis=1)
    a_n = (H @ gt.nocall_atoms.T).mean(axis=1)
    return a_c, a_n, a_c - a_n


def decision_function(gt: GroundTruth | None, config, margin):
    """Planted CALL probability at ``margin``."""
    config = coerce(SurrogateConfig, config, "surrogate")
    return expit(config.beta_true * np.asarray(margin, dtype=np.float64) + config.beta0_true)


def _decide(H, gt, config, seed) -> np.ndarray:
    _, _, m = planted_margin(H, gt)
    u = _streams(seed)["decisions"].random(len(m))
    return u < decision_function(gt, config, m)


def generate(config) -> tuple[ActivationDataset, GroundTruth]:
    config = coerce(SurrogateConfig, config, "surrogate")
    rng = _streams(config.seed)
    n, d = config.n_records, config.d
    basis = orthonormal_basis(d, rng["atoms"])
    ev_c = sample_evidence(config, (n, config.n_call_atoms), rng["evidence"])
    ev_n = sample_evidence(config, (n, config.n_nocall_atoms), rng["evidence"])
    gt = GroundTruth(basis, config.n_call_atoms, config.n_nocall_atoms, ev_c, ev_n, config.correct_threshold)

    H = ev_c @ gt.call_atoms + ev_n @ gt.nocall_atoms
    if config.noise_sigma > 0:
        H = H + config.noise_sigma * rng["noise"].standard_normal((n, d))
    H = H.astype(np.float32)

    call = _decide(H, gt, config, config.seed)
    behavior = np.where(call, Behavior.TOOL_CALL, Behavior.REQUEST_FOR_INFO).astype(np.uint8)
    width = max(6, len(str(max(n - 1, 0))))
    ds = ActivationDataset(
        d,
        H,
        tuple(f"sur-{i:0{width}d}" for i in range(n)),
        behavior,
        correctness_from(call, gt.required_call),
        np.full(n, Split.UNASSIGNED, np.uint8),
        Provenance.SURROGATE,
    )
    return ds, gt


def resample_decisions(dataset: ActivationDataset, gt: GroundTruth, config, seed: int) -> ActivationDataset:
    """Re-derive decisions from (possibly steered) activations.

    Margins are re-read from the supplied vectors; the uniform draws depend only
    on ``seed`` and record position, so unmodified vectors with the generating
    seed reproduce the original decisions. Correctness is recomputed against the
    unchanged required decision when it is known.
    """
    config = coerce(SurrogateConfig, config, "surrogate")
    if dataset.d != gt.basis.shape[1]:
        raise DataError(f"dataset width {dataset.d} does not match ground truth d={gt.basis.shape[1]}")
    call = _decide(dataset.H, gt, config, seed)
    behavior = np.where(call, Behavior.TOOL_CALL, Behavior.REQUEST_FOR_INFO).astype(np.uint8)
    if dataset.has_correctness:
        correctness = correctness_from(call, dataset.required_call)
    else:
        correctness = dataset.correctness
    return dataset.with_labels(behavior=behavior, correctness=correctness)


def broad_corpus(gt: GroundTruth, n: int, seed: int, n_active: int = 1, scale: float = 1.0) -> np.ndarray:
    """Generic sparse activations over the full planted basis.

    Each row is a nonnegative combination of ``n_active`` distinct basis rows
    with coefficients uniform on ``[0.5, 1.5] * scale``; stands in for the
    broad pre-training corpus of the first SAE training stage.
    """
    m, d = gt.basis.shape
    if not 1 <= n_active <= m:
        raise DataError(f"n_active must be in [1, {m}], got {n_active}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB50AD]))
    idx = np.argsort(rng.random((n, m)), axis=1)[:, :n_active]
    coef = scale * rng.uniform(0.5, 1.5, size=(n, n_active))
    out = np.einsum("nk,nkd->nd", coef, gt.basis[idx])
    return out.astype(np.float32)
