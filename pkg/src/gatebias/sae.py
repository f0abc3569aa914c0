"""TopK sparse autoencoder trained with AdamW on a warmup-stable-decay schedule.

    z     = TopK(W_enc (h - b_pre))
    h_hat = W_dec z + b_pre

Decoder columns are kept at unit norm after every optimizer step. Gradients
flow only through the selected support; the selection itself is treated as
constant.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ._validation import coerce
from .dataset import ActivationDataset
from .errors import ConfigError, DataError, FormatError, NumericError

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SAE1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIII")


class SaeHyper(BaseModel):
    """Optimizer and curriculum settings. ``n_features``/``k`` default to 8d and d//32."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(5e-4, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    batch_tokens: int = Field(16384, ge=1)
    warmup: float = Field(0.10, gt=0)
    stable: float = Field(0.80, gt=0)
    decay: float = Field(0.10, gt=0)
    stage1_steps: int = Field(1000, ge=1)
    stage2_steps: int = Field(0, ge=0)
    dead_window: int = Field(1000, ge=1)
    n_features: Optional[int] = Field(None, ge=1)
    k: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _fractions(self):
        total = self.warmup + self.stable + self.decay
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"schedule fractions must sum to 1, got {total}")
        if self.n_features is not None and self.k is not None and self.k > self.n_features:
            raise ValueError(f"k={self.k} exceeds n_features={self.n_features}")
        return self


def default_dims(d: int) -> tuple[int, int]:
    """Dictionary size and sparsity used when none are given: M = 8d, K = floor(d/32)."""
    return 8 * d, max(1, d // 32)


@dataclass(eq=False)
class SaeModel:
    W_enc: np.ndarray  # (M, d)
    b_pre: np.ndarray  # (d,)
    W_dec: np.ndarray  # (d, M)
    k: int

    def __post_init__(self):
        M, d = self.W_enc.shape
        if self.W_dec.shape != (d, M) or self.b_pre.shape != (d,):
            raise DataError(
                f"inconsistent SAE shapes: W_enc {self.W_enc.shape}, "
                f"b_pre {self.b_pre.shape}, W_dec {self.W_dec.shape}"
            )
        if not 1 <= self.k <= M:
            raise ConfigError(f"k must satisfy 1 <= k <= M={M}, got {self.k}")

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def M(self) -> int:
        return self.W_enc.shape[0]

    @property
    def decoder_norms(self) -> np.ndarray:
        return np.linalg.norm(self.W_dec, axis=0)

    @classmethod
    def from_dictionary(cls, atoms: np.ndarray, k: int, b_pre: np.ndarray | None = None) -> "SaeModel":
        """Tied SAE whose decoder columns are the (normalized) rows of ``atoms``."""
        atoms = np.asarray(atoms, dtype=np.float64)
        atoms = atoms / np.linalg.norm(atoms, axis=1, keepdims=True)
        b = np.zeros(atoms.shape[1]) if b_pre is None else np.asarray(b_pre, dtype=np.float64)
        return cls(atoms.copy(), b, np.ascontiguousarray(atoms.T), k)

    def copy(self) -> "SaeModel":
        return SaeModel(self.W_enc.copy(), self.b_pre.copy(), self.W_dec.copy(), self.k)


# -- forward pass ---------------------------------------------------------------


def _support(pre: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    M = pre.shape[-1]
    if k >= M:
        return np.ones(pre.shape, dtype=bool)
    kth = np.partition(pre, M - k, axis=-1)[..., M - k: M - k + 1]
    above = pre > kth
    need = k - above.sum(axis=-1, keepdims=True)
    tied = pre == kth
    return above | (tied & (np.cumsum(tied, axis=-1) <= need))


def topk(v: np.ndarray, k: int) -> np.ndarray:
    v = np.asarray(v)
    M = v.shape[-1]
    if not 1 <= k <= M:
        raise ConfigError(f"k must satisfy 1 <= k <= {M}, got {k}")
    return np.where(_support(v, k), np.maximum(v, 0), 0).astype(v.dtype, copy=False)


def _check_width(model: SaeModel, h: np.ndarray) -> None:
    if h.shape[-1] != model.d:
        raise DataError(f"input width {h.shape[-1]} does not match SAE d={model.d}")


def encode(model: SaeModel, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    _check_width(model, h)
    return topk((h - model.b_pre) @ model.W_enc.T, model.k)


def decode(model: SaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != model.M:
        raise DataError(f"code width {z.shape[-1]} does not match SAE M={model.M}")
    return z @ model.W_dec.T + model.b_pre


def encode_batched(model: SaeModel, H: np.ndarray, chunk: int = 4096) -> np.ndarray:
    H = np.asarray(H)
    _check_width(model, H)
    out = np.empty((H.shape[0], model.M), dtype=np.result_type(H.dtype, model.W_enc.dtype))
    for s in range(0, H.shape[0], chunk):
        out[s:s + chunk] = encode(model, H[s:s + chunk])
    return out


def loss_and_grads(model: SaeModel, X: np.ndarray):
    """Mean per-example squared reconstruction error and its gradients.

    Returns ``(loss, grads, z)`` with ``grads`` keyed by parameter name.
    """
    n = X.shape[0]
    xc = X - model.b_pre
    pre = xc @ model.W_enc.T
    active = _support(pre, model.k) & (pre > 0)
    z = np.where(active, pre, 0).astype(pre.dtype, copy=False)
    err = z @ model.W_dec.T + model.b_pre - X
    loss = float(np.einsum("ij,ij->", err, err)) / n
    g = (2.0 / n) * err
    dz = (g @ model.W_dec) * active
    grads = {
        "W_dec": g.T @ z,
        "W_enc": dz.T @ xc,
        "b_pre": g.sum(axis=0) - dz.sum(axis=0) @ model.W_enc,
    }
    return loss, grads, z


def renormalize_decoder(model: SaeModel) -> SaeModel:
    norms = model.decoder_norms
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericError(f"decoder column {int(zero[0])} has zero norm")
    return SaeModel(model.W_enc, model.b_pre, model.W_dec / norms, model.k)


# -- optimisation -----------------------------------------------------------------


def wsd_lr(step: int, total: int, base_lr: float, warmup: float, stable: float) -> float:
    """Linear warmup, constant plateau, then linear decay to zero."""
    n_warm = max(1, int(round(warmup * total)))
    n_stable = int(round(stable * total))
    n_decay = max(1, total - n_warm - n_stable)
    if step < n_warm:
        return base_lr * (step + 1) / n_warm
    if step < n_warm + n_stable:
        return base_lr
    return base_lr * max(total - step, 0) / n_decay


class AdamW:
    """Adam with decoupled weight decay over a dict of named arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossTrace:
    losses: np.ndarray
    stage_boundary: int
    dead_features: list[int] = field(default_factory=list)

    def running_average(self, window: int = 100) -> np.ndarray:
        """Trailing mean restarted at the stage boundary."""
        out = np.empty_like(self.losses)
        for lo, hi in ((0, self.stage_boundary), (self.stage_boundary, len(self.losses))):
            seg = self.losses[lo:hi]
            if seg.size == 0:
                continue
            c = np.cumsum(np.insert(seg, 0, 0.0))
            idx = np.arange(1, seg.size + 1)
            start = np.maximum(idx - window, 0)
            out[lo:hi] = (c[idx] - c[start]) / (idx - start)
        return out


def _as_matrix(stream, d: int | None = None) -> np.ndarray:
    if stream is None:
        return np.zeros((0, d or 0), dtype=np.float32)
    if isinstance(stream, ActivationDataset):
        stream = stream.H
    X = np.asarray(stream, dtype=np.float32)
    if X.ndim != 2:
        raise DataError(f"training stream must be a 2-D array of vectors, got shape {X.shape}")
    return X


def train(
    stream_stage1,
    stream_stage2=None,
    hyper=None,
    seed: int = 0,
    callback: Callable[[int, SaeModel, float], None] | None = None,
) -> tuple[SaeModel, LossTrace]:
    """Two-stage TopK SAE training.

    Each stage draws ``batch_tokens`` vectors per step (with replacement) from
    its pool and runs its own warmup-stable-decay schedule with a fresh AdamW
    state. Stage 2 is skipped when its pool is empty or ``stage2_steps`` is 0.
    ``callback(step, model, loss)`` runs after every optimizer step.
    """
    hyper = coerce(SaeHyper, hyper, "sae")
    X1 = _as_matrix(stream_stage1)
    if X1.shape[0] == 0:
        raise DataError("stage-1 training stream is empty")
    d = X1.shape[1]
    X2 = _as_matrix(stream_stage2, d)
    if X2.shape[0] and X2.shape[1] != d:
        raise DataError(f"stage-2 width {X2.shape[1]} does not match stage-1 width {d}")
    M_default, k_default = default_dims(d)
    M = hyper.n_features or M_default
    k = hyper.k or k_default
    if not 1 <= k <= M:
        raise ConfigError(f"sae.k must satisfy 1 <= k <= M={M}, got {k}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AE]))
    W_dec = rng.standard_normal((d, M)).astype(np.float32)
    W_dec /= np.linalg.norm(W_dec, axis=0)
    first = X1[rng.integers(0, X1.shape[0], size=hyper.batch_tokens)]
    model = SaeModel(np.ascontiguousarray(W_dec.T), first.mean(axis=0).astype(np.float32), W_dec, k)

    stages = [(X1, hyper.stage1_steps)]
    if X2.shape[0] and hyper.stage2_steps:
        stages.append((X2, hyper.stage2_steps))

    losses: list[float] = []
    dead: list[int] = []
    step = 0
    for X, total in stages:
        params = {"W_enc": model.W_enc, "b_pre": model.b_pre, "W_dec": model.W_dec}
        opt = AdamW(params, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps, hyper.weight_decay)
        last_fired = np.full(M, -1, dtype=np.int64)
        for t in range(total):
            batch = X[rng.integers(0, X.shape[0], size=hyper.batch_tokens)]
            loss, grads, z = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite SAE loss at step {step}")
            # drop the radial component so the step does not fight the unit-norm constraint
            gd = grads["W_dec"]
            gd -= model.W_dec * np.einsum("dm,dm->m", gd, model.W_dec)
            opt.step(grads, wsd_lr(t, total, hyper.learning_rate, hyper.warmup, hyper.stable))
            model.W_dec /= np.linalg.norm(model.W_dec, axis=0)
            last_fired[(z > 0).any(axis=0)] = t
            losses.append(loss)
            if callback is not None:
                callback(step, model, loss)
            step += 1
        n_dead = int(np.sum(last_fired < total - hyper.dead_window))
        dead.append(n_dead)
        logger.info("stage done after %d steps: loss %.4g, %d dead features", total, losses[-1], n_dead)

    trace = LossTrace(np.asarray(losses), hyper.stage1_steps, dead)
    return model, trace


# -- diagnostics ----------------------------------------------------------------------


def diagnostics(model: SaeModel, data, chunk: int = 4096) -> dict:
    """Reconstruction MSE (per element), fraction of variance explained and dead-feature count.

    A feature is dead when its activation is zero on every record.
    """
    X = _as_matrix(data)
    if X.shape[0] == 0:
        raise DataError("diagnostics need a nonempty dataset")
    _check_width(model, X)
    X = X.astype(np.float64)
    sse = 0.0
    fired = np.zeros(model.M, dtype=bool)
    for s in range(0, X.shape[0], chunk):
        xb = X[s:s + chunk]
        z = encode(model, xb)
        err = decode(model, z) - xb
        sse += float(np.einsum("ij,ij->", err, err))
        fired |= (z > 0).any(axis=0)
    centered = X - X.mean(axis=0)
    sst = float(np.einsum("ij,ij->", centered, centered))
    if sst > 0:
        fve = 1.0 - sse / sst
    else:
        fve = 1.0 if sse == 0 else float("-inf")
    return {
        "recon_mse": sse / X.size,
        "fraction_variance_explained": fve,
        "dead_feature_count": int(model.M - fired.sum()),
    }


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(model: SaeModel, path, metadata: dict | None = None) -> None:
    """Write ``SAE1`` binary weights plus a ``<path>.json`` metadata sidecar.

    Weights are stored as row-major little-endian float32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.d, model.M, model.k)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (model.W_enc, model.b_pre, model.W_dec)
    )
    path.write_bytes(header + body)
    meta = {"format": "SAE1", "d": model.d, "M": model.M, "K": model.k}
    meta.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> SaeModel:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read SAE checkpoint {path}: {exc}") from exc
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, M, k = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    expected = _CKPT_HEADER.size + 4 * (2 * M * d + d)
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)} (truncated or corrupt)")
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{sidecar}: corrupt metadata") from exc
        if (meta.get("d"), meta.get("M"), meta.get("K")) != (d, M, k):
            raise FormatError(f"{path}: dimensions disagree with metadata sidecar")
    off = _CKPT_HEADER.size
    W_enc = np.frombuffer(buf, "<f4", M * d, off).reshape(M, d).astype(np.float32)
    off += 4 * M * d
    b_pre = np.frombuffer(buf, "<f4", d, off).astype(np.float32)
    off += 4 * d
    W_dec = np.frombuffer(buf, "<f4", M * d, off).reshape(d, M).astype(np.float32)
    try:
        return SaeModel(W_enc, b_pre, W_dec, k)
    except (DataError, ConfigError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
