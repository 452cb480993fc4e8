"""Scalable neural estimator of the PID atoms for continuous features.

Two label-conditioned encoders map each modality's feature vector to K
rows of an embedding; exponentiated inner products between the rows give
an unnormalized joint over (batch-index i, batch-index j, label y) which
Sinkhorn scaling projects onto the batch's pairwise marginals. The
training loss is the plug-in mutual information of the projected
coupling, i.e. the quantity the marginal-matching program minimizes, and
is backpropagated through the unrolled Sinkhorn iterations by hand.

Atom evaluation combines the coupling's information with KL-based
estimates of the observable terms:

    S  = I_P(Y;X1,X2) - I_Q(Y;X1,X2)
    U1 = I_Q(Y;X1,X2) - I_P(Y;X2)
    U2 = I_Q(Y;X1,X2) - I_P(Y;X1)
    R  = I_P(Y;X1) - U1

where each I_P(Y;Z) is the mean KL divergence between a sample's
regularized predictive distribution under probe Z and the soft-aggregated
output marginal.

Marginal targets: row targets follow the vision-only regularized
conditionals and column targets the text-only ones, both rescaled per
label to the batch's soft-aggregated multimodal marginal so the two sides
carry identical per-label mass (a hard constraint for Sinkhorn
feasibility). One-hot variants ("sample", "argmax") are available as
ablation modes; the soft default is the only mode whose training
objective is non-degenerate for sharp predictors.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Pmf, kl_bits
from .errors import DomainError, FormatError, NumericError
from .mlp import Adam, MlpParams, mlp_backward, mlp_forward
from .pipeline import SampleRecord, threshold_regularize
from .sinkhorn import check_feasible, scale_to_marginals
from .solver import PidAtoms

_LN2 = float(np.log(2.0))
_MAGIC = b"PIDBATCH"
_FORMAT_VERSION = 1
TARGET_MODES = ("soft", "sample", "argmax")


@dataclass(frozen=True)
class TrainConfig:
    """Estimator hyperparameters (defaults follow the published recipe:
    Adam at 1e-3, 8 epochs, 3-layer MLPs with hidden width 32, batch 256)."""

    learning_rate: float = 1e-3
    epochs: int = 8
    batch_size: int = 256
    test_batch_size: int = 256
    sinkhorn_iters: int = 100
    seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 32
    tau: float = 0.3
    target_mode: str = "soft"
    logit_clip: float = 30.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.batch_size,
               self.test_batch_size, self.sinkhorn_iters, self.embed_dim,
               self.hidden_dim) <= 0:
            raise DomainError("TrainConfig values must be positive")
        if self.target_mode not in TARGET_MODES:
            raise DomainError(f"target_mode must be one of {TARGET_MODES}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class EncoderParams:
    """The two label-conditioned encoders.

    Each maps a feature vector to k * embed_dim outputs, reshaped to one
    embed_dim row per label.
    """

    f1: MlpParams
    f2: MlpParams
    in1: int
    in2: int
    k: int
    embed_dim: int

    @classmethod
    def init(cls, in1: int, in2: int, k: int, cfg: TrainConfig,
             rng: np.random.Generator) -> "EncoderParams":
        out = k * cfg.embed_dim
        return cls(
            f1=MlpParams.init(in1, cfg.hidden_dim, out, rng),
            f2=MlpParams.init(in2, cfg.hidden_dim, out, rng),
            in1=in1, in2=in2, k=k, embed_dim=cfg.embed_dim,
        )

    def tensors(self) -> list[np.ndarray]:
        return self.f1.flatten() + self.f2.flatten()


@dataclass
class CouplingModel:
    """A trained marginal-matching joint: encoder weights plus the frozen
    statistics used in projection and evaluation."""

    params: EncoderParams
    config: TrainConfig
    marginal_y: np.ndarray
    loss_trace: np.ndarray
    data_digest: str

    def digest(self) -> str:
        return hashlib.sha256(serialize_model(self)).hexdigest()


# ---------------------------------------------------------------------------
# Similarity tensor and differentiable Sinkhorn
# ---------------------------------------------------------------------------

def _encode(params: EncoderParams, x_batch: np.ndarray, which: int):
    mlp = params.f1 if which == 1 else params.f2
    out, cache = mlp_forward(mlp, x_batch)
    n = x_batch.shape[0]
    feats = out.reshape(n, params.k, params.embed_dim)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats))[0][0])
        raise NumericError(f"encoder {which} produced non-finite activations at sample {bad}")
    return feats, cache


def build_similarity(params: EncoderParams, x1_batch: np.ndarray,
                     x2_batch: np.ndarray) -> np.ndarray:
    """A[i, j, y] = exp(<f1(x1_i, y), f2(x2_j, y)>); strictly positive.

    Logits are clamped to +-logit_clip = 30 before exponentiation.
    """
    x1_batch = np.atleast_2d(np.asarray(x1_batch, dtype=float))
    x2_batch = np.atleast_2d(np.asarray(x2_batch, dtype=float))
    if x1_batch.shape[0] != x2_batch.shape[0]:
        raise DomainError("batches must have equal size")
    if x1_batch.shape[1] != params.in1 or x2_batch.shape[1] != params.in2:
        raise DomainError("feature dimensions disagree with encoder parameters")
    f1, _ = _encode(params, x1_batch, 1)
    f2, _ = _encode(params, x2_batch, 2)
    logits = np.einsum("iyd,jyd->ijy", f1, f2)
    return np.exp(np.clip(logits, -30.0, 30.0))


def sinkhorn_project(a: np.ndarray, row_targets: np.ndarray,
                     col_targets: np.ndarray, iters: int = 100):
    """Project a positive tensor onto (i,y)/(j,y) marginal targets.

    Returns ``(coupling, residual)``; the residual is the max-abs marginal
    deviation after ``iters`` full scaling rounds (best effort when the
    iteration budget is tight).
    """
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0.0):
        raise DomainError("similarity tensor must be strictly positive")
    coupling, residual, _ = scale_to_marginals(a, np.asarray(row_targets, dtype=float),
                                               np.asarray(col_targets, dtype=float),
                                               max_iters=iters, tol=0.0)
    return coupling, residual


def _sinkhorn_cached(a, rows, cols, iters):
    """Fixed-iteration Sinkhorn retaining every intermediate for backprop."""
    row_mask = rows > 0.0
    col_mask = cols > 0.0
    v = col_mask.astype(float)
    us, sus, vs, svs = [], [], [], [None]
    vs.append(v)
    for _ in range(iters):
        su = np.einsum("ijy,jy->iy", a, v)
        u = np.divide(rows, su, out=np.zeros_like(rows), where=row_mask)
        sv = np.einsum("ijy,iy->jy", a, u)
        v = np.divide(cols, sv, out=np.zeros_like(cols), where=col_mask)
        us.append(u)
        sus.append(su)
        vs.append(v)
        svs.append(sv)
    coupling = a * us[-1][:, None, :] * vs[-1][None, :, :]
    cache = (a, row_mask, col_mask, us, sus, vs, svs)
    return coupling, cache


def _sinkhorn_backward(cache, d_coupling):
    """Exact gradient of the loss w.r.t. the similarity tensor."""
    a, row_mask, col_mask, us, sus, vs, svs = cache
    iters = len(us)
    u_last, v_last = us[-1], vs[-1]
    d_a = d_coupling * u_last[:, None, :] * v_last[None, :, :]
    du = np.einsum("ijy,ijy,jy->iy", d_coupling, a, v_last)
    dv = np.einsum("ijy,ijy,iy->jy", d_coupling, a, u_last)
    for t in range(iters - 1, -1, -1):
        u_t, su_t = us[t], sus[t]
        v_t, sv_t = vs[t + 1], svs[t + 1]
        v_prev = vs[t]
        dsv = np.divide(-dv * v_t, sv_t, out=np.zeros_like(dv), where=col_mask)
        d_a += u_t[:, None, :] * dsv[None, :, :]
        du = du + np.einsum("ijy,jy->iy", a, dsv)
        dsu = np.divide(-du * u_t, su_t, out=np.zeros_like(du), where=row_mask)
        d_a += dsu[:, None, :] * v_prev[None, :, :]
        dv = np.einsum("ijy,iy->jy", a, dsu)
        du = np.zeros_like(du)
    return d_a


def _coupling_mi(coupling: np.ndarray):
    """Plug-in I((i,j); y) in bits of a normalized coupling, with gradient."""
    m_pair = coupling.sum(axis=2)
    m_y = coupling.sum(axis=(0, 1))
    mask = coupling > 0.0
    ln_q = np.log(coupling, out=np.zeros_like(coupling), where=mask)
    ln_pair = np.log(m_pair, out=np.zeros_like(m_pair), where=m_pair > 0.0)
    ln_y = np.log(m_y, out=np.zeros_like(m_y), where=m_y > 0.0)
    inner = ln_q - ln_pair[:, :, None] - ln_y[None, None, :]
    loss = float((coupling * np.where(mask, inner, 0.0)).sum() / _LN2)
    d_q = np.where(mask, (inner - 1.0) / _LN2, 0.0)
    return loss, d_q


# ---------------------------------------------------------------------------
# Dataset preparation and batch targets
# ---------------------------------------------------------------------------

def prepare_arrays(records: Sequence[SampleRecord], tau: float) -> dict:
    """Stack features and regularized predictive distributions."""
    if not records:
        raise DomainError("empty record set")
    x1 = np.stack([r.x1 for r in records])
    x2 = np.stack([r.x2 for r in records])
    p_mm = np.stack([threshold_regularize(r.scores_mm, tau).vector for r in records])
    p_v = np.stack([threshold_regularize(r.scores_v, tau).vector for r in records])
    p_t = np.stack([threshold_regularize(r.scores_t, tau).vector for r in records])
    return {"x1": x1, "x2": x2, "p_mm": p_mm, "p_v": p_v, "p_t": p_t}


def _one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(indices), k))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def batch_targets(p_mm: np.ndarray, p_v: np.ndarray, p_t: np.ndarray,
                  mode: str = "soft", rng: np.random.Generator | None = None):
    """Row/column marginal targets for one batch.

    Row shapes follow the vision conditionals, column shapes the text
    conditionals; each label's total mass on both sides is set to the
    batch's soft-aggregated multimodal marginal.
    """
    n, k = p_mm.shape
    if mode == "soft":
        base_r, base_c = p_v, p_t
    else:
        if rng is None:
            raise DomainError(f"target mode {mode!r} needs a random generator")
        if mode == "sample":
            cum_v = p_v.cumsum(axis=1)
            cum_t = p_t.cumsum(axis=1)
            cum_v[:, -1] = 1.0
            cum_t[:, -1] = 1.0
            draws_r = (rng.random((n, 1)) < cum_v).argmax(axis=1)
            draws_c = (rng.random((n, 1)) < cum_t).argmax(axis=1)
        elif mode == "argmax":
            draws_r = p_v.argmax(axis=1)
            draws_c = p_t.argmax(axis=1)
        else:
            raise DomainError(f"unknown target mode {mode!r}")
        base_r = _one_hot(draws_r, k)
        base_c = _one_hot(draws_c, k)

    m_y = p_mm.mean(axis=0)
    r_mass = base_r.sum(axis=0)
    c_mass = base_c.sum(axis=0)
    live = (m_y > 0.0) & (r_mass > 0.0) & (c_mass > 0.0)
    if not np.any(live):
        raise DomainError("batch has no label with mass on every target side")
    m_y = np.where(live, m_y, 0.0)
    m_y = m_y / m_y.sum()
    rows = np.zeros((n, k))
    cols = np.zeros((n, k))
    rows[:, live] = base_r[:, live] * (m_y[live] / r_mass[live])
    cols[:, live] = base_c[:, live] * (m_y[live] / c_mass[live])
    return rows, cols


def _dataset_digest(records: Sequence[SampleRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.id.encode("utf-8"))
        for arr in (rec.x1, rec.x2, rec.scores_mm, rec.scores_v, rec.scores_t):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def batch_loss(params: EncoderParams, x1b, x2b, rows, cols, cfg: TrainConfig) -> float:
    """Training objective for one batch (no gradients); used by the
    finite-difference checks."""
    loss, _ = _loss_and_grads(params, x1b, x2b, rows, cols, cfg, want_grads=False)
    return loss


def _loss_and_grads(params, x1b, x2b, rows, cols, cfg, want_grads=True):
    f1, cache1 = _encode(params, x1b, 1)
    f2, cache2 = _encode(params, x2b, 2)
    logits = np.einsum("iyd,jyd->ijy", f1, f2)
    pass_through = np.abs(logits) < cfg.logit_clip
    a = np.exp(np.clip(logits, -cfg.logit_clip, cfg.logit_clip))
    check_feasible(rows, cols)
    coupling, cache = _sinkhorn_cached(a, rows, cols, cfg.sinkhorn_iters)
    loss, d_q = _coupling_mi(coupling)
    if not want_grads:
        return loss, None
    d_a = _sinkhorn_backward(cache, d_q)
    d_logits = d_a * a * pass_through
    d_f1 = np.einsum("ijy,jyd->iyd", d_logits, f2)
    d_f2 = np.einsum("ijy,iyd->jyd", d_logits, f1)
    n1, n2 = x1b.shape[0], x2b.shape[0]
    g1 = mlp_backward(params.f1, cache1, d_f1.reshape(n1, params.k * params.embed_dim))
    g2 = mlp_backward(params.f2, cache2, d_f2.reshape(n2, params.k * params.embed_dim))
    return loss, g1.flatten() + g2.flatten()


def train(records: Sequence[SampleRecord], cfg: TrainConfig,
          labels: Sequence[int] | None = None,
          marginal_y: Pmf | None = None) -> CouplingModel:
    """Fit the coupling encoders on a record set.

    ``labels`` are per-sample draws used for the degeneracy check (and
    are implied by the multimodal predictions when omitted);
    ``marginal_y`` freezes the output marginal used later in evaluation
    (defaults to the soft aggregate over the training records). The same
    seed and data produce a bit-identical loss trace.
    """
    data = prepare_arrays(records, cfg.tau)
    n, k = data["p_mm"].shape
    if cfg.batch_size < k:
        raise DomainError(f"batch_size {cfg.batch_size} < label count {k}")
    if labels is not None:
        if len({int(v) for v in labels}) < 2:
            raise DomainError("degenerate dataset: fewer than 2 distinct labels")
    elif int((data["p_mm"].mean(axis=0) > 1e-9).sum()) < 2:
        raise DomainError("degenerate dataset: predictive mass on fewer than 2 labels")

    rng = np.random.default_rng(cfg.seed)
    params = EncoderParams.init(data["x1"].shape[1], data["x2"].shape[1], k, cfg, rng)
    tensors = params.tensors()
    adam = Adam(tensors, lr=cfg.learning_rate, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.adam_eps)

    if marginal_y is None:
        marginal_y = Pmf(data["p_mm"].mean(axis=0))

    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rows, cols = batch_targets(data["p_mm"][idx], data["p_v"][idx],
                                       data["p_t"][idx], cfg.target_mode, rng)
            loss, grads = _loss_and_grads(params, data["x1"][idx], data["x2"][idx],
                                          rows, cols, cfg)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}, batch start {start}")
            adam.step(tensors, grads)
            losses.append(loss)
            sizes.append(len(idx))
        trace.append(float(np.average(losses, weights=sizes)))

    return CouplingModel(params=params, config=cfg, marginal_y=marginal_y.probs.copy(),
                         loss_trace=np.asarray(trace), data_digest=_dataset_digest(records))


# ---------------------------------------------------------------------------
# Atom evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimateResult:
    atoms: PidAtoms                 # raw values; clamp for reporting
    i_p_joint: float
    i_p_vision: float
    i_p_text: float
    i_q: float
    sinkhorn_residual: float
    n_test: int

    def clamped(self) -> PidAtoms:
        return self.atoms.clamped()


def estimate_atoms(model: CouplingModel, test_records: Sequence[SampleRecord]) -> EstimateResult:
    """Evaluate the PID atoms on held-out records.

    I_P terms are mean KLs of regularized predictive distributions against
    the frozen output marginal; I_Q is the plug-in information of the
    projected coupling, averaged over test batches.
    """
    if not test_records:
        raise DomainError("estimate_atoms: empty test set")
    cfg = model.config
    data = prepare_arrays(test_records, cfg.tau)
    n = data["p_mm"].shape[0]
    py = model.marginal_y

    i_p_joint = float(np.mean([kl_bits(row, py) for row in data["p_mm"]]))
    i_p_vision = float(np.mean([kl_bits(row, py) for row in data["p_v"]]))
    i_p_text = float(np.mean([kl_bits(row, py) for row in data["p_t"]]))

    rng = np.random.default_rng(cfg.seed + 1)
    i_q_parts, sizes, residuals = [], [], []
    for start in range(0, n, cfg.test_batch_size):
        sl = slice(start, start + cfg.test_batch_size)
        rows, cols = batch_targets(data["p_mm"][sl], data["p_v"][sl],
                                   data["p_t"][sl], cfg.target_mode, rng)
        a = build_similarity(model.params, data["x1"][sl], data["x2"][sl])
        coupling, residual = sinkhorn_project(a, rows, cols, iters=cfg.sinkhorn_iters)
        loss, _ = _coupling_mi(coupling)
        i_q_parts.append(loss)
        sizes.append(data["p_mm"][sl].shape[0])
        residuals.append(residual)
    i_q = float(np.average(i_q_parts, weights=sizes))

    s = i_p_joint - i_q
    u1 = i_q - i_p_text
    u2 = i_q - i_p_vision
    r = i_p_vision - u1
    atoms = PidAtoms(r=r, u1=u1, u2=u2, s=s, total=i_p_joint, residuals={
        "min_raw_atom": float(min(r, u1, u2, s)),
        "sum_minus_total": float((r + u1 + u2 + s) - i_p_joint),
        "max_sinkhorn_residual": float(max(residuals)),
    })
    return EstimateResult(atoms=atoms, i_p_joint=i_p_joint, i_p_vision=i_p_vision,
                          i_p_text=i_p_text, i_q=i_q,
                          sinkhorn_residual=float(max(residuals)), n_test=n)


# ---------------------------------------------------------------------------
# Persistence: versioned little-endian binary with a bit-exact round trip
# ---------------------------------------------------------------------------

def serialize_model(model: CouplingModel) -> bytes:
    cfg_json = model.config.to_json().encode("utf-8")
    cfg_digest = hashlib.sha256(cfg_json).digest()
    params = model.params
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _FORMAT_VERSION)
    out += struct.pack("<5I", params.in1, params.in2, params.k,
                       params.embed_dim, model.config.hidden_dim)
    out += struct.pack("<Q", model.config.seed)
    out += cfg_digest
    out += struct.pack("<I", len(cfg_json)) + cfg_json
    digest_bytes = model.data_digest.encode("ascii")
    out += struct.pack("<I", len(digest_bytes)) + digest_bytes
    arrays = params.f1.flatten() + params.f2.flatten()
    arrays += [model.marginal_y, model.loss_trace]
    out += struct.pack("<I", len(arrays))
    for arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<B", arr32.ndim)
        out += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        out += arr32.tobytes()
    return bytes(out)


def save_model(model: CouplingModel, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> CouplingModel:
    """Read a model file; loading then saving reproduces the exact bytes."""
    blob = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FormatError("model file truncated")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(len(_MAGIC)) != _MAGIC:
        raise FormatError("not a coupling-model file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    in1, in2, k, embed_dim, hidden = struct.unpack("<5I", take(20))
    (seed,) = struct.unpack("<Q", take(8))
    cfg_digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_json = take(cfg_len)
    if hashlib.sha256(cfg_json).digest() != cfg_digest:
        raise FormatError("config digest mismatch")
    cfg = TrainConfig.from_json(cfg_json.decode("utf-8"))
    if cfg.seed != seed or cfg.embed_dim != embed_dim or cfg.hidden_dim != hidden:
        raise FormatError("header fields disagree with embedded config")
    (dd_len,) = struct.unpack("<I", take(4))
    data_digest = take(dd_len).decode("ascii")
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(float)
        arrays.append(arr)
    if off != len(blob):
        raise FormatError("trailing bytes in model file")
    if len(arrays) != 14:
        raise FormatError(f"expected 14 tensors, found {len(arrays)}")
    f1 = MlpParams(weights=[arrays[0], arrays[2], arrays[4]],
                   biases=[arrays[1], arrays[3], arrays[5]])
    f2 = MlpParams(weights=[arrays[6], arrays[8], arrays[10]],
                   biases=[arrays[7], arrays[9], arrays[11]])
    params = EncoderParams(f1=f1, f2=f2, in1=in1, in2=in2, k=k, embed_dim=embed_dim)
    return CouplingModel(params=params, config=cfg, marginal_y=arrays[12],
                         loss_trace=arrays[13], data_digest=data_digest)
