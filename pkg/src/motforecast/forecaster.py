"""Recurrent bounding-box forecaster.

A GRU encodes the last ``p`` boxes and velocities, a past decoder reconstructs
them, and a future decoder driven by the fused box/context feature emits ``q``
velocities that the trajectory-concatenation layer turns into boxes.

Everything is plain numpy in float64 with a hand-written backward pass, so the
gradients can be checked against finite differences.

Shapes used below: ``B`` batch, ``H`` hidden width, ``F`` feature width
(``phi_B`` and ``phi_E``), ``C`` context width.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import BoundingBox, floor_size
from .motion import ForecastHorizon, MotionPredictor, NotReadyError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CONCAT_MODES = ("corrected", "literal")


@dataclass
class ForecasterConfig:
    p: int = 10
    q: int = 60
    hidden: int = 256
    feat_dim: int = 256
    embed_dim: int = 256
    pos_scale: float = 500.0
    vel_scale: float = 5.0
    concat_mode: str = "corrected"

    @property
    def concat_dim(self) -> int:
        return 2 * self.feat_dim

    def violations(self) -> list[str]:
        errs = []
        if self.p < 2:
            errs.append(f"forecaster.p must be >= 2 (got {self.p})")
        if self.q < 1:
            errs.append(f"forecaster.q must be >= 1 (got {self.q})")
        for name in ("hidden", "feat_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                errs.append(f"forecaster.{name} must be > 0")
        if self.pos_scale <= 0 or self.vel_scale <= 0:
            errs.append("forecaster scales must be > 0")
        if self.concat_mode not in CONCAT_MODES:
            errs.append(f"forecaster.concat_mode must be one of {CONCAT_MODES}")
        return errs

    def validate(self) -> "ForecasterConfig":
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self


def desk_config(**overrides) -> ForecasterConfig:
    """Small widths that train on one CPU core in minutes."""
    base = dict(hidden=48, feat_dim=48, embed_dim=8)
    base.update(overrides)
    return ForecasterConfig(**base)


# ---------------------------------------------------------------- parameters

def _param_shapes(cfg: ForecasterConfig) -> dict[str, tuple[int, ...]]:
    H, F, C = cfg.hidden, cfg.feat_dim, cfg.embed_dim
    return {
        "enc_Wx": (3 * H, 8), "enc_Wh": (3 * H, H), "enc_bx": (3 * H,), "enc_bh": (3 * H,),
        "encfc_W": (F, H), "encfc_b": (F,),
        "emb_W": (F, C), "emb_b": (F,),
        "pd_Wx": (3 * H, F), "pd_Wh": (3 * H, H), "pd_bx": (3 * H,), "pd_bh": (3 * H,),
        "pd_Wo": (8, H), "pd_bo": (8,),
        "fuse_W": (2 * F, 2 * F), "fuse_b": (2 * F,),
        "fd_Wx": (3 * H, 2 * F), "fd_Wh": (3 * H, H), "fd_bx": (3 * H,), "fd_bh": (3 * H,),
        "fd_Wo": (4, H), "fd_bo": (4,),
        "log_vars": (3,),
    }


# Indices into ``log_vars``; only the forecast term is trained here.
S_DET, S_ID, S_FOR = 0, 1, 2


@dataclass
class ForecasterParams:
    config: ForecasterConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ForecasterParams":
        return ForecasterParams(ForecasterConfig(**asdict(self.config)),
                                {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config),
                "shapes": {k: list(v.shape) for k, v in self.tensors.items()}}
        # np.savez stamps entries with the wall clock; fixed timestamps keep the bytes reproducible
        arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **self.tensors}
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w") as fh:
                    np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k], dtype=np.float64).tobytes())
        return h.hexdigest()

    @classmethod
    def load(cls, path) -> "ForecasterParams":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            cfg = ForecasterConfig(**meta["config"]).validate()
            tensors = {k: data[k].astype(np.float64) for k in data.files if k != "__meta__"}
        expected = _param_shapes(cfg)
        bad = [f"{k}: expected {expected[k]}, got {tensors[k].shape if k in tensors else 'missing'}"
               for k in expected if k not in tensors or tensors[k].shape != expected[k]]
        extra = sorted(set(tensors) - set(expected))
        if bad or extra:
            raise ValueError(f"{path}: checkpoint does not match config: {bad + extra}")
        return cls(cfg, tensors)


def init_params(cfg: ForecasterConfig, seed: int = 0, log_var_init: float = 0.0) -> ForecasterParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        if name == "log_vars":
            tensors[name] = np.full(shape, float(log_var_init))
            continue
        if name.startswith("emb"):
            fan = cfg.embed_dim
        elif name.startswith("fuse"):
            fan = 2 * cfg.feat_dim
        else:
            fan = cfg.hidden
        k = 1.0 / math.sqrt(fan)
        tensors[name] = rng.uniform(-k, k, size=shape)
    return ForecasterParams(cfg, tensors)


def zero_params(cfg: ForecasterConfig) -> ForecasterParams:
    return ForecasterParams(cfg, {k: np.zeros(s) for k, s in _param_shapes(cfg).items()})


# ------------------------------------------------------------------ samples

@dataclass
class PastSequence:
    """Up to ``p`` box+velocity rows, oldest first, zero-padded at the front."""

    steps: np.ndarray  # (p, 8)
    valid_len: int

    @classmethod
    def from_boxes(cls, boxes: Sequence[Sequence[float]], p: int,
                   velocities: Optional[Sequence[Sequence[float]]] = None) -> "PastSequence":
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if velocities is None:
            vel = np.vstack([np.zeros((min(len(arr), 1), 4)), np.diff(arr, axis=0)])
        else:
            vel = np.asarray(velocities, dtype=np.float64).reshape(-1, 4)
        rows = np.hstack([arr, vel])[-p:]
        steps = np.zeros((p, 8))
        if len(rows):
            steps[p - len(rows):] = rows
        return cls(steps, len(rows))

    @property
    def p(self) -> int:
        return len(self.steps)

    @property
    def last_box(self) -> BoundingBox:
        return BoundingBox(*map(float, self.steps[-1, :4]))

    def mask(self) -> np.ndarray:
        m = np.zeros(self.p)
        m[self.p - self.valid_len:] = 1.0
        return m

    def padded(self, extra: int) -> "PastSequence":
        return PastSequence(np.vstack([np.zeros((extra, 8)), self.steps]), self.valid_len)


@dataclass
class TrainingSample:
    past: PastSequence
    future_boxes: np.ndarray  # (q, 4), zero beyond future_valid_len
    future_valid_len: int
    last_box: BoundingBox
    context: np.ndarray

    def __post_init__(self):
        if self.future_valid_len < 1:
            raise ValueError("future_valid_len must be >= 1")


@dataclass
class Batch:
    X: np.ndarray        # (B, p, 8) pixels
    pmask: np.ndarray    # (B, p)
    F: np.ndarray        # (B, q, 4) pixels
    fmask: np.ndarray    # (B, q)
    last: np.ndarray     # (B, 4)
    ctx: np.ndarray      # (B, C)

    def __len__(self) -> int:
        return len(self.X)


def collate(samples: Sequence[TrainingSample], cfg: ForecasterConfig) -> Batch:
    B = len(samples)
    X = np.zeros((B, cfg.p, 8))
    pmask = np.zeros((B, cfg.p))
    Fb = np.zeros((B, cfg.q, 4))
    fmask = np.zeros((B, cfg.q))
    last = np.zeros((B, 4))
    ctx = np.zeros((B, cfg.embed_dim))
    for i, s in enumerate(samples):
        n = min(s.past.valid_len, cfg.p)
        X[i, cfg.p - n:] = s.past.steps[s.past.p - n:]
        pmask[i, cfg.p - n:] = 1.0
        m = min(s.future_valid_len, cfg.q)
        Fb[i, :m] = s.future_boxes[:m]
        fmask[i, :m] = 1.0
        last[i] = s.last_box
        if s.context is not None and np.size(s.context):
            c = np.asarray(s.context, dtype=np.float64).ravel()
            if c.shape[0] != cfg.embed_dim:
                raise ValueError(f"context width {c.shape[0]} != embed_dim {cfg.embed_dim}")
            ctx[i] = c
    return Batch(X, pmask, Fb, fmask, last, ctx)


# ---------------------------------------------------------------- GRU cell

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gru_step(gx: np.ndarray, h: np.ndarray, Wh: np.ndarray, bh: np.ndarray):
    """One GRU update with the input projection ``gx = x Wx^T + bx`` precomputed."""
    H = h.shape[1]
    gh = h @ Wh.T + bh
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, r, z, n, gh[:, 2 * H:])


def _gru_step_back(dh_new: np.ndarray, cache, Wh: np.ndarray):
    h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    da_n = dn * (1.0 - n * n)
    da_r = da_n * ghn * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dgx = np.hstack([da_r, da_z, da_n])
    dgh = np.hstack([da_r, da_z, da_n * r])
    dh = dh_new * z + dgh @ Wh
    return dgx, dgh, dh


# ------------------------------------------------------------------ forward

def _scale8(cfg: ForecasterConfig) -> np.ndarray:
    return np.r_[np.full(4, cfg.pos_scale), np.full(4, cfg.vel_scale)]


def _encode(params: ForecasterParams, X: np.ndarray, pmask: np.ndarray):
    cfg = params.config
    T = params.tensors
    Xn = X / _scale8(cfg)
    gx_all = Xn @ T["enc_Wx"].T + T["enc_bx"]
    h = np.zeros((X.shape[0], cfg.hidden))
    caches = []
    for t in range(X.shape[1]):
        m = pmask[:, t:t + 1]
        h_new, c = _gru_step(gx_all[:, t], h, T["enc_Wh"], T["enc_bh"])
        caches.append((c, m))
        h = m * h_new + (1.0 - m) * h
    a_B = h @ T["encfc_W"].T + T["encfc_b"]
    return h, np.maximum(a_B, 0.0), (Xn, caches, a_B)


def _embed(params: ForecasterParams, ctx: np.ndarray):
    T = params.tensors
    a_E = ctx @ T["emb_W"].T + T["emb_b"]
    return np.maximum(a_E, 0.0), a_E


def _decode_past(params: ForecasterParams, h_final, phi_B, p: int):
    """Reconstruct the past newest-first; returned oldest-first in pixels."""
    T = params.tensors
    gx = phi_B @ T["pd_Wx"].T + T["pd_bx"]
    g = h_final
    caches, states = [], []
    out = np.empty((h_final.shape[0], p, 8))
    scale = _scale8(params.config)
    for j in range(p):
        g, c = _gru_step(gx, g, T["pd_Wh"], T["pd_bh"])
        caches.append(c)
        states.append(g)
        out[:, p - 1 - j] = (g @ T["pd_Wo"].T + T["pd_bo"]) * scale
    return out, (caches, states)


def _decode_future(params: ForecasterParams, h_final, phi_B, phi_E, q: int):
    T = params.tensors
    phi_C = np.hstack([phi_B, phi_E])
    a_C = phi_C @ T["fuse_W"].T + T["fuse_b"]
    u = np.maximum(a_C, 0.0)
    gx = u @ T["fd_Wx"].T + T["fd_bx"]
    k = h_final
    caches, states = [], []
    vel = np.empty((h_final.shape[0], q, 4))
    for i in range(q):
        k, c = _gru_step(gx, k, T["fd_Wh"], T["fd_bh"])
        caches.append(c)
        states.append(k)
        vel[:, i] = (k @ T["fd_Wo"].T + T["fd_bo"]) * params.config.vel_scale
    return vel, (phi_C, a_C, u, caches, states)


def _concat(last: np.ndarray, vel: np.ndarray, mode: str) -> np.ndarray:
    Z = np.cumsum(vel, axis=-2)
    if mode == "literal":
        i = np.arange(1, vel.shape[-2] + 1, dtype=np.float64)[:, None]
        return last[..., None, :] + i * Z
    return last[..., None, :] + Z


# ------------------------------------------------------------ public ops

def encode_past(past: PastSequence, params: ForecasterParams):
    """Return ``(h_final, phi_B)`` for one past sequence."""
    if past.valid_len < 2:
        raise NotReadyError("forecasting needs at least two past boxes")
    h, phi_B, _ = _encode(params, past.steps[None], past.mask()[None])
    return h[0], phi_B[0]


def encode_embedding(context, params: ForecasterParams) -> np.ndarray:
    c = np.asarray(context, dtype=np.float64).ravel()
    if c.shape[0] != params.config.embed_dim:
        raise ValueError(f"context width {c.shape[0]} != embed_dim {params.config.embed_dim}")
    return _embed(params, c[None])[0][0]


def decode_past(h_final, phi_B, params: ForecasterParams) -> np.ndarray:
    """(p, 8) reconstructed boxes+velocities, oldest first."""
    out, _ = _decode_past(params, np.atleast_2d(h_final), np.atleast_2d(phi_B), params.config.p)
    return out[0]


def decode_future(h_final, phi_B, phi_E, params: ForecasterParams) -> np.ndarray:
    """(q, 4) per-frame velocities."""
    vel, _ = _decode_future(params, np.atleast_2d(h_final), np.atleast_2d(phi_B),
                            np.atleast_2d(phi_E), params.config.q)
    return vel[0]


def trajectory_concat(last_box: Sequence[float], velocities, mode: str = "corrected",
                      origin_frame: int = 0) -> ForecastHorizon:
    if mode not in CONCAT_MODES:
        raise ValueError(f"mode must be one of {CONCAT_MODES}")
    vel = np.asarray(velocities, dtype=np.float64).reshape(-1, 4)
    boxes = _concat(np.asarray(last_box, dtype=np.float64), vel, mode)
    return ForecastHorizon(floor_size(boxes), origin_frame)


def forecast(past: PastSequence, context, params: ForecasterParams,
             origin_frame: int = 0) -> ForecastHorizon:
    cfg = params.config
    if context is None:
        context = np.zeros(cfg.embed_dim)
    if past.p != cfg.p:
        if past.p > cfg.p:
            past = PastSequence(past.steps[-cfg.p:], min(past.valid_len, cfg.p))
        else:
            past = past.padded(cfg.p - past.p)
    h, phi_B = encode_past(past, params)
    phi_E = encode_embedding(context, params)
    vel = decode_future(h, phi_B, phi_E, params)
    return trajectory_concat(past.last_box, vel, cfg.concat_mode, origin_frame)


def forecast_batch(pasts: Sequence[PastSequence], contexts, params: ForecasterParams) -> np.ndarray:
    """Vectorized :func:`forecast`; returns (n, q, 4) boxes."""
    cfg = params.config
    if not len(pasts):
        return np.zeros((0, cfg.q, 4))
    samples = [TrainingSample(ps, np.zeros((cfg.q, 4)), 1, ps.last_box,
                              None if contexts is None else contexts[i]) for i, ps in enumerate(pasts)]
    if any(ps.valid_len < 2 for ps in pasts):
        raise NotReadyError("forecasting needs at least two past boxes")
    b = collate(samples, cfg)
    h, phi_B, _ = _encode(params, b.X, b.pmask)
    phi_E, _ = _embed(params, b.ctx)
    vel, _ = _decode_future(params, h, phi_B, phi_E, cfg.q)
    return floor_size(_concat(b.last, vel, cfg.concat_mode))


# ------------------------------------------------------------------ losses

def loss_past(truth, pred, mask=None) -> float:
    """Masked L1 between true and reconstructed past rows, per valid entry.

    ``truth`` may be a PastSequence or a list of them (``pred`` matching);
    otherwise arrays of shape (K, p, 8) with ``mask`` (K, p).
    """
    if isinstance(truth, PastSequence):
        truth = [truth]
        pred = [pred]
    if mask is None:
        mask = np.array([t.mask() for t in truth])
        truth = np.array([t.steps for t in truth])
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64).reshape(truth.shape)
    mask = np.asarray(mask, dtype=np.float64).reshape(truth.shape[:2])
    denom = mask.sum() * 8
    if denom == 0:
        raise ValueError("no valid past steps in batch")
    return math.fsum((np.abs(truth - pred) * mask[..., None]).ravel()) / float(denom)


def loss_future(truth_boxes, pred_boxes, valid_len) -> float:
    """Masked L1 over the first ``valid_len`` future boxes of each sample."""
    truth = np.asarray(truth_boxes, dtype=np.float64)
    pred = np.asarray(getattr(pred_boxes, "boxes", pred_boxes), dtype=np.float64)
    if truth.ndim == 2:
        truth, pred, valid_len = truth[None], pred[None], [valid_len]
    valid = np.asarray(valid_len).ravel()
    if np.any(valid < 1):
        raise ValueError("valid_len must be >= 1")
    q = min(truth.shape[1], pred.shape[1])
    mask = (np.arange(q)[None, :] < valid[:, None]).astype(np.float64)
    diff = np.abs(truth[:, :q] - pred[:, :q]) * mask[..., None]
    return math.fsum(diff.ravel()) / float(mask.sum() * 4)


def forecast_loss(l_past: float, l_future: float) -> float:
    return l_past + l_future


def uncertainty_loss(losses: Iterable, weights: Iterable[float]) -> float:
    """Half of sum(exp(-s) * L + s); ``losses`` may be values or (name, value) pairs."""
    vals = [l[1] if isinstance(l, tuple) else l for l in losses]
    s = list(weights)
    if len(vals) != len(s):
        raise ValueError("losses and weights must have equal length")
    # fsum is exactly rounded, so the result does not depend on pair order
    return 0.5 * math.fsum(t for li, si in zip(vals, s) for t in (math.exp(-si) * li, si))


# --------------------------------------------------------- loss + gradient

@dataclass
class LossBreakdown:
    total: float
    l_past: float
    l_future: float

    @property
    def l_for(self) -> float:
        return self.l_past + self.l_future


def loss_and_grad(params: ForecasterParams, batch: Batch, need_grad: bool = True):
    """Uncertainty-weighted forecast loss on a batch and its gradient w.r.t. every tensor."""
    cfg = params.config
    T = params.tensors
    p, q = batch.X.shape[1], batch.F.shape[1]

    h, phi_B, (Xn, enc_caches, a_B) = _encode(params, batch.X, batch.pmask)
    phi_E, a_E = _embed(params, batch.ctx)
    past_pred, (pd_caches, pd_states) = _decode_past(params, h, phi_B, p)
    vel, (phi_C, a_C, u, fd_caches, fd_states) = _decode_future(params, h, phi_B, phi_E, q)
    boxes = _concat(batch.last, vel, cfg.concat_mode)

    n_past = batch.pmask.sum() * 8
    n_fut = batch.fmask.sum() * 4
    if n_past == 0 or n_fut == 0:
        raise ValueError("batch has no valid past or future steps")
    d_past = past_pred - batch.X
    d_fut = boxes - batch.F
    # fsum is exactly rounded, so padding zeros cannot perturb the loss
    l_past = math.fsum((np.abs(d_past) * batch.pmask[..., None]).ravel()) / float(n_past)
    l_fut = math.fsum((np.abs(d_fut) * batch.fmask[..., None]).ravel()) / float(n_fut)
    l_for = l_past + l_fut
    s = T["log_vars"][S_FOR]
    w = math.exp(-s)
    total = 0.5 * (w * l_for + s)
    result = LossBreakdown(total, l_past, l_fut)
    if not need_grad:
        return result, None

    G = {k: np.zeros_like(v) for k, v in T.items()}
    G["log_vars"][S_FOR] = 0.5 * (1.0 - w * l_for)
    dl = 0.5 * w

    # future branch
    dboxes = np.sign(d_fut) * batch.fmask[..., None] * (dl / n_fut)
    if cfg.concat_mode == "literal":
        dZ = dboxes * np.arange(1, q + 1, dtype=np.float64)[:, None]
    else:
        dZ = dboxes
    dvel = np.flip(np.cumsum(np.flip(dZ, axis=1), axis=1), axis=1)
    dout = dvel * cfg.vel_scale  # (B, q, 4)
    H = cfg.hidden
    dk = np.zeros_like(h)
    dgx_sum = np.zeros((h.shape[0], 3 * H))
    dgh_list, hprev_list = [], []
    for i in reversed(range(q)):
        G["fd_Wo"] += dout[:, i].T @ fd_states[i]
        G["fd_bo"] += dout[:, i].sum(0)
        dk = dk + dout[:, i] @ T["fd_Wo"]
        dgx, dgh, dk = _gru_step_back(dk, fd_caches[i], T["fd_Wh"])
        dgx_sum += dgx
        dgh_list.append(dgh)
        hprev_list.append(fd_caches[i][0])
    dgh_all = np.concatenate(dgh_list)
    G["fd_Wh"] += dgh_all.T @ np.concatenate(hprev_list)
    G["fd_bh"] += dgh_all.sum(0)
    G["fd_Wx"] += dgx_sum.T @ u
    G["fd_bx"] += dgx_sum.sum(0)
    du = dgx_sum @ T["fd_Wx"]
    da_C = du * (a_C > 0)
    G["fuse_W"] += da_C.T @ phi_C
    G["fuse_b"] += da_C.sum(0)
    dphi_C = da_C @ T["fuse_W"]
    F = cfg.feat_dim
    dphi_B = dphi_C[:, :F].copy()
    dphi_E = dphi_C[:, F:]
    dh = dk

    # past decoder (ran newest-first)
    dpred = np.sign(d_past) * batch.pmask[..., None] * (dl / n_past)
    scale = _scale8(cfg)
    dg = np.zeros_like(h)
    dgx_sum = np.zeros((h.shape[0], 3 * H))
    dgh_list, hprev_list = [], []
    for j in reversed(range(p)):
        dout_j = dpred[:, p - 1 - j] * scale
        G["pd_Wo"] += dout_j.T @ pd_states[j]
        G["pd_bo"] += dout_j.sum(0)
        dg = dg + dout_j @ T["pd_Wo"]
        dgx, dgh, dg = _gru_step_back(dg, pd_caches[j], T["pd_Wh"])
        dgx_sum += dgx
        dgh_list.append(dgh)
        hprev_list.append(pd_caches[j][0])
    dgh_all = np.concatenate(dgh_list)
    G["pd_Wh"] += dgh_all.T @ np.concatenate(hprev_list)
    G["pd_bh"] += dgh_all.sum(0)
    G["pd_Wx"] += dgx_sum.T @ phi_B
    G["pd_bx"] += dgx_sum.sum(0)
    dphi_B += dgx_sum @ T["pd_Wx"]
    dh = dh + dg

    # context branch
    da_E = dphi_E * (a_E > 0)
    G["emb_W"] += da_E.T @ batch.ctx
    G["emb_b"] += da_E.sum(0)

    # encoder head and recurrence
    da_B = dphi_B * (a_B > 0)
    G["encfc_W"] += da_B.T @ h
    G["encfc_b"] += da_B.sum(0)
    dh = dh + da_B @ T["encfc_W"]
    dgx_steps = np.zeros((h.shape[0], p, 3 * H))
    dgh_list, hprev_list = [], []
    for t in reversed(range(p)):
        cache, m = enc_caches[t]
        dgx, dgh, dh_prev = _gru_step_back(m * dh, cache, T["enc_Wh"])
        dgx_steps[:, t] = dgx
        dgh_list.append(dgh)
        hprev_list.append(cache[0])
        dh = (1.0 - m) * dh + dh_prev
    dgh_all = np.concatenate(dgh_list)
    G["enc_Wh"] += dgh_all.T @ np.concatenate(hprev_list)
    G["enc_bh"] += dgh_all.sum(0)
    G["enc_Wx"] += np.einsum("btg,bti->gi", dgx_steps, Xn)
    G["enc_bx"] += dgx_steps.sum((0, 1))
    return result, G


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    lr_decayed: float = 1e-5
    decay_epoch: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: Optional[float] = 10.0
    seed: int = 0
    log_var_init: float = 0.0

    def violations(self) -> list[str]:
        errs = []
        if self.epochs < 1:
            errs.append("training.epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("training.batch_size must be >= 1")
        if self.lr < 0 or self.lr_decayed < 0:
            errs.append("training learning rates must be >= 0")
        if not -2.0 <= self.log_var_init <= 5.0:
            errs.append("training.log_var_init must lie in [-2, 5]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append("training Adam betas must lie in [0, 1)")
        return errs

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_decayed


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(epochs=30, batch_size=32, lr=3e-3, lr_decayed=3e-4, decay_epoch=20)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    l_for: float
    lr: float


class Adam:
    def __init__(self, params: ForecasterParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ForecasterParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    pass


def train(samples: Sequence[TrainingSample], config: ForecasterConfig,
          settings: Optional[TrainConfig] = None, params: Optional[ForecasterParams] = None,
          ) -> tuple[ForecasterParams, list[EpochLog]]:
    """Adam on the uncertainty-weighted forecast loss; returns params and per-epoch log."""
    settings = settings or TrainConfig()
    errs = config.violations() + settings.violations()
    if errs:
        raise ValueError("; ".join(errs))
    if not samples:
        raise ValueError("training set is empty")
    params = params.copy() if params is not None else init_params(config, settings.seed,
                                                                  settings.log_var_init)
    rng = np.random.default_rng(settings.seed)
    batch_all = collate(samples, config)
    opt = Adam(params, settings.beta1, settings.beta2, settings.adam_eps)
    history = []
    n = len(samples)
    for epoch in range(settings.epochs):
        lr = settings.lr_at(epoch)
        order = rng.permutation(n)
        tot = lfor = 0.0
        for b0 in range(0, n, settings.batch_size):
            idx = order[b0:b0 + settings.batch_size]
            batch = Batch(*(a[idx] for a in (batch_all.X, batch_all.pmask, batch_all.F,
                                               batch_all.fmask, batch_all.last, batch_all.ctx)))
            res, grads = loss_and_grad(params, batch)
            if not math.isfinite(res.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {b0}: sample indices {idx.tolist()}")
            if settings.clip_norm:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > settings.clip_norm:
                    for g in grads.values():
                        g *= settings.clip_norm / norm
            opt.step(params, grads, lr)
            if not params.all_finite():
                raise TrainingDiverged(
                    f"non-finite weights after epoch {epoch}, batch starting {b0}: sample indices {idx.tolist()}")
            tot += res.total * len(idx)
            lfor += res.l_for * len(idx)
        history.append(EpochLog(epoch + 1, tot / n, lfor / n, lr))
        log.info("epoch %d loss %.5f l_for %.4f lr %g", epoch + 1, tot / n, lfor / n, lr)
    return params, history


def write_training_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,l_for,lr\n")
        for e in history:
            fh.write(f"{e.epoch},{e.loss:.8f},{e.l_for:.8f},{e.lr:g}\n")


def samples_from_tracks(tracks: dict[int, list[tuple[int, Sequence[float]]]], cfg: ForecasterConfig,
                        contexts: Optional[dict[int, np.ndarray]] = None, stride: int = 1,
                        full_future: bool = False) -> list[TrainingSample]:
    """Sliding windows over ground-truth tracks.

    ``tracks`` maps an id to ``(frame, box)`` pairs. Tracks are split at frame
    gaps; each anchor needs two past boxes and one future box.
    """
    out = []
    for tid in sorted(tracks):
        rows = sorted(tracks[tid], key=lambda r: r[0])
        for seg in _contiguous(rows):
            frames = [f for f, _ in seg]
            boxes = np.asarray([b for _, b in seg], dtype=np.float64)
            vel = np.vstack([np.zeros((1, 4)), np.diff(boxes, axis=0)])
            for a in range(2, len(seg), stride):
                n_fut = min(cfg.q, len(seg) - a)
                if full_future and n_fut < cfg.q:
                    break
                past = PastSequence.from_boxes(boxes[max(0, a - cfg.p):a], cfg.p,
                                               vel[max(0, a - cfg.p):a])
                fut = np.zeros((cfg.q, 4))
                fut[:n_fut] = boxes[a:a + n_fut]
                ctx = None
                if contexts is not None:
                    ctx = contexts.get(frames[a])
                if ctx is None:
                    ctx = np.zeros(cfg.embed_dim)
                out.append(TrainingSample(past, fut, n_fut, past.last_box, ctx))
    return out


def _contiguous(rows):
    seg = []
    for f, b in rows:
        if seg and f != seg[-1][0] + 1:
            yield seg
            seg = []
        seg.append((f, b))
    if seg:
        yield seg


# ------------------------------------------------------- tracker integration

class LearnedPredictor(MotionPredictor):
    """Wraps trained params behind the per-track predictor interface."""

    name = "learned"

    def __init__(self, params: ForecasterParams):
        super().__init__()
        self.params = params
        self._rows: list[np.ndarray] = []

    def observe(self, box, gap: int = 1) -> None:
        box = np.asarray(box, dtype=np.float64)
        vel = np.zeros(4) if not self._rows else (box - self._rows[-1][:4]) / max(gap, 1)
        self._rows.append(np.r_[box, vel])
        del self._rows[:-self.params.config.p]
        self.n_observed += 1

    def past(self) -> PastSequence:
        rows = np.asarray(self._rows)
        return PastSequence.from_boxes(rows[:, :4], self.params.config.p, rows[:, 4:])

    def predict(self, q: int, context=None, origin_frame: int = 0) -> ForecastHorizon:
        if not self.ready:
            raise NotReadyError("learned predictor needs two observations")
        hz = forecast(self.past(), context, self.params, origin_frame)
        if q <= len(hz):
            return ForecastHorizon(hz.boxes[:q], origin_frame)
        # extend beyond the trained horizon at the last predicted rate
        extra = np.arange(1, q - len(hz) + 1)[:, None] * (hz.boxes[-1] - hz.boxes[-2] if len(hz) > 1 else 0)
        return ForecastHorizon(floor_size(np.vstack([hz.boxes, hz.boxes[-1] + extra])), origin_frame)

    def reset(self) -> None:
        super().reset()
        self._rows = []
