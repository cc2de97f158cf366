"""Multi-head relation modules over box features.

Two flavours share one code path: ``location_free`` attends on appearance
only, ``location_based`` multiplies each head's attention by a ReLU gate
computed from a sinusoidal embedding of the relative box geometry and the
frame offset.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractViolation
from .numerics import Tensor

Mode = Literal["location_free", "location_based"]
MODES = ("location_free", "location_based")

LOG_GUARD = 1e-3
MAX_WAVELENGTH = 1000.0


@dataclass
class BoxFeature:
    semantic: np.ndarray
    geometry: tuple[float, float, float, float]  # cx, cy, w, h
    frame_index: int
    objectness: float = 1.0

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.float64)
        self.geometry = tuple(float(v) for v in self.geometry)
        if len(self.geometry) != 4:
            raise ContractViolation("geometry must be (cx, cy, w, h)")
        if self.geometry[2] <= 0 or self.geometry[3] <= 0:
            raise ContractViolation(f"box width/height must be positive, got {self.geometry}")
        if not np.all(np.isfinite(self.semantic)):
            raise ContractViolation("semantic feature must be finite")
        if not 0.0 <= self.objectness <= 1.0:
            raise ContractViolation(f"objectness {self.objectness} outside [0, 1]")


@dataclass
class RelationParams:
    """Weights of one relation module.

    ``w_query``/``w_key``/``w_value`` are ``(d, d)``; head ``m`` owns rows
    ``m*d/M:(m+1)*d/M``. ``w_geo`` holds one ``embed_dim`` row per head.
    ``w_out``/``b_out`` form the trailing fully-connected + ReLU transform.
    """

    num_heads: int
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_geo: Tensor
    w_out: Tensor
    b_out: Tensor

    def __post_init__(self):
        d = self.dim
        if d % self.num_heads:
            raise ContractViolation(f"feature dim {d} not divisible by {self.num_heads} heads")
        for name in ("w_query", "w_key", "w_value", "w_out"):
            if getattr(self, name).shape != (d, d):
                raise ContractViolation(f"{name} must be {(d, d)}, got {getattr(self, name).shape}")
        if self.w_geo.shape[0] != self.num_heads:
            raise ContractViolation(f"w_geo needs one row per head, got {self.w_geo.shape}")
        if self.b_out.shape != (d,):
            raise ContractViolation(f"b_out must be ({d},), got {self.b_out.shape}")

    @property
    def dim(self) -> int:
        return self.w_query.shape[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def embed_dim(self) -> int:
        return self.w_geo.shape[1]

    @classmethod
    def init(cls, dim: int, num_heads: int, embed_dim: int, rng: np.random.Generator) -> "RelationParams":
        u = nx.uniform_init
        return cls(
            num_heads=num_heads,
            w_query=u(rng, (dim, dim), dim, "w_query"),
            w_key=u(rng, (dim, dim), dim, "w_key"),
            w_value=u(rng, (dim, dim), dim, "w_value"),
            w_geo=u(rng, (num_heads, embed_dim), embed_dim, "w_geo"),
            w_out=u(rng, (dim, dim), dim, "w_out"),
            b_out=u(rng, (dim,), dim, "b_out"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w_query, self.w_key, self.w_value, self.w_geo, self.w_out, self.b_out]

    def to_dict(self) -> dict:
        out = {"num_heads": self.num_heads}
        for name in ("w_query", "w_key", "w_value", "w_geo", "w_out", "b_out"):
            out[name] = getattr(self, name).data.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RelationParams":
        kw = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k)
              for k, v in d.items() if k != "num_heads"}
        return cls(num_heads=int(d["num_heads"]), **kw)


@dataclass
class AttentionWeights:
    heads: list[np.ndarray] = field(default_factory=list)  # each |queries| x |references|


# ---------------------------------------------------------------- geometry


def _check_geometry(geom: np.ndarray) -> None:
    if np.any(geom[:, 2] <= 0) or np.any(geom[:, 3] <= 0):
        raise ContractViolation("box width/height must be positive")


def displacement(q_geom, q_frames, r_geom, r_frames) -> np.ndarray:
    """Relative geometry of every (query, reference) pair, shape ``(n, m, 5)``.

    Components: log-scaled |dx|/w_q and |dy|/h_q (shifted so zero offset maps
    to 0), log width and height ratios, and the frame offset r - q. The
    absolute value drops the spatial sign; only the temporal term is signed.
    """
    q = np.asarray(q_geom, dtype=np.float64).reshape(-1, 4)
    r = np.asarray(r_geom, dtype=np.float64).reshape(-1, 4)
    _check_geometry(q)
    _check_geometry(r)
    qf = np.asarray(q_frames, dtype=np.float64).reshape(-1)
    rf = np.asarray(r_frames, dtype=np.float64).reshape(-1)
    qcx, qcy, qw, qh = (q[:, i:i + 1] for i in range(4))
    rcx, rcy, rw, rh = (r[None, :, i] for i in range(4))
    log_guard = np.log(LOG_GUARD)
    dx = np.log(np.abs(rcx - qcx) / qw + LOG_GUARD) - log_guard
    dy = np.log(np.abs(rcy - qcy) / qh + LOG_GUARD) - log_guard
    dw = np.log(rw / qw)
    dh = np.log(rh / qh)
    dt = rf[None, :] - qf[:, None]
    return np.stack([dx, dy, dw, dh, dt], axis=-1)


def _wavelengths(embed_dim: int) -> np.ndarray:
    n_freq = max(1, round(embed_dim / 10))
    if n_freq == 1:
        return np.array([1.0])
    return MAX_WAVELENGTH ** (np.arange(n_freq) / (n_freq - 1))


def embed_displacement(disp: np.ndarray, embed_dim: int) -> np.ndarray:
    """Sinusoidal embedding of ``(..., 5)`` displacement vectors."""
    if embed_dim < 8 or embed_dim % 2:
        raise ContractViolation(f"embed_dim must be even and >= 8, got {embed_dim}")
    lam = _wavelengths(embed_dim)
    phase = disp[..., :, None] / lam  # (..., 5, n_freq)
    per_comp = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    flat = per_comp.reshape(*disp.shape[:-1], -1)
    width = flat.shape[-1]
    if width >= embed_dim:
        return flat[..., :embed_dim]
    pad = np.zeros(disp.shape[:-1] + (embed_dim - width,))
    return np.concatenate([flat, pad], axis=-1)


def pairwise_embedding(q_geom, q_frames, r_geom, r_frames, embed_dim: int) -> np.ndarray:
    return embed_displacement(displacement(q_geom, q_frames, r_geom, r_frames), embed_dim)


def relative_position_embedding(query: BoxFeature, reference: BoxFeature, embed_dim: int) -> np.ndarray:
    emb = pairwise_embedding(
        [query.geometry], [query.frame_index], [reference.geometry], [reference.frame_index], embed_dim
    )
    return emb[0, 0]


# ---------------------------------------------------------------- core


def head_weights(q_feats: Tensor, r_feats: Tensor, params: RelationParams,
                 embedding: np.ndarray | None) -> tuple[list[Tensor], Tensor]:
    """Per-head attention weights and the value projection of the references.

    ``embedding`` is the ``(n, m, embed_dim)`` pair embedding for the
    location-based variant, or ``None`` for location-free attention.
    """
    n, m = q_feats.shape[0], r_feats.shape[0]
    if m == 0:
        raise ContractViolation("relation module needs a non-empty reference pool")
    if q_feats.shape[1] != params.dim or r_feats.shape[1] != params.dim:
        raise ContractViolation(
            f"feature dims {q_feats.shape[1]}/{r_feats.shape[1]} != params dim {params.dim}"
        )
    dk = params.head_dim
    queries = nx.matmul(q_feats, nx.transpose(params.w_query))
    keys = nx.matmul(r_feats, nx.transpose(params.w_key))
    values = nx.matmul(r_feats, nx.transpose(params.w_value))
    gate_pre = None
    if embedding is not None:
        if embedding.shape != (n, m, params.embed_dim):
            raise ContractViolation(f"embedding shape {embedding.shape} != {(n, m, params.embed_dim)}")
        flat = Tensor(embedding.reshape(n * m, params.embed_dim))
        gate_pre = nx.matmul(flat, nx.transpose(params.w_geo))  # (n*m, M)
    weights = []
    inv_sqrt = 1.0 / np.sqrt(dk)
    for h in range(params.num_heads):
        qh = nx.slice_cols(queries, h * dk, (h + 1) * dk)
        kh = nx.slice_cols(keys, h * dk, (h + 1) * dk)
        logits = nx.scale(nx.matmul(qh, nx.transpose(kh)), inv_sqrt)
        if gate_pre is None:
            weights.append(nx.softmax_rows(logits))
        else:
            gate = nx.relu(nx.reshape(nx.slice_cols(gate_pre, h, h + 1), (n, m)))
            weights.append(nx.gated_softmax_rows(logits, gate))
    return weights, values


def relate(q_feats: Tensor, r_feats: Tensor, params: RelationParams,
           embedding: np.ndarray | None = None) -> Tensor:
    """Augment every query row with attended reference values, then apply h."""
    weights, values = head_weights(q_feats, r_feats, params, embedding)
    dk = params.head_dim
    heads = [nx.matmul(w, nx.slice_cols(values, h * dk, (h + 1) * dk)) for h, w in enumerate(weights)]
    augmented = nx.add(q_feats, nx.concat_cols(heads))
    return nx.linear(augmented, params.w_out, params.b_out, "relu")


# ---------------------------------------------------------------- box-list API


def _stack(boxes: Sequence[BoxFeature]):
    feats = np.stack([b.semantic for b in boxes]) if boxes else np.zeros((0, 0))
    geom = np.array([b.geometry for b in boxes], dtype=np.float64).reshape(-1, 4)
    frames = np.array([b.frame_index for b in boxes], dtype=np.int64)
    return feats, geom, frames


def _embedding_for(queries, references, params: RelationParams, mode: str):
    if mode not in MODES:
        raise ContractViolation(f"unknown relation mode {mode!r}")
    if mode == "location_free":
        return None
    _, qg, qf = _stack(queries)
    _, rg, rf = _stack(references)
    return pairwise_embedding(qg, qf, rg, rf, params.embed_dim)


def attention_weights(queries: Sequence[BoxFeature], references: Sequence[BoxFeature],
                      params: RelationParams, mode: Mode) -> AttentionWeights:
    if not references:
        raise ContractViolation("relation module needs a non-empty reference pool")
    emb = _embedding_for(queries, references, params, mode)
    with nx.no_tape():
        weights, _ = head_weights(Tensor(_stack(queries)[0]), Tensor(_stack(references)[0]), params, emb)
    return AttentionWeights([w.data.copy() for w in weights])


def relation_module(queries: Sequence[BoxFeature], references: Sequence[BoxFeature],
                    params: RelationParams, mode: Mode) -> list[BoxFeature]:
    if not references:
        raise ContractViolation("relation module needs a non-empty reference pool")
    emb = _embedding_for(queries, references, params, mode)
    out = relate(Tensor(_stack(queries)[0]), Tensor(_stack(references)[0]), params, emb)
    return [replace(q, semantic=row.copy()) for q, row in zip(queries, out.data)]
