"""Region dependency modeling: attention over region embeddings.

Point features are mean-pooled per region, passed through a stack of
multi-head self-attention layers whose logits carry a contextual relative
position bias, and the enhanced region vectors are concatenated back onto
their member points before a two-layer prediction head.

Relative positions between region centers are quantised per axis into ``L``
bins of width ``t`` (offsets beyond ``max_rel`` clamp to the outermost bins).
Each axis owns a learnable ``L x d`` table; the positional embedding of a pair
is the sum of its three table rows and the bias for head ``h`` is the dot
product of the query with that embedding's head slice, scaled like ``QK^T``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from ._io import write_text_atomic
from .errors import ConfigError, StateError
from .ssre import RegionPartition
from .tensor import (
    ParamStore,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    relu,
    softmax_rows,
    softmax_rows_backward,
)

PREFIX = "rdm."


@dataclass(frozen=True)
class RdmConfig:
    dim: int = 128
    heads: int = 8
    layers: int = 3
    num_classes: int = 6
    t: float = 0.02
    max_rel: float = 2.0
    plain_block: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not self.t > 0 or not self.max_rel > 0:
            raise ConfigError("t and max_rel must be positive")
        if self.num_bins % 2:
            raise ConfigError(f"2*max_rel/t must give an even bin count, got {self.num_bins}")

    @property
    def num_bins(self) -> int:
        return int(round(2.0 * self.max_rel / self.t))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def shapes(self) -> dict:
        d, L = self.dim, self.num_bins
        out = {}
        for i in range(self.layers):
            p = f"layer{i}."
            out.update({p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d)})
            if not self.plain_block:
                out.update({p + "wo": (d, d), p + "ln1.g": (1, d), p + "ln1.b": (1, d),
                            p + "ln2.g": (1, d), p + "ln2.b": (1, d)})
            out.update({p + "mlp.w1": (d, 2 * d), p + "mlp.b1": (1, 2 * d),
                        p + "mlp.w2": (2 * d, d), p + "mlp.b2": (1, d),
                        p + "rpe": (3 * L, d)})
        out.update({"fuse.w1": (2 * d, d), "fuse.b1": (1, d),
                    "fuse.w2": (d, self.num_classes), "fuse.b2": (1, self.num_classes)})
        return out


def init_rdm(cfg: RdmConfig, seed: int) -> ParamStore:
    """Weights uniform in [-1/sqrt(d), 1/sqrt(d)]; biases and tables zero; LN gains one."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.dim)
    store = ParamStore()
    for name, shape in cfg.shapes().items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith(("rpe", ".b", ".b1", ".b2")):
            value = np.zeros(shape)
        else:
            value = rng.uniform(-bound, bound, size=shape)
        store.add(PREFIX + name, value)
    return store


def check_params(params: ParamStore, cfg: RdmConfig) -> None:
    for name, shape in cfg.shapes().items():
        full = PREFIX + name
        if full not in params:
            raise ConfigError(f"missing parameter {full}")
        if params[full].shape != shape:
            raise ConfigError(f"{full} has shape {params[full].shape}, config expects {shape}")


@dataclass
class RpeTable:
    tables: np.ndarray  # (3, L, d)
    t: float = 0.02
    max_rel: float = 2.0

    def __post_init__(self):
        if self.tables.ndim != 3 or self.tables.shape[0] != 3:
            raise ValueError(f"tables must be 3 x L x d, got {self.tables.shape}")
        if self.tables.shape[1] != int(round(2 * self.max_rel / self.t)):
            raise ValueError("table bin count does not match 2*max_rel/t")

    @property
    def num_bins(self) -> int:
        return self.tables.shape[1]

    @classmethod
    def from_param(cls, flat: np.ndarray, t: float, max_rel: float) -> "RpeTable":
        return cls(flat.reshape(3, -1, flat.shape[1]), t, max_rel)


# -- pooling and relative positions ------------------------------------------

def membership(partition: RegionPartition) -> sp.csr_matrix:
    n = partition.region_of.shape[0]
    return sp.csr_matrix(
        (np.ones(n), (np.arange(n), partition.region_of)), shape=(n, partition.num_regions)
    )


def region_pool(features: np.ndarray, coords: np.ndarray, partition: RegionPartition):
    """Per-region mean of point features and of point coordinates."""
    if partition.region_of.shape[0] != features.shape[0]:
        raise StateError("partition does not cover the feature rows")
    counts = partition.point_counts().astype(np.float64)
    if np.any(counts == 0):
        raise StateError("partition contains an empty region")
    member_t = membership(partition).T.tocsr()
    pooled = (member_t @ features) / counts[:, None]
    centers = (member_t @ np.asarray(coords, dtype=np.float64)) / counts[:, None]
    return pooled, centers


def rpe_index(centers: np.ndarray, t: float = 0.02, max_rel: float = 2.0) -> np.ndarray:
    """Bin index of every pairwise offset ``c_i - c_j``, shape ``(3, M, M)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    L = int(round(2.0 * max_rel / t))
    half = L // 2
    rel = centers[:, None, :] - centers[None, :, :]
    raw = np.floor(rel / t)
    idx = np.clip(raw, -half, half - 1).astype(np.int64) + half
    return np.ascontiguousarray(idx.transpose(2, 0, 1))


def _query_table(queries: np.ndarray, table: RpeTable) -> np.ndarray:
    """Per-head products ``q_i . T_a[l]``, shape ``(3, heads, M, L)``."""
    heads, _, dh = queries.shape
    L = table.num_bins
    per_head = table.tables.reshape(3, L, heads, dh).transpose(0, 2, 3, 1)
    return np.matmul(queries[None], per_head)


def rpe_bias(queries: np.ndarray, indices: np.ndarray, table: RpeTable) -> np.ndarray:
    """Query-conditioned positional bias, shape ``(heads, M, M)``.

    ``q_i . (Tx[ix] + Ty[iy] + Tz[iz])`` is evaluated as three ``M x L``
    query-table products followed by gathers, so the per-pair embedding is
    never materialised.
    """
    heads, m, dh = queries.shape
    qt = _query_table(queries, table)
    bias = np.zeros((heads, m, m))
    for a in range(3):
        bias += np.take_along_axis(qt[a], np.broadcast_to(indices[a], (heads, m, m)), axis=2)
    return bias / math.sqrt(dh)


def _bin_accumulate(grad_pairs: np.ndarray, indices: np.ndarray, L: int) -> np.ndarray:
    """Sum pair gradients into query rows and bins, shape ``(3, heads, M, L)``."""
    heads, m, _ = grad_pairs.shape
    base = (np.arange(heads)[:, None, None] * m + np.arange(m)[None, :, None]) * L
    weights = grad_pairs.reshape(-1)
    return np.stack([np.bincount((base + indices[a][None]).reshape(-1), weights=weights,
                                 minlength=heads * m * L).reshape(heads, m, L)
                     for a in range(3)])


# -- attention stack ---------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, heads * dh)


def _attention_layer(x, params, cfg, i, indices, use_rpe):
    p = lambda n: params[f"{PREFIX}layer{i}.{n}"]
    c = {"x": x}
    if cfg.plain_block:
        u = x
    else:
        u, c["ln1"] = layer_norm(x, p("ln1.g"), p("ln1.b"))
    c["u"] = u
    q = _split_heads(u @ p("wq"), cfg.heads)
    k = _split_heads(u @ p("wk"), cfg.heads)
    v = _split_heads(u @ p("wv"), cfg.heads)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    if use_rpe:
        table = RpeTable.from_param(p("rpe"), cfg.t, cfg.max_rel)
        scores = scores + rpe_bias(q, indices, table)
    attn = softmax_rows(scores)
    o = _merge_heads(np.matmul(attn, v))
    c.update(q=q, k=k, v=v, attn=attn, o=o)
    if cfg.plain_block:
        hidden_in = o
        base = None
    else:
        x1 = x + o @ p("wo")
        hidden_in, c["ln2"] = layer_norm(x1, p("ln2.g"), p("ln2.b"))
        base = x1
    z = linear(hidden_in, p("mlp.w1"), p("mlp.b1"))
    r = relu(z)
    y = linear(r, p("mlp.w2"), p("mlp.b2"))
    c.update(hidden_in=hidden_in, z=z, r=r)
    return (y if base is None else base + y), c


def _attention_layer_backward(c, grad_out, params, cfg, i, use_rpe):
    name = lambda n: f"{PREFIX}layer{i}.{n}"
    p = lambda n: params[name(n)]
    g = lambda n: params.grad(name(n))
    g_r = linear_backward(c["r"], p("mlp.w2"), grad_out, g("mlp.w2"), g("mlp.b2"))
    g_z = g_r * (c["z"] > 0)
    g_hidden = linear_backward(c["hidden_in"], p("mlp.w1"), g_z, g("mlp.w1"), g("mlp.b1"))
    if cfg.plain_block:
        g_o = g_hidden
    else:
        g_x1 = grad_out + layer_norm_backward(c["ln2"], p("ln2.g"), g_hidden, g("ln2.g"), g("ln2.b"))
        g_o = linear_backward(c["o"], p("wo"), g_x1, g("wo"))
    q, k, v, attn = c["q"], c["k"], c["v"], c["attn"]
    heads, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    g_oh = _split_heads(g_o, heads)
    g_v = np.matmul(attn.transpose(0, 2, 1), g_oh)
    g_attn = np.matmul(g_oh, v.transpose(0, 2, 1))
    g_scores = softmax_rows_backward(attn, g_attn) * scale
    g_q = np.matmul(g_scores, k)
    g_k = np.matmul(g_scores.transpose(0, 2, 1), q)
    if use_rpe:
        table = RpeTable.from_param(p("rpe"), cfg.t, cfg.max_rel)
        L, m = cfg.num_bins, q.shape[1]
        per_head = table.tables.reshape(3, L, heads, dh).transpose(0, 2, 1, 3)
        acc = _bin_accumulate(g_scores, c["indices"], L)
        g_q += np.matmul(acc, per_head).sum(axis=0)
        g_table = g("rpe").reshape(3, L, heads, dh)
        g_table += np.matmul(acc.transpose(0, 1, 3, 2), q[None]).transpose(0, 2, 1, 3)
    u = c["u"]
    g_u = (linear_backward(u, p("wq"), _merge_heads(g_q), g("wq"))
           + linear_backward(u, p("wk"), _merge_heads(g_k), g("wk"))
           + linear_backward(u, p("wv"), _merge_heads(g_v), g("wv")))
    if cfg.plain_block:
        return g_u
    return g_x1 + layer_norm_backward(c["ln1"], p("ln1.g"), g_u, g("ln1.g"), g("ln1.b"))


@dataclass
class AttentionResult:
    enhanced: np.ndarray
    attention: List[np.ndarray]  # per layer, heads x M x M
    cache: dict = field(repr=False, default_factory=dict)


def region_attention_forward(
    pooled: np.ndarray,
    centers: np.ndarray,
    params: ParamStore,
    cfg: RdmConfig,
    use_rpe: bool = True,
) -> AttentionResult:
    indices = rpe_index(centers, cfg.t, cfg.max_rel)
    x = pooled
    caches, maps = [], []
    for i in range(cfg.layers):
        x, c = _attention_layer(x, params, cfg, i, indices, use_rpe)
        c["indices"] = indices
        caches.append(c)
        maps.append(c["attn"])
    return AttentionResult(x, maps, {"layers": caches, "indices": indices, "use_rpe": use_rpe})


def region_attention_backward(result: AttentionResult, grad_enhanced, params, cfg) -> np.ndarray:
    use_rpe = result.cache["use_rpe"]
    g = grad_enhanced
    for i in reversed(range(cfg.layers)):
        g = _attention_layer_backward(result.cache["layers"][i], g, params, cfg, i, use_rpe)
    return g


# -- fusion -------------------------------------------------------------------

def fuse_and_predict(features, enhanced, partition: RegionPartition, params: ParamStore, cfg: RdmConfig):
    """Refined logits from ``[point feature, its region's enhanced feature]``."""
    p = lambda n: params[f"{PREFIX}fuse.{n}"]
    fused = np.hstack([features, enhanced[partition.region_of]])
    z = linear(fused, p("w1"), p("b1"))
    r = relu(z)
    logits = linear(r, p("w2"), p("b2"))
    return logits, {"fused": fused, "z": z, "r": r}


def fuse_backward(cache, grad_logits, partition, params, cfg):
    g = lambda n: params.grad(f"{PREFIX}fuse.{n}")
    p = lambda n: params[f"{PREFIX}fuse.{n}"]
    g_r = linear_backward(cache["r"], p("w2"), grad_logits, g("w2"), g("b2"))
    g_z = g_r * (cache["z"] > 0)
    g_fused = linear_backward(cache["fused"], p("w1"), g_z, g("w1"), g("b1"))
    d = cfg.dim
    g_enh = membership(partition).T @ g_fused[:, d:]
    return g_fused[:, :d], g_enh


# -- whole module -----------------------------------------------------------

@dataclass
class RdmOutput:
    logits: np.ndarray
    pooled: np.ndarray
    centers: np.ndarray
    enhanced: np.ndarray
    attention: List[np.ndarray]
    partition: RegionPartition
    cache: dict = field(repr=False, default_factory=dict)


def rdm_forward(features, coords, partition: RegionPartition, params: ParamStore, cfg: RdmConfig,
                use_rpe: bool = True) -> RdmOutput:
    if features.shape[1] != cfg.dim:
        raise ConfigError(f"feature dim {features.shape[1]} != configured {cfg.dim}")
    pooled, centers = region_pool(features, coords, partition)
    att = region_attention_forward(pooled, centers, params, cfg, use_rpe)
    logits, fcache = fuse_and_predict(features, att.enhanced, partition, params, cfg)
    cache = {"att": att, "fuse": fcache, "shape": features.shape,
             "param_shapes": {k: params[k].shape for k in params.names(PREFIX)}}
    return RdmOutput(logits, pooled, centers, att.enhanced, att.attention, partition, cache)


def rdm_backward(out: RdmOutput, grad_logits: np.ndarray, params: ParamStore, cfg: RdmConfig) -> np.ndarray:
    """Accumulate RDM gradients; return the gradient w.r.t. the point features.

    Region membership is a constant: gradient flows through the fused point
    features and, via the mean adjoint, from each pooled region back to its
    members in equal shares.
    """
    c = out.cache
    for k, shape in c["param_shapes"].items():
        if k not in params or params[k].shape != shape:
            raise StateError(f"rdm cache is stale: {k} changed shape")
    if grad_logits.shape != out.logits.shape:
        raise StateError(f"grad shape {grad_logits.shape} != logits {out.logits.shape}")
    part = out.partition
    g_feat, g_enh = fuse_backward(c["fuse"], grad_logits, part, params, cfg)
    g_pooled = region_attention_backward(c["att"], np.asarray(g_enh), params, cfg)
    counts = part.point_counts().astype(np.float64)
    g_feat = g_feat + (g_pooled / counts[:, None])[part.region_of]
    return g_feat


# -- complexity -------------------------------------------------------------

def attention_flops(m: int, d: int, heads: int, layers: int, plain_block: bool = False,
                    num_bins: int = 200) -> int:
    """Multiply-accumulate count of the region attention stack as implemented.

    Per layer: Q/K/V projections ``3*M*d^2``, query-table products for the
    positional bias ``3*M*L*d`` (one ``M x L`` product per axis and head),
    ``QK^T`` ``M^2*d``, ``AV`` ``M^2*d``, output projection ``M*d^2``
    (residual block only) and the d->2d->d MLP ``4*M*d^2``. Bias gathers,
    softmax, pooling and fusion are not multiply-accumulates and are left out.
    Head count cancels: every head works on ``d/heads`` channels.
    """
    if min(m, d, heads, layers, num_bins) < 1:
        raise ValueError("all arguments must be positive")
    linear_terms = (7 if plain_block else 8) * m * d * d + 3 * m * num_bins * d
    pair_terms = 2 * m * m * d
    return layers * (linear_terms + pair_terms)


# -- attention dump -----------------------------------------------------------

def write_attention_dump(out_dir, out: RdmOutput) -> List[Path]:
    out_dir = Path(out_dir)
    written = []
    for li, maps in enumerate(out.attention):
        for h in range(maps.shape[0]):
            buf = io.StringIO()
            for row in maps[h]:
                buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
            path = out_dir / f"attn_l{li + 1}_h{h + 1}.csv"
            write_text_atomic(path, buf.getvalue())
            written.append(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region_id", "class_id", "cx", "cy", "cz", "point_count"])
    counts = out.partition.point_counts()
    for j in range(out.partition.num_regions):
        cx, cy, cz = out.centers[j]
        w.writerow([j, int(out.partition.region_class[j]), f"{cx:.9g}", f"{cy:.9g}", f"{cz:.9g}", int(counts[j])])
    path = out_dir / "regions_meta.csv"
    write_text_atomic(path, buf.getvalue())
    written.append(path)
    return written
