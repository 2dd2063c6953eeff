"""Toy per-point segmentation backbone.

A shared point MLP followed by two rounds of k-NN mean aggregation::

    x1 = relu(mlp1([xyz_norm, rgb]))
    x2 = relu(mlp2([x1, mean_nbr(x1)]))
    F  = mlp3([x2, mean_nbr(x2)])
    Y  = head(F)

Neighbour means are products with a sparse averaging operator, so their
adjoint is the transposed operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, StateError
from .pointcloud import NeighborIndex, PointCloud
from .tensor import ParamStore, linear, linear_backward, relu

PREFIX = "backbone."
IN_CHANNELS = 6


@dataclass(frozen=True)
class BackboneConfig:
    hidden: int = 64
    dim: int = 128
    num_classes: int = 6

    def shapes(self) -> dict:
        h, d, c = self.hidden, self.dim, self.num_classes
        return {
            "mlp1.w": (IN_CHANNELS, h), "mlp1.b": (1, h),
            "mlp2.w": (2 * h, h), "mlp2.b": (1, h),
            "mlp3.w": (2 * h, d), "mlp3.b": (1, d),
            "head.w": (d, c), "head.b": (1, c),
        }


def init_backbone(cfg: BackboneConfig, seed: int) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in cfg.shapes().items():
        if name.endswith(".b"):
            store.add(PREFIX + name, np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(shape[0])
            store.add(PREFIX + name, rng.uniform(-bound, bound, size=shape))
    return store


def infer_backbone_config(params: ParamStore) -> BackboneConfig:
    try:
        h = params[PREFIX + "mlp1.w"].shape[1]
        d = params[PREFIX + "mlp3.w"].shape[1]
        c = params[PREFIX + "head.w"].shape[1]
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks backbone parameter {exc}") from exc
    cfg = BackboneConfig(h, d, c)
    check_params(params, cfg)
    return cfg


def check_params(params: ParamStore, cfg: BackboneConfig) -> None:
    for name, shape in cfg.shapes().items():
        full = PREFIX + name
        if full not in params:
            raise ConfigError(f"missing parameter {full}")
        if params[full].shape != shape:
            raise ConfigError(f"{full} has shape {params[full].shape}, config expects {shape}")


def input_features(pc: PointCloud) -> np.ndarray:
    """Coordinates scaled into the unit bounding box, followed by RGB."""
    lo = pc.coords.min(axis=0)
    extent = pc.coords.max(axis=0) - lo
    scale = np.where(extent > 0, 1.0 / np.where(extent > 0, extent, 1.0), 0.0)
    return np.hstack([(pc.coords - lo) * scale, pc.colors])


@dataclass
class BackboneOutput:
    features: np.ndarray
    logits: np.ndarray
    cache: dict


def backbone_forward(
    pc: PointCloud,
    nn: Optional[NeighborIndex],
    params: ParamStore,
    cfg: Optional[BackboneConfig] = None,
) -> BackboneOutput:
    """Run the encoder; ``nn=None`` disables neighbour aggregation (ablation)."""
    n = len(pc)
    if cfg is not None:
        check_params(params, cfg)
    if nn is not None:
        if nn.neighbors.shape[0] != n:
            raise ConfigError(f"neighbour index has {nn.neighbors.shape[0]} rows for {n} points")
        if nn.k < 1:
            raise ConfigError("neighbour aggregation needs k >= 1")
        op = nn.mean_operator()
        agg = lambda x: op @ x
    else:
        op = None
        agg = np.zeros_like
    p = lambda name: params[PREFIX + name]
    inp = input_features(pc)
    z1 = linear(inp, p("mlp1.w"), p("mlp1.b"))
    x1 = relu(z1)
    cat1 = np.hstack([x1, agg(x1)])
    z2 = linear(cat1, p("mlp2.w"), p("mlp2.b"))
    x2 = relu(z2)
    cat2 = np.hstack([x2, agg(x2)])
    feats = linear(cat2, p("mlp3.w"), p("mlp3.b"))
    logits = linear(feats, p("head.w"), p("head.b"))
    cache = dict(inp=inp, z1=z1, cat1=cat1, z2=z2, cat2=cat2, feats=feats, op=op,
                 shapes={k: params[k].shape for k in params.names(PREFIX)})
    return BackboneOutput(feats, logits, cache)


def backbone_backward(
    out: BackboneOutput,
    params: ParamStore,
    grad_features: Optional[np.ndarray],
    grad_logits: Optional[np.ndarray],
) -> None:
    """Accumulate exact parameter gradients into ``params.grads``."""
    c = out.cache
    n, d = out.features.shape
    for k, shape in c["shapes"].items():
        if k not in params or params[k].shape != shape:
            raise StateError(f"backbone cache is stale: {k} changed shape")
    gF = np.zeros((n, d)) if grad_features is None else grad_features
    if gF.shape != (n, d):
        raise StateError(f"grad_features shape {gF.shape} != {(n, d)}")
    p = lambda name: params[PREFIX + name]
    g = lambda name: params.grad(PREFIX + name)
    if grad_logits is not None:
        if grad_logits.shape != out.logits.shape:
            raise StateError(f"grad_logits shape {grad_logits.shape} != {out.logits.shape}")
        gF = gF + linear_backward(c["feats"], p("head.w"), grad_logits, g("head.w"), g("head.b"))
    op = c["op"]
    h = c["z1"].shape[1]

    def split(grad_cat):
        own, nbr = grad_cat[:, :h], grad_cat[:, h:]
        return own + op.T @ nbr if op is not None else own

    g_cat2 = linear_backward(c["cat2"], p("mlp3.w"), gF, g("mlp3.w"), g("mlp3.b"))
    g_z2 = split(g_cat2) * (c["z2"] > 0)
    g_cat1 = linear_backward(c["cat1"], p("mlp2.w"), g_z2, g("mlp2.w"), g("mlp2.b"))
    g_z1 = split(g_cat1) * (c["z1"] > 0)
    g("mlp1.w")[...] += c["inp"].T @ g_z1
    g("mlp1.b")[...] += g_z1.sum(axis=0, keepdims=True)
