"""Run configuration and the two-stage training / evaluation loops."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig, backbone_backward, backbone_forward, infer_backbone_config, init_backbone
from .errors import ConfigError, NumericError
from .metrics import EvalReport, boundary_recall, confusion_matrix, iou_from_confusion, region_entropy
from .pointcloud import NeighborIndex, PointCloud, knn, voxel_downsample
from .rdm import RdmConfig, RdmOutput, init_rdm, rdm_backward, rdm_forward
from .rdm import check_params as check_rdm_params
from .ssre import RegionPartition, extract_regions
from .tensor import ParamStore, SgdConfig, cross_entropy_mean, sgd_step

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    d: int = 128
    heads: int = 8
    layers: int = 3
    region_size: int = 200
    t: float = 0.02
    max_rel: float = 2.0
    voxel: float = 0.02
    knn_k: int = 8
    hidden: int = 64
    num_classes: int = 6
    lr_pretrain: float = 1e-1
    lr_backbone_joint: float = 5e-3
    lr_rdm: float = 5e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs_pretrain: int = 30
    epochs_joint: int = 30
    batch_scenes: int = 1
    warmup_iters: int = 0
    seed: int = 0
    plain_block: bool = False
    freeze_partition: bool = False
    eval_every: int = 1
    br_k: int = 10
    br_tolerance: float = 0.04

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("lr_pretrain", "lr_backbone_joint", "lr_rdm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("region_size", "knn_k", "hidden", "num_classes", "layers", "heads", "batch_scenes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if min(self.t, self.max_rel, self.voxel) <= 0:
            raise ConfigError("t, max_rel and voxel must be positive")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.hidden, self.d, self.num_classes)

    def rdm(self) -> RdmConfig:
        return RdmConfig(self.d, self.heads, self.layers, self.num_classes, self.t, self.max_rel,
                         self.plain_block)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """``key = value`` lines with ``#`` comments; unknown keys are errors."""
    base = base or RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = coerce_value(key, value)
    return dataclasses.replace(base, **changes)


def coerce_value(key: str, value):
    default = getattr(RunConfig(), key)
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            low = str(value).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


# -- scene preparation ----------------------------------------------------------

@dataclass
class PreparedScene:
    raw: PointCloud
    cloud: PointCloud  # voxelised
    origin_map: np.ndarray
    nn: NeighborIndex
    _raw_nn: Optional[NeighborIndex] = None

    def raw_neighbors(self, k: int) -> NeighborIndex:
        if self._raw_nn is None or self._raw_nn.k != k:
            self._raw_nn = knn(self.raw.coords, k)
        return self._raw_nn


def prepare_scene(pc: PointCloud, cfg: RunConfig) -> PreparedScene:
    cloud, origin = voxel_downsample(pc, cfg.voxel)
    if len(cloud) <= cfg.knn_k:
        raise ConfigError(f"scene {pc.scene_id} has {len(cloud)} voxels, need more than k={cfg.knn_k}")
    return PreparedScene(pc, cloud, origin, knn(cloud.coords, cfg.knn_k))


# -- training loops ---------------------------------------------------------------

@dataclass
class LossReport:
    stage: str
    epoch: int
    loss: float
    val_miou: float = float("nan")


def _lr_scale(step: int, warmup: int) -> float:
    return 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)


def _check_loss(loss: float, scene: PreparedScene) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss on scene {scene.raw.scene_id}")


def _scale_grads(params: ParamStore, names: Sequence[str], factor: float) -> None:
    if factor != 1.0:
        for n in names:
            params.grads[n] *= factor


def pretrain(
    cfg: RunConfig,
    train: Sequence[PreparedScene],
    val: Sequence[PreparedScene] = (),
    params: Optional[ParamStore] = None,
) -> tuple:
    """Stage 1: fit the backbone on the initial-prediction loss."""
    params = params or init_backbone(cfg.backbone(), cfg.seed)
    sgd = SgdConfig(cfg.lr_pretrain, cfg.weight_decay, cfg.momentum)
    names = params.names("backbone.")
    rng = np.random.default_rng(cfg.seed)
    reports: List[LossReport] = []
    step = 0
    for epoch in range(cfg.epochs_pretrain):
        losses = []
        pending = 0
        for idx in rng.permutation(len(train)):
            scene = train[idx]
            out = backbone_forward(scene.cloud, scene.nn, params)
            loss, grad = cross_entropy_mean(out.logits, scene.cloud.labels)
            _check_loss(loss, scene)
            backbone_backward(out, params, None, grad)
            losses.append(loss)
            pending += 1
            if pending == cfg.batch_scenes:
                _scale_grads(params, names, 1.0 / pending)
                sgd_step(params, sgd, names, _lr_scale(step, cfg.warmup_iters))
                step += 1
                pending = 0
        if pending:
            _scale_grads(params, names, 1.0 / pending)
            sgd_step(params, sgd, names, _lr_scale(step, cfg.warmup_iters))
            step += 1
        rep = LossReport("initial", epoch, float(np.mean(losses)))
        if val and _due(epoch, cfg.epochs_pretrain, cfg.eval_every):
            rep.val_miou = evaluate(cfg, params, val, joint=False)["miou"]
        log.info("pretrain epoch %d loss %.4f val mIoU %.4f", epoch, rep.loss, rep.val_miou)
        reports.append(rep)
    return params, reports


def _due(epoch: int, total: int, every: int) -> bool:
    return epoch == total - 1 or (every > 0 and (epoch + 1) % every == 0)


def scene_partition(cfg: RunConfig, scene: PreparedScene, logits: np.ndarray) -> RegionPartition:
    return extract_regions(scene.cloud, logits, cfg.region_size, cfg.seed)


def train_joint(
    cfg: RunConfig,
    params: ParamStore,
    train: Sequence[PreparedScene],
    val: Sequence[PreparedScene] = (),
) -> tuple:
    """Stage 2: train backbone and RDM together on the refined-prediction loss.

    ``params`` must hold a stage-1 backbone; fresh RDM parameters are added
    unless already present.
    """
    bcfg = infer_backbone_config(params)
    if bcfg.dim != cfg.d or bcfg.num_classes != cfg.num_classes:
        raise ConfigError(f"checkpoint has d={bcfg.dim}, C={bcfg.num_classes}; config has d={cfg.d}, C={cfg.num_classes}")
    rcfg = cfg.rdm()
    if not params.names("rdm."):
        params.update(init_rdm(rcfg, cfg.seed + 1))
    check_rdm_params(params, rcfg)
    bb_names, rdm_names = params.names("backbone."), params.names("rdm.")
    sgd_bb = SgdConfig(cfg.lr_backbone_joint, cfg.weight_decay, cfg.momentum)
    sgd_rdm = SgdConfig(cfg.lr_rdm, cfg.weight_decay, cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 2)
    frozen: Dict[int, RegionPartition] = {}
    reports: List[LossReport] = []
    step = 0

    def apply(pending):
        nonlocal step
        scale = _lr_scale(step, cfg.warmup_iters)
        _scale_grads(params, bb_names + rdm_names, 1.0 / pending)
        sgd_step(params, sgd_bb, bb_names, scale)
        sgd_step(params, sgd_rdm, rdm_names, scale)
        step += 1

    for epoch in range(cfg.epochs_joint):
        losses = []
        pending = 0
        for idx in rng.permutation(len(train)):
            scene = train[idx]
            out = backbone_forward(scene.cloud, scene.nn, params)
            if cfg.freeze_partition:
                if idx not in frozen:
                    frozen[idx] = scene_partition(cfg, scene, out.logits)
                part = frozen[idx]
            else:
                part = scene_partition(cfg, scene, out.logits)
            r = rdm_forward(out.features, scene.cloud.coords, part, params, rcfg)
            loss, grad = cross_entropy_mean(r.logits, scene.cloud.labels)
            _check_loss(loss, scene)
            g_feat = rdm_backward(r, grad, params, rcfg)
            backbone_backward(out, params, g_feat, None)
            losses.append(loss)
            pending += 1
            if pending == cfg.batch_scenes:
                apply(pending)
                pending = 0
        if pending:
            apply(pending)
        rep = LossReport("refined", epoch, float(np.mean(losses)))
        if val and _due(epoch, cfg.epochs_joint, cfg.eval_every):
            rep.val_miou = evaluate(cfg, params, val, joint=True)["miou"]
        log.info("joint epoch %d loss %.4f val mIoU %.4f", epoch, rep.loss, rep.val_miou)
        reports.append(rep)
    return params, reports


# -- inference and evaluation ---------------------------------------------------------

@dataclass
class SceneResult:
    scene_id: str
    pred: np.ndarray  # per raw point
    partition: Optional[RegionPartition] = None
    rdm: Optional[RdmOutput] = None


def infer_scene(cfg: RunConfig, params: ParamStore, scene: PreparedScene, joint: bool) -> SceneResult:
    out = backbone_forward(scene.cloud, scene.nn, params)
    if not joint:
        pred = np.argmax(out.logits, axis=1)
        return SceneResult(scene.raw.scene_id, pred[scene.origin_map])
    if not params.names("rdm."):
        raise ConfigError("joint evaluation needs RDM parameters in the checkpoint")
    rcfg = cfg.rdm()
    check_rdm_params(params, rcfg)
    part = scene_partition(cfg, scene, out.logits)
    r = rdm_forward(out.features, scene.cloud.coords, part, params, rcfg)
    pred = np.argmax(r.logits, axis=1)
    return SceneResult(scene.raw.scene_id, pred[scene.origin_map], part, r)


def evaluate_scene(cfg: RunConfig, params: ParamStore, scene: PreparedScene, joint: bool) -> EvalReport:
    res = infer_scene(cfg, params, scene, joint)
    gt = scene.raw.labels
    counts = confusion_matrix(res.pred, gt, cfg.num_classes)
    iou, miou = iou_from_confusion(counts)
    report = EvalReport(iou, miou, counts)
    if joint:
        part = res.partition
        raw_part = RegionPartition(part.region_of[scene.origin_map], part.num_regions, part.centers,
                                   part.region_class, part.region_size)
        report.region_entropy_per_region, report.entropy_scene = region_entropy(raw_part, gt, cfg.num_classes)
        report.boundary_recall = boundary_recall(raw_part, gt, scene.raw.coords,
                                                 scene.raw_neighbors(cfg.br_k), cfg.br_tolerance)
        report.extra["num_regions"] = float(part.num_regions)
    return report


def evaluate(cfg: RunConfig, params: ParamStore, scenes: Sequence[PreparedScene], joint: bool,
             per_scene: Optional[list] = None) -> Dict[str, float]:
    """Per-scene reports averaged over scenes; also the pooled-confusion mIoU."""
    reports = [evaluate_scene(cfg, params, s, joint) for s in scenes]
    if per_scene is not None:
        per_scene.extend(reports)
    total = sum(r.counts for r in reports)
    _, pooled = iou_from_confusion(total)
    agg = {"miou": float(np.mean([r.miou for r in reports])), "miou_pooled": pooled}
    if joint:
        agg["entropy"] = float(np.mean([r.entropy_scene for r in reports]))
        agg["boundary_recall"] = float(np.mean([r.boundary_recall for r in reports]))
    return agg
