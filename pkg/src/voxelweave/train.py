"""Training and evaluation loops.

Each step draws one scene and one sub-cell grid offset from per-step seeded
substreams (so a run can be checkpointed and resumed bit-identically),
voxelizes the scene at that offset for supervision, runs the network, and
applies one Adam update. Evaluation predicts probability volumes, derives
hard labels and per-class isosurfaces, and scores them against the exact
scene geometry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .losses import get_loss
from .mesher import extract_scene_meshes
from .metrics import EvalReport, labels_from_probs, score_scene
from .model import ModelConfig, ReconModel, flatten_probs
from .optim import AdamConfig, AdamState, adam_step
from .rng import substream
from .scenes import SceneRecord, voxelize
from .tensor import Tensor, backward
from .volume import GridSpec, multi_offset_predict, sample_training_offset


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 2e-3
    loss: str = "iou-xent"
    seed: int = 0
    random_offsets: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            # lr == 0 is allowed: a zero-rate run must leave parameters
            # bit-identical, which doubles as an optimizer sanity check.
            raise ContractError(f"lr must be non-negative, got {self.lr}")


@dataclass
class TrainResult:
    model: ReconModel
    adam: AdamState
    history: list[tuple[int, float]] = field(default_factory=list)


def one_hot_targets(labels: np.ndarray, num_classes: int) -> Tensor:
    """(W, H, D) class ids -> (D*H*W, C) one-hot rows matching flatten_probs."""
    if labels.max(initial=0) >= num_classes:
        raise ContractError(f"label {labels.max()} out of range for "
                            f"{num_classes} classes")
    flat = labels.transpose(2, 1, 0).reshape(-1)
    return Tensor(np.eye(num_classes, dtype=np.float32)[flat])


def _step_scene(rng: np.random.Generator, n: int) -> int:
    return int(rng.integers(n))


def train(model: ReconModel, records: list[SceneRecord], base: GridSpec,
          config: TrainConfig, adam: AdamState | None = None,
          start_step: int = 0, label_cache: dict | None = None,
          progress=None) -> TrainResult:
    """Run config.steps - start_step updates; resumable at any step boundary.

    The per-step scene choice and grid offset depend only on (seed, step), so
    training to step N, checkpointing, and continuing matches an uninterrupted
    run bit for bit. `label_cache` (offset-keyed) only helps when offsets are
    fixed; it is keyed by (scene index, offset bytes).
    """
    if not records:
        raise ContractError("no training scenes")
    loss_fn = get_loss(config.loss)
    if adam is None:
        adam = AdamState.init(model.params)
    if adam.step != start_step:
        raise ContractError(f"optimizer is at step {adam.step}, "
                            f"cannot resume from {start_step}")
    opt_cfg = AdamConfig(lr=config.lr)
    work = ReconModel(model.config, dict(model.params))
    params = work.params
    history: list[tuple[int, float]] = []
    cache = label_cache if label_cache is not None else {}
    for step in range(start_step, config.steps):
        pick = substream(config.seed, "step", str(step))
        rec = records[_step_scene(pick, len(records))]
        if config.random_offsets:
            offset = sample_training_offset(pick, base.spacing)
        else:
            offset = base.offset
        spec = base.with_offset(offset)
        key = (rec.index, offset.tobytes())
        if key not in cache:
            cache[key] = voxelize(rec.scene, spec)
            if len(cache) > 4 * len(records):
                cache.pop(next(iter(cache)))
        labels = cache[key]
        probs = work.forward(rec.image, spec, rec.scene.camera)
        loss = loss_fn(one_hot_targets(labels, model.config.num_classes),
                       flatten_probs(probs))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"loss diverged at step {step}: {value}")
        for t in params.values():
            t.zero_grad()
        backward(loss)
        params = adam_step(params, adam, opt_cfg)
        work.params = params
        history.append((step, value))
        if progress and (step % config.log_every == 0 or step == config.steps - 1):
            progress(step, value)
    return TrainResult(work, adam, history)


# -- evaluation ------------------------------------------------------------------------


def predict_labels(model: ReconModel, record: SceneRecord, base: GridSpec,
                   superres: int = 1):
    """Probability volume (optionally n^3 interleaved) and its hard labels."""
    if superres < 1:
        raise ContractError(f"superres must be >= 1, got {superres}")
    if superres == 1:
        vol = model.predict_volume(record.image, base, record.scene.camera)
    else:
        vol = multi_offset_predict(
            lambda spec: model.predict_volume(record.image, spec,
                                              record.scene.camera),
            base, superres)
    return vol, labels_from_probs(vol.values)


def evaluate(model: ReconModel, records: list[SceneRecord], base: GridSpec,
             superres: int = 1, num_samples: int = 20_000,
             with_meshes: bool = True) -> EvalReport:
    """Score a model over scene records; see metrics.score_scene for fields."""
    rows = []
    for rec in records:
        vol, pred_labels = predict_labels(model, rec, base, superres)
        gt_labels = voxelize(rec.scene, vol.spec)
        meshes = extract_scene_meshes(vol) if with_meshes else {}
        rows.extend(score_scene(rec.index, rec.scene, pred_labels, gt_labels,
                                meshes, vol.spec, num_samples=num_samples))
    return EvalReport(rows, base)


def mean_iou_at_offset(model: ReconModel, records: list[SceneRecord],
                       spec: GridSpec) -> float:
    """Label-grid mean IoU (mean of per-class means) at one fixed offset."""
    from .metrics import volumetric_iou

    per_class: dict[int, list[float]] = {}
    for rec in records:
        vol = model.predict_volume(rec.image, spec, rec.scene.camera)
        pred = labels_from_probs(vol.values)
        gt = voxelize(rec.scene, spec)
        for obj in rec.scene.objects:
            per_class.setdefault(obj.class_id, []).append(
                volumetric_iou(pred, gt, obj.class_id))
    if not per_class:
        return float("nan")
    return float(np.mean([np.mean(v) for v in per_class.values()]))
