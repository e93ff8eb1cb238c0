"""Plain-SGD training with set-prediction loss, plus batch prediction."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, nn
from . import tensor as T
from .data.coco import CocoDataset
from .data.rle import RleMask, bbox_from_mask, rle_decode, rle_encode
from .data.synth import load_image
from .matching import LossWeights, match_outputs, set_loss
from .metrics import Detection, GroundTruth, ap_coco
from .model import ModelConfig, forward, predict
from .model.segmenter import expected_shapes


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1
    aux_loss: bool = True
    seed: int = 0
    eval_every: int = 0  # epochs between validation AP passes; 0 disables
    score_threshold: float = 0.5
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need learning_rate >= 0, batch_size >= 1, epochs >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.class_weight, self.bce_weight, self.dice_weight, self.no_object_weight)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image_id: int
    image: np.ndarray  # C×H×W
    classes: np.ndarray  # G
    masks: np.ndarray  # G×H×W, {0, 1}


def load_samples(ds: CocoDataset, image_dir) -> list[Sample]:
    by_image = ds.annotations_by_image()
    out = []
    for im in ds.images:
        anns = by_image[im.id]
        masks = np.stack([rle_decode(a.segmentation) for a in anns]).astype(np.float64) if anns else np.zeros(
            (0, im.height, im.width)
        )
        out.append(Sample(im.id, load_image(image_dir, im.file_name), np.array([a.category_id for a in anns], int), masks))
    return out


def sample_loss(params: nn.Params, model_cfg: ModelConfig, sample: Sample, cfg: TrainConfig):
    out = forward(params, model_cfg, sample.image, with_aux=cfg.aux_loss)
    for name, t in (("class_logits", out.class_logits[-1]), ("mask_logits", out.mask_logits[-1])):
        if not np.isfinite(t.data).all():
            raise TrainingDiverged(f"non-finite {name} on image {sample.image_id}")
    match = match_outputs(
        out.class_logits[-1].data, out.mask_logits[-1].data, sample.classes, sample.masks, cfg.weights
    )
    return set_loss(out.class_logits, out.mask_logits, sample.classes, sample.masks, match, cfg.weights)


def _sample_grads(params, model_cfg, sample, cfg, scale):
    leaves = nn.fresh_leaves(params)
    report = sample_loss(leaves, model_cfg, sample, cfg)
    T.backward(T.mul(report.total, scale))
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    return grads, report.terms()


def sgd_step(params: nn.Params, grads: dict[str, np.ndarray], lr: float) -> None:
    for k, p in params.items():
        # rebinding keeps arrays captured by earlier graphs untouched
        p.data = p.data - lr * grads[k]


def batch_gradients(params, model_cfg, batch: list[Sample], cfg: TrainConfig, pool=None):
    """Summed gradients of the batch-mean loss; reduction order is batch order."""
    scale = 1.0 / len(batch)
    if pool is None:
        results = [_sample_grads(params, model_cfg, s, cfg, scale) for s in batch]
    else:
        results = list(pool.map(lambda s: _sample_grads(params, model_cfg, s, cfg, scale), batch))
    grads = {k: results[0][0][k].copy() for k in params}
    for g, _ in results[1:]:
        for k in grads:
            grads[k] += g[k]
    terms = {k: sum(t[k] for _, t in results) / len(batch) for k in results[0][1]}
    return grads, terms


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


@dataclass
class TrainResult:
    params: nn.Params
    steps: int
    epochs_done: int
    history: list[dict]


def train(
    samples: list[Sample],
    params: nn.Params,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    val_samples: list[Sample] | None = None,
    start_epoch: int = 0,
    start_step: int = 0,
    on_epoch: Callable[[int, nn.Params], None] | None = None,
) -> TrainResult:
    if not samples:
        raise ValueError("training set is empty")
    log = open(log_path, "a") if log_path else None
    history: list[dict] = []
    step = start_step
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def emit(rec):
        history.append(rec)
        if log:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()

    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = epoch_order(len(samples), cfg.seed, epoch)
            sums: dict[str, float] = {}
            nsteps = 0
            for b in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[b : b + cfg.batch_size]]
                grads, terms = batch_gradients(params, model_cfg, batch, cfg, pool)
                for name, v in terms.items():
                    if not math.isfinite(v):
                        emit({"kind": "error", "epoch": epoch, "step": step, "term": name})
                        raise TrainingDiverged(f"non-finite {name} loss at epoch {epoch}, step {step}")
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
                sgd_step(params, grads, cfg.learning_rate)
                step += 1
                nsteps += 1
                emit({"kind": "step", "epoch": epoch, "step": step, **terms})
                for name, v in terms.items():
                    sums[name] = sums.get(name, 0.0) + v
            rec = {"kind": "epoch", "epoch": epoch, "step": step, **{k: v / nsteps for k, v in sums.items()}}
            if val_samples and cfg.eval_every and (epoch + 1 - start_epoch) % cfg.eval_every == 0:
                rep = evaluate_samples(params, model_cfg, val_samples, cfg.score_threshold)
                rec.update({"val_seg_ap": rep["segmentation"].ap, "val_seg_ap50": rep["segmentation"].ap50,
                            "val_det_ap50": rep["detection"].ap50})
            emit(rec)
            if on_epoch:
                on_epoch(epoch, params)
    finally:
        if log:
            log.close()
        if pool:
            pool.shutdown()
    return TrainResult(params, step, start_epoch + cfg.epochs, history)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict_results(params, model_cfg: ModelConfig, samples: list[Sample], score_threshold: float = 0.5) -> list[dict]:
    """Results-file records: image_id, category_id, score, bbox, segmentation."""
    results = []
    for s in samples:
        for inst in predict(params, model_cfg, s.image, score_threshold):
            results.append(
                {
                    "image_id": s.image_id,
                    "category_id": inst.category_id,
                    "score": inst.score,
                    "bbox": None if inst.bbox is None else list(inst.bbox),
                    "segmentation": rle_encode(inst.binary_mask).to_json(),
                }
            )
    return results


def evaluate_samples(params, model_cfg, samples: list[Sample], score_threshold: float = 0.5):
    """Detection and segmentation reports for in-memory samples."""
    results = predict_results(params, model_cfg, samples, score_threshold)
    out = {}
    for task in ("detection", "segmentation"):
        preds = [
            Detection(
                r["image_id"],
                r["category_id"],
                r["score"],
                tuple(r["bbox"]) if task == "detection" else RleMask.from_json(r["segmentation"]),
            )
            for r in results
            if task == "segmentation" or r["bbox"] is not None
        ]
        gts = [
            GroundTruth(s.image_id, int(c), bbox_from_mask(m) if task == "detection" else rle_encode(m))
            for s in samples
            for c, m in zip(s.classes, s.masks)
        ]
        out[task] = ap_coco(preds, gts, task)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: nn.Params, model_cfg: ModelConfig, meta: dict | None = None) -> None:
    metadata = {"model": model_cfg.to_dict(), **(meta or {})}
    checkpoint.save(path, {k: v.data for k, v in params.items()}, metadata)


def load_checkpoint(path, model_cfg: ModelConfig | None = None):
    arrays, meta = checkpoint.load(path)
    cfg = model_cfg or ModelConfig.from_dict(meta["model"])
    want = expected_shapes(cfg)
    missing = sorted(set(want) - set(arrays))
    extra = sorted(set(arrays) - set(want))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint/config parameter sets differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, shape in want.items():
        if arrays[k].shape != shape:
            raise CheckpointMismatch(f"{k}: checkpoint shape {arrays[k].shape} != config shape {shape}")
    params = {k: T.Tensor(arrays[k], requires_grad=True) for k in sorted(want)}
    return params, cfg, meta
