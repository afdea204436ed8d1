"""Model wrapper, Adam/SGD optimization, training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fusenet import data as D
from fusenet.autograd import Tensor, backward, masked_softmax_cross_entropy
from fusenet.deepunet import init_pipeline, pipeline_forward
from fusenet.fusion import FusionModelConfig, fusion_forward, init_fusion, total_loss
from fusenet.grouping import GroupingResult
from fusenet.metrics import ConfusionMatrix, MetricsReport, accumulate_confusion, summarize
from fusenet.nn import parameter_dict

log = logging.getLogger(__name__)

ARCHITECTURES = ("fusion", "deepunet")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class SegmentationModel:
    """Either the multi-group fusion network or a single plain DeepUNet pipeline.

    The ``deepunet`` architecture uses exactly one group and trains on its
    head logits alone; it is the single-source baseline.
    """

    def __init__(self, config: FusionModelConfig, architecture: str = "fusion",
                 seed: int = 0, dtype=None):
        if architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture!r}")
        if architecture == "deepunet" and len(config.groups) != 1:
            raise ValueError("the deepunet architecture takes exactly one band group")
        self.config = config
        self.architecture = architecture
        rng = np.random.default_rng(seed)
        if architecture == "fusion":
            self.weights = init_fusion(config, rng, dtype)
        else:
            self.weights = init_pipeline(config.pipeline_config(0), rng, prefix="group0", dtype=dtype)

    @property
    def groups(self) -> list[list[str]]:
        return self.config.groups

    def named_parameters(self):
        return self.weights.named_parameters()

    def parameters(self) -> dict[str, Tensor]:
        return parameter_dict(self)

    def logits(self, inputs: Sequence[np.ndarray]):
        """Returns ``(final_logits, per-pipeline logits, raw forward output)``."""
        tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
        if self.architecture == "fusion":
            out = fusion_forward(tensors, self.config, self.weights)
            return out.final_logits, out.pipeline_logits, out
        out = pipeline_forward(tensors[0], self.config.pipeline_config(0), self.weights)
        return out.logits, [], out

    def loss(self, inputs: Sequence[np.ndarray], labels: np.ndarray) -> Tensor:
        final, _, out = self.logits(inputs)
        if self.architecture == "fusion":
            return total_loss(out, labels, self.config.aux_weight)
        return masked_softmax_cross_entropy(final, labels)[0]

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        final, _, _ = self.logits(inputs)
        return final.data.argmax(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    patch_size: int = 64
    stride: int | None = None
    aux_weight: float = 0.3
    seed: int = 0
    augment: bool = False
    optimizer: str = "adam"
    checkpoint_interval: int = 0
    eval_every: int = 1
    record_time: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.epsilon <= 0:
            raise ValueError("invalid optimizer hyper-parameters")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.requires_grad and p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.dtype)
        p.grad = None


def sgd_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> None:
    state.t += 1
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
        p.data -= (config.learning_rate * p.grad).astype(p.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedTile:
    id: str
    stacks: list[np.ndarray]
    label: np.ndarray


def prepare_tiles(manifest: D.DatasetManifest, tile_ids: Sequence[str], groups,
                  stats: D.NormalizationStats) -> list[PreparedTile]:
    out = []
    for tid in tile_ids:
        tile = D.load_tile(manifest, tid)
        out.append(PreparedTile(tid, D.normalized_groups(tile, groups, stats), tile.label))
    return out


def _make_sample(tiles, index, size, augment, aug_seed) -> D.PatchSample:
    tile_idx, offset = index
    t = tiles[tile_idx]
    sample = D.crop_sample(t.id, t.stacks, t.label, offset, size)
    if augment:
        sample = D.augment(sample, seed=aug_seed)
    return sample


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_oa: float | None
    seconds: float | None


@dataclass
class TrainResult:
    model: SegmentationModel
    optimizer: OptimizerState
    stats: D.NormalizationStats
    log: list[EpochLog]
    train_config: TrainConfig
    grouping: GroupingResult | None = None


def _groups_of(grouping) -> list[list[str]]:
    if isinstance(grouping, GroupingResult):
        return grouping.groups
    return [list(g) for g in grouping]


def write_log_csv(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "val_oa", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.mean_loss), "" if r.val_oa is None else repr(r.val_oa),
                        "" if r.seconds is None else f"{r.seconds:.3f}"])


def train(manifest: D.DatasetManifest, grouping, model_config: FusionModelConfig,
          train_config: TrainConfig, architecture: str = "fusion", workers: int = 1,
          checkpoint_path=None, log_path=None, train_split: str = "train",
          val_split: str = "val") -> TrainResult:
    """Seeded minibatch training; (seed, config, dataset) fully determine the result.

    ``workers`` only parallelizes sample preparation; batch order and
    augmentation seeds are fixed by ``(seed, epoch, position)``.
    """
    groups = _groups_of(grouping)
    if [list(g) for g in model_config.groups] != groups:
        raise ValueError("model config groups do not match the grouping")
    model_config.aux_weight = train_config.aux_weight
    cfg = train_config
    train_ids = manifest.split.get(train_split, [])
    if not train_ids:
        raise D.DatasetError(f"split {train_split!r} is empty")
    train_tiles_raw = [D.load_tile(manifest, tid) for tid in train_ids]
    stats = D.compute_normalization(manifest, tiles=train_tiles_raw)
    tiles = [PreparedTile(t.id, D.normalized_groups(t, groups, stats), t.label) for t in train_tiles_raw]
    factor = 2 ** model_config.depth
    index = [(i, off) for i, t in enumerate(tiles)
             for off in D.extract_patches(t.label.shape, cfg.patch_size, cfg.stride, factor)]
    val_ids = manifest.split.get(val_split, [])
    val_tiles = prepare_tiles(manifest, val_ids, groups, stats) if val_ids else []

    model = SegmentationModel(model_config, architecture, seed=cfg.seed)
    params = model.parameters()
    state = OptimizerState()
    step_fn = adam_step if cfg.optimizer == "adam" else sgd_step
    rows: list[EpochLog] = []
    grouping_result = grouping if isinstance(grouping, GroupingResult) else None
    result = TrainResult(model, state, stats, rows, cfg, grouping_result)
    log.info("training %s model on %d patches: %s", architecture, len(index), json.dumps(cfg.to_dict()))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(index))
            losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                positions = range(b0, min(b0 + cfg.batch_size, len(order)))
                samples = list(pool.map(
                    lambda pos: _make_sample(tiles, index[order[pos]], cfg.patch_size, cfg.augment,
                                             [cfg.seed, epoch, pos]), positions))
                inputs, labels = D.batch_samples(samples)
                loss = model.loss(inputs, labels)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b0 // cfg.batch_size}")
                backward(loss)
                step_fn(params, state, cfg)
                losses.append(value)
            val_oa = None
            if val_tiles and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                val_oa = evaluate_tiles(model, val_tiles, cfg.patch_size, cfg.batch_size,
                                        manifest.classes)[0].overall_accuracy
            seconds = time.perf_counter() - start if cfg.record_time else None
            rows.append(EpochLog(epoch, float(np.mean(losses)), val_oa, seconds))
            log.info("epoch %d loss %.6f val_oa %s", epoch, rows[-1].mean_loss, val_oa)
            if log_path is not None:
                write_log_csv(log_path, rows)
            if checkpoint_path is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, result, epoch=epoch + 1)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, result, epoch=cfg.epochs)
    if log_path is not None:
        write_log_csv(log_path, rows)
    return result


def predict_tile(model: SegmentationModel, stacks: Sequence[np.ndarray], patch_size: int,
                 batch_size: int = 4) -> np.ndarray:
    """Per-pixel argmax over edge-aligned patches; later patches overwrite overlaps."""
    h, w = stacks[0].shape[1:]
    offsets = D.extract_patches((h, w), patch_size, patch_size, 2 ** model.config.depth)
    pred = np.zeros((h, w), dtype=np.uint8)
    for b0 in range(0, len(offsets), batch_size):
        chunk = offsets[b0:b0 + batch_size]
        inputs = [np.stack([s[:, r:r + patch_size, c:c + patch_size] for r, c in chunk]) for s in stacks]
        out = model.predict(inputs)
        for (r, c), p in zip(chunk, out):
            pred[r:r + patch_size, c:c + patch_size] = p
    return pred


def evaluate_tiles(model: SegmentationModel, tiles: Sequence[PreparedTile], patch_size: int,
                   batch_size: int = 4, class_names=None):
    cm = ConfusionMatrix.empty(model.config.classes)
    preds = {}
    for t in tiles:
        pred = predict_tile(model, t.stacks, patch_size, batch_size)
        preds[t.id] = pred
        cm = accumulate_confusion(pred, t.label, cm)
    return summarize(cm, class_names), preds, cm


def evaluate(checkpoint, manifest: D.DatasetManifest, split: str = "val", patch_size: int | None = None,
             batch_size: int = 4, error_image_dir=None) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Score a checkpoint (path or loaded :class:`Checkpoint`) on one split of a manifest."""
    from fusenet.metrics import write_error_image
    import os

    ck = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    if ck.model.config.classes != len(manifest.classes):
        raise ValueError(f"checkpoint has {ck.model.config.classes} classes, manifest has {len(manifest.classes)}")
    for g in ck.model.groups:
        for band in g:
            if band not in manifest.bands:
                raise ValueError(f"checkpoint band {band!r} is missing from the manifest")
    tile_ids = manifest.split.get(split)
    if not tile_ids:
        raise D.DatasetError(f"split {split!r} is empty or missing")
    tiles = prepare_tiles(manifest, tile_ids, ck.model.groups, ck.stats)
    size = patch_size or ck.train_config.get("patch_size", 64)
    report, preds, _ = evaluate_tiles(ck.model, tiles, size, batch_size, manifest.classes)
    if error_image_dir is not None:
        os.makedirs(error_image_dir, exist_ok=True)
        for t in tiles:
            write_error_image(os.path.join(error_image_dir, f"{t.id}_errors.ppm"), preds[t.id], t.label)
    return report, preds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FFNET\x01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: SegmentationModel
    stats: D.NormalizationStats
    optimizer: OptimizerState
    grouping: dict | None
    train_config: dict
    epoch: int
    header: dict


def _checkpoint_header_and_blobs(result: TrainResult, epoch: int):
    params = result.model.parameters()
    blobs = [(name, t.data) for name, t in params.items()]
    for name in params:
        if name in result.optimizer.m:
            blobs.append((f"adam.m/{name}", result.optimizer.m[name]))
            blobs.append((f"adam.v/{name}", result.optimizer.v[name]))
    manifest, offset = [], 0
    payload = []
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    grouping = result.grouping
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": result.model.architecture,
        "model": result.model.config.to_dict(),
        "grouping": json.loads(grouping.to_json()) if isinstance(grouping, GroupingResult) else grouping,
        "normalization": result.stats.to_dict(),
        "train": result.train_config.to_dict() if isinstance(result.train_config, TrainConfig)
        else result.train_config,
        "step": result.optimizer.t,
        "epoch": epoch,
        "seed": (result.train_config.seed if isinstance(result.train_config, TrainConfig)
                 else result.train_config.get("seed")),
        "tensors": manifest,
    }
    return header, b"".join(payload)


def checkpoint_bytes(result: TrainResult, epoch: int) -> bytes:
    header, payload = _checkpoint_header_and_blobs(result, epoch)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def save_checkpoint(path, result, epoch: int | None = None) -> None:
    """Write ``result`` (a :class:`TrainResult` or loaded :class:`Checkpoint`)."""
    if isinstance(result, Checkpoint):
        epoch = result.epoch if epoch is None else epoch
        result = TrainResult(result.model, result.optimizer, result.stats, [], result.train_config,
                             result.grouping)
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(result, 0 if epoch is None else epoch))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: length mismatch (file truncated in header length)")
    (head_len,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    if len(raw) < pos + head_len:
        raise CheckpointError(f"{path}: length mismatch (header truncated)")
    try:
        header = json.loads(raw[pos:pos + head_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += head_len
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[pos:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: length mismatch ({len(payload)} payload bytes, expected {expected})")
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        if n != t["nbytes"]:
            raise CheckpointError(f"{path}: length mismatch for tensor {t['name']!r}")
        chunk = payload[t["offset"]:t["offset"] + n]
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)

    m = header["model"]
    config = FusionModelConfig(groups=m["groups"], width=m["width"], depth=m["depth"], classes=m["classes"],
                               aux_weight=m["aux_weight"], upsample_mode=m["upsample_mode"],
                               shared_in_final=m["shared_in_final"])
    model = SegmentationModel(config, header["architecture"], seed=0)
    params = model.parameters()
    for name, t in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: tensor {name!r} is missing")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    state = OptimizerState(t=int(header["step"]))
    for name in params:
        if f"adam.m/{name}" in arrays:
            state.m[name] = arrays[f"adam.m/{name}"].copy()
            state.v[name] = arrays[f"adam.v/{name}"].copy()
    return Checkpoint(model, D.NormalizationStats.from_dict(header["normalization"]), state,
                      header["grouping"], header["train"], int(header["epoch"]), header)
