"""Loss, optimizer loop, learning-rate grid search and checkpoints.

The loss is pixel-normalized cross-entropy over softmax probabilities:
``L = -(1/n_pixels) * sum_p sum_c target[p,c] * log softmax(logits[p])[c]``.
Softmax subtracts the per-pixel max before exponentiating and log inputs
are clamped at 1e-12, so saturated wrong predictions stay finite.

Training is deterministic given the config seed: initialization,
shuffling and crop positions all flow from one generator, and no array
is mutated in place, so two runs with the same seed produce identical
loss histories. The loop is the single owner of the evolving parameter
dict.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import engine
from .dataset import Preprocessing, SequenceDataset, encode_one_hot, load_image, load_mask
from .errors import (CheckpointIncompatibleError, CorruptCheckpointError,
                     TrainingDivergedError)
from .model import ModelSpec, spec_from_dict, spec_to_dict, trainable_names

__all__ = [
    "TrainingConfig",
    "Checkpoint",
    "AdamState",
    "DEFAULT_LR_GRID",
    "softmax",
    "cross_entropy_loss",
    "cross_entropy_grad",
    "adam_step",
    "train",
    "lr_grid_search",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_csv",
]

DEFAULT_LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

CHECKPOINT_MAGIC = b"TSEGCKPT"
CHECKPOINT_VERSION = 1

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer and loop settings. Adam moment constants default to the
    values recommended for the optimizer (0.9, 0.999, eps 1e-8)."""

    learning_rate: float = 1e-4
    max_iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 100
    crop_size: tuple[int, int] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.crop_size is not None:
            h, w = self.crop_size
            if h < 1 or w < 1:
                raise ValueError(f"crop_size must be positive, got {self.crop_size}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], names) -> "AdamState":
        return cls(m={k: np.zeros_like(params[k]) for k in names},
                   v={k: np.zeros_like(params[k]) for k in names})


@dataclass
class Checkpoint:
    model: ModelSpec
    params: dict[str, np.ndarray]
    optimizer: AdamState | None
    iteration: int
    config: TrainingConfig
    preprocessing: Preprocessing
    version: int = CHECKPOINT_VERSION


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the trailing class axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_loss_shapes(logits, target):
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {logits.shape} != target shape {target.shape}")
    if logits.ndim < 2:
        raise ValueError("expected at least (pixels, classes) arrays")
    return logits, target


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> float:
    """Pixel-normalized cross-entropy of logits against a one-hot target.

    Accepts (h, w, C) or batched (n, h, w, C) arrays; normalization is
    by the total pixel count either way.
    """
    logits, target = _check_loss_shapes(logits, target)
    n_pixels = int(np.prod(logits.shape[:-1]))
    logp = np.log(np.maximum(softmax(logits), LOG_FLOOR))
    return float(-(target * logp).sum() / n_pixels)


def cross_entropy_grad(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Analytic loss gradient with respect to the logits:
    (softmax - target) / n_pixels."""
    logits, target = _check_loss_shapes(logits, target)
    n_pixels = int(np.prod(logits.shape[:-1]))
    return (softmax(logits) - target) / n_pixels


def adam_step(params: dict, grads: dict, state: AdamState,
              config: TrainingConfig) -> dict:
    """One Adam update; returns a new parameter dict (no in-place writes)."""
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    out = dict(params)
    for name, g in grads.items():
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        out[name] = params[name] - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return out


class _FrameSampler:
    """Seed-determined epoch shuffling over the flattened frame list."""

    def __init__(self, n_frames: int, rng: np.random.Generator):
        self.n = n_frames
        self.rng = rng
        self.order: list[int] = []

    def take(self, count: int) -> list[int]:
        out = []
        while len(out) < count:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(self.order.pop(0))
        return out


def _make_batch(records, preprocessing, num_classes, crop_size, rng,
                mask_transform):
    images, targets = [], []
    for rec in records:
        img = load_image(rec, preprocessing)
        mask = load_mask(rec)
        if mask_transform is not None:
            mask = mask_transform(mask)
        if crop_size is not None:
            ch, cw = crop_size
            h, w = img.shape[:2]
            if h < ch or w < cw:
                raise ValueError(f"frame {rec.frame_id} ({h}x{w}) is smaller "
                                 f"than crop_size {crop_size}")
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            img = img[top:top + ch, left:left + cw]
            mask = mask[top:top + ch, left:left + cw]
        images.append(img)
        targets.append(encode_one_hot(mask, num_classes).astype(np.float64))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"frames in a batch differ in size {shapes}; "
                         "set crop_size to train on mixed-size sequences")
    return np.stack(images), np.stack(targets)


def train(model: ModelSpec, params: dict, dataset: SequenceDataset,
          config: TrainingConfig, *, preprocessing: Preprocessing | None = None,
          checkpoint_dir=None, mask_transform=None
          ) -> tuple[Checkpoint, list[float]]:
    """Run ``config.max_iterations`` Adam steps and return the final
    checkpoint plus the per-iteration training loss history.

    Frames are full images unless ``config.crop_size`` asks for random
    crops (sizes must be multiples of the model's output stride).
    Intermediate checkpoints land in ``checkpoint_dir`` every
    ``checkpoint_every`` iterations when a directory is given. A
    non-finite loss aborts with :class:`TrainingDivergedError` carrying
    the iteration index.
    """
    if preprocessing is None:
        preprocessing = Preprocessing()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if mask_transform is None and dataset.num_classes != model.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes but the "
                         f"dataset has {dataset.num_classes}")
    params = dict(params)
    names = trainable_names(model)
    state = AdamState.zeros_like(params, names)
    rng = np.random.default_rng(config.seed)
    frames = dataset.frames()
    sampler = _FrameSampler(len(frames), rng)
    history: list[float] = []

    for iteration in range(1, config.max_iterations + 1):
        records = [frames[i] for i in sampler.take(config.batch_size)]
        x, target = _make_batch(records, preprocessing, model.num_classes,
                                config.crop_size, rng, mask_transform)
        # a diverging run is reported via TrainingDivergedError, not as
        # numpy overflow warnings mid-flight
        with np.errstate(over="ignore", invalid="ignore"):
            if x.shape[1] % model.output_stride or x.shape[2] % model.output_stride:
                x, (top, left, h0, w0) = engine._pad_to_multiple(x, model.output_stride)
                logits, tape, updates = engine.training_forward(model, params, x)
                logits = logits[:, top:top + h0, left:left + w0, :]
                loss = cross_entropy_loss(logits, target)
                dlogits = cross_entropy_grad(logits, target)
                dfull = np.zeros(x.shape[:3] + (model.num_classes,), dtype=np.float64)
                dfull[:, top:top + h0, left:left + w0, :] = dlogits
                dlogits = dfull
            else:
                logits, tape, updates = engine.training_forward(model, params, x)
                loss = cross_entropy_loss(logits, target)
                dlogits = cross_entropy_grad(logits, target)
            if not np.isfinite(loss):
                raise TrainingDivergedError(iteration)
            grads = engine.training_backward(model, params, dlogits, tape)
            params = adam_step(params, grads, state, config)
            engine.apply_running_updates(params, updates)
        history.append(loss)
        if checkpoint_dir is not None and iteration % config.checkpoint_every == 0:
            ckpt = Checkpoint(model, params, state, iteration, config, preprocessing)
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"checkpoint_{iteration:06d}.ckpt")

    final = Checkpoint(model, params, state, config.max_iterations, config,
                       preprocessing)
    return final, history


def lr_grid_search(model: ModelSpec, params: dict, dataset: SequenceDataset,
                   candidate_rates=DEFAULT_LR_GRID, budget: int = 100, *,
                   val_fraction: float = 0.2, seed: int = 0,
                   config: TrainingConfig | None = None,
                   preprocessing: Preprocessing | None = None,
                   score_fn=None) -> tuple[float, dict[float, float]]:
    """Train once per candidate rate and pick the best validation mean IoU.

    Every run starts from the same parameters, seed and budget. A run
    that diverges scores -inf instead of aborting the search; ties go to
    the smaller rate. ``score_fn(rate) -> float`` replaces the
    train-and-evaluate scoring when supplied (used for plumbing tests).
    """
    candidates = list(candidate_rates)
    if not candidates:
        raise ValueError("candidate_rates must be non-empty")
    if score_fn is None:
        from .dataset import split_train_val
        from .metrics import evaluate

        base = config if config is not None else TrainingConfig()
        train_ds, val_ds = split_train_val(dataset, val_fraction, seed)

        def score_fn(rate: float) -> float:
            cfg = replace(base, learning_rate=rate, max_iterations=budget, seed=seed)
            try:
                ckpt, _ = train(model, params, train_ds, cfg,
                                preprocessing=preprocessing)
            except TrainingDivergedError:
                return float("-inf")
            report = evaluate(model, ckpt.params, val_ds,
                              preprocessing=ckpt.preprocessing)
            mean_iou = report.aggregate.iou.mean_iou
            return float("-inf") if mean_iou is None else mean_iou

    scores: dict[float, float] = {}
    for rate in candidates:
        scores[rate] = float(score_fn(rate))
    best_rate = None
    best_score = float("-inf")
    for rate in sorted(scores):
        if scores[rate] > best_score:
            best_rate, best_score = rate, scores[rate]
    return best_rate, scores


# --- checkpoint file format --------------------------------------------------
#
# magic (8 bytes) | version (u32 LE) | header length (u64 LE) | header JSON |
# tensor payload. Tensors are concatenated in sorted-name order,
# little-endian, row-major; the header records name/shape/dtype/offset.
# The encoding is canonical, so save -> load -> save is byte-identical.

def _config_to_dict(config: TrainingConfig) -> dict:
    d = dataclasses.asdict(config)
    if d["crop_size"] is not None:
        d["crop_size"] = list(d["crop_size"])
    return d


def _config_from_dict(d: dict) -> TrainingConfig:
    d = dict(d)
    if d.get("crop_size") is not None:
        d["crop_size"] = tuple(d["crop_size"])
    return TrainingConfig(**d)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors: dict[str, np.ndarray] = dict(ckpt.params)
    optimizer = None
    if ckpt.optimizer is not None:
        optimizer = {"t": ckpt.optimizer.t}
        for name, arr in ckpt.optimizer.m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in ckpt.optimizer.v.items():
            tensors[f"adam.v.{name}"] = arr

    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": len(payload),
                        "nbytes": len(raw)})
        payload.extend(raw)

    header = {
        "model": spec_to_dict(ckpt.model),
        "config": _config_to_dict(ckpt.config),
        "preprocessing": {"mean": list(ckpt.preprocessing.mean),
                          "std": list(ckpt.preprocessing.std)},
        "iteration": ckpt.iteration,
        "optimizer": optimizer,
        "params": sorted(ckpt.params),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode()
    blob = (CHECKPOINT_MAGIC
            + struct.pack("<I", ckpt.version)
            + struct.pack("<Q", len(header_bytes))
            + header_bytes
            + bytes(payload))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < prefix:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint "
                                     f"({len(raw)} bytes)")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    version, = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointIncompatibleError(
            f"{path}: checkpoint version {version}, reader supports "
            f"{CHECKPOINT_VERSION}")
    header_len, = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 4)
    if len(raw) < prefix + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = raw[prefix + header_len:]

    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CorruptCheckpointError(
                f"{path}: tensor {entry['name']} extends past end of file")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:start + nbytes], dtype=dtype
        ).reshape(entry["shape"]).copy()

    params = {name: tensors[name] for name in header["params"]}
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = AdamState(
            m={n[len("adam.m."):]: a for n, a in tensors.items()
               if n.startswith("adam.m.")},
            v={n[len("adam.v."):]: a for n, a in tensors.items()
               if n.startswith("adam.v.")},
            t=header["optimizer"]["t"],
        )
    return Checkpoint(
        model=spec_from_dict(header["model"]),
        params=params,
        optimizer=optimizer,
        iteration=header["iteration"],
        config=_config_from_dict(header["config"]),
        preprocessing=Preprocessing(mean=tuple(header["preprocessing"]["mean"]),
                                    std=tuple(header["preprocessing"]["std"])),
        version=version,
    )


def write_loss_csv(history, path) -> None:
    """Loss history as ``iteration,loss`` rows, 1-based iterations."""
    lines = ["iteration,loss"]
    lines += [f"{i},{loss!r}" for i, loss in enumerate(history, 1)]
    Path(path).write_text("\n".join(lines) + "\n")
