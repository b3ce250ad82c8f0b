"""Run orchestration: seeded random streams, the pre-training and fine-tuning
loops, resumable run state, and the sparse-frames fine-tuning protocol.

Batches are processed one sample at a time with gradients accumulated into
the parameter buffers and a single optimizer step per batch, so the effective
batch size (the one the linear scaling rule sees) is `batch_size` regardless
of memory. Every random draw comes from one of a fixed set of named streams
derived from the run seed, which is what makes runs and resumes bit-exact.
"""

from __future__ import annotations

import binascii
import csv
import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .augment import cutmix, drop_path, mixup, randaug_light, random_crop_resize
from .data import to_float, subsample_every_n
from .losses import (AULabels, denormalize_intensity, loss_detection,
                     loss_intensity, loss_pretrain, patch_normalize, raw_targets)
from .metrics import f1_scores, intensity_report
from .model import (ENCODER_PREFIXES, CheckpointError, ModelConfig, ModelWeights,
                    classifier_forward, decoder_forward, encoder_forward,
                    init_weights, load_encoder_only, patchify, sample_mask)
from .optim import NumericalError, OptimState, adamw_step, init_optim, lr_at


class TrainError(ValueError):
    """Run configuration or data does not support the requested task."""


# one generator per concern; the order fixes each stream's child seed
STREAMS = ("init", "shuffle", "mask", "augment", "mix", "branch")


@dataclass
class TrainConfig:
    task: str
    epochs: int
    warmup_epochs: int
    base_lr: float
    batch_size: int
    weight_decay: float = 0.05
    seed: int = 0
    min_lr: float = 0.0
    drop_path_rate: float = 0.0
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    randaug_magnitude: int = 0
    randaug_prob: float = 0.0
    label_smoothing: float = 0.0
    reduction: str = "mean"
    eval_every: int = 0
    checkpoint: str | None = None
    checkpoint_every: int = 1
    recon_loss: str = "L1"
    random_crop: bool = False
    crop_min_scale: float = 0.6
    beta2: float | None = None
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.task not in ("pretrain", "detect", "intensity"):
            raise TrainError(f"unknown task {self.task!r}")
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise TrainError(
                f"warmup_epochs {self.warmup_epochs} outside 0..{self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("base_lr", "weight_decay", "min_lr", "drop_path_rate",
                     "mixup_alpha", "cutmix_alpha", "randaug_prob",
                     "label_smoothing"):
            if getattr(self, name) < 0:
                raise TrainError(f"{name} must be >= 0")
        if self.drop_path_rate >= 1:
            raise TrainError(f"drop_path_rate {self.drop_path_rate} must be < 1")
        if self.randaug_prob > 1:
            raise TrainError(f"randaug_prob {self.randaug_prob} must be <= 1")
        if not (0 <= self.randaug_magnitude <= 10):
            raise TrainError(
                f"randaug_magnitude {self.randaug_magnitude} outside 0..10")
        if self.reduction not in ("mean", "sum"):
            raise TrainError(f"reduction must be mean or sum, got {self.reduction!r}")
        if self.recon_loss not in ("L1", "L2"):
            raise TrainError(f"recon_loss must be L1 or L2, got {self.recon_loss!r}")
        if not (0.0 < self.crop_min_scale <= 1.0):
            raise TrainError(f"crop_min_scale {self.crop_min_scale} outside (0, 1]")
        if self.eval_every < 0 or self.checkpoint_every < 1:
            raise TrainError("eval_every must be >= 0 and checkpoint_every >= 1")
        if self.beta2 is None:
            self.beta2 = 0.95 if self.task == "pretrain" else 0.999
        if not (0.0 < self.beta2 < 1.0):
            raise TrainError(f"beta2 {self.beta2} outside (0, 1)")
        if self.freeze_encoder and self.task == "pretrain":
            raise TrainError("freeze_encoder only applies to fine-tune tasks")


_TRAIN_PRESETS = {
    # reference recipes at full scale; override freely for desk-sized runs
    "pretrain": dict(
        task="pretrain", epochs=800, warmup_epochs=40, base_lr=1.5e-4,
        batch_size=4096, weight_decay=0.05, beta2=0.95,
        recon_loss="L1", random_crop=True,
    ),
    "detect": dict(
        task="detect", epochs=20, warmup_epochs=10, base_lr=1e-4,
        batch_size=512, weight_decay=0.05, beta2=0.999,
        drop_path_rate=0.1, randaug_magnitude=9, randaug_prob=0.5,
        mixup_alpha=0.2, cutmix_alpha=0.75,
    ),
    "intensity": dict(
        task="intensity", epochs=20, warmup_epochs=10, base_lr=3e-5,
        batch_size=512, weight_decay=0.05, beta2=0.999,
        drop_path_rate=0.1, randaug_magnitude=9, randaug_prob=0.5,
    ),
}

# per-256 reference rates by (task, dataset family)
REFERENCE_BASE_LR = {
    ("detect", "bp4d"): 1e-4,
    ("detect", "bp4d_plus"): 2e-4,
    ("detect", "disfa"): 2e-4,
    ("intensity", "bp4d"): 3e-5,
    ("intensity", "disfa"): 1.5e-4,
}


def train_preset(name, **overrides):
    """Named TrainConfig preset ('pretrain', 'detect', 'intensity')."""
    if name not in _TRAIN_PRESETS:
        raise TrainError(f"unknown preset {name!r}, expected one of {sorted(_TRAIN_PRESETS)}")
    fields = dict(_TRAIN_PRESETS[name])
    fields.update(overrides)
    return TrainConfig(**fields)


def reference_base_lr(task, dataset):
    key = (task, dataset.lower().replace("+", "_plus"))
    if key not in REFERENCE_BASE_LR:
        raise TrainError(f"no reference rate for {key!r}")
    return REFERENCE_BASE_LR[key]


# ---------------------------------------------------------------------------
# named random streams


def fresh_streams(seed):
    return {
        name: np.random.default_rng(np.random.SeedSequence([seed, i]))
        for i, name in enumerate(STREAMS)
    }


def _stream_states(streams):
    return {name: streams[name].bit_generator.state for name in STREAMS}


def _restore_streams(states):
    streams = {}
    for name in STREAMS:
        bg = np.random.PCG64()
        bg.state = states[name]
        streams[name] = np.random.Generator(bg)
    return streams


# ---------------------------------------------------------------------------
# run state


@dataclass
class RunState:
    weights: ModelWeights
    opt: OptimState
    config: TrainConfig
    streams: dict
    epoch: int = 0  # completed epochs

    @property
    def step(self):
        # global optimizer step count doubles as the schedule index
        return self.opt.step


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


def write_trace(path, rows, append=False):
    """Append-only CSV trace: step, epoch, lr, loss."""
    mode = "a" if append else "w"
    new_file = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "epoch", "lr", "loss"])
        for r in rows:
            writer.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss)])


def start_run(model_config, config, init_from=None):
    """Fresh RunState; `init_from` loads encoder weights from a checkpoint
    produced by the pre-training stage (everything else re-initialized)."""
    if model_config.task != config.task:
        raise TrainError(
            f"model task {model_config.task!r} != train task {config.task!r}")
    if config.task == "pretrain" and model_config.mask_ratio == 0.0:
        raise TrainError("pre-training needs mask_ratio > 0")
    streams = fresh_streams(config.seed)
    if init_from is not None:
        weights = load_encoder_only(init_from, model_config, streams["init"])
    else:
        weights = init_weights(model_config, streams["init"])
    return RunState(weights=weights, opt=init_optim(weights), config=config,
                    streams=streams)


# ---------------------------------------------------------------------------
# resumable checkpoint container
#
#   magic "MAET" | u32 version | u32 meta_len | meta JSON
#   | u64 blob_len | float32 LE arrays | u32 crc32 of everything before it
#
# meta carries model/train configs, progress counters, rng states, and an
# array table of (key, shape, offset) with keys "w:", "m:", "v:" + param name.

_RUN_MAGIC = b"MAET"
_RUN_VERSION = 1


def save_run_state(path, run):
    entries = []
    blob = bytearray()
    def put(tag, name, arr):
        entries.append({"key": f"{tag}:{name}", "shape": list(arr.shape),
                        "offset": len(blob)})
        blob.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name, t in run.weights.param_items():
        put("w", name, t.data)
    for name, _ in run.weights.param_items():
        put("m", name, run.opt.m[name])
        put("v", name, run.opt.v[name])
    meta = {
        "model": dataclasses.asdict(run.weights.config),
        "train": dataclasses.asdict(run.config),
        "epoch": run.epoch,
        "opt_step": run.opt.step,
        "rng": _stream_states(run.streams),
        "arrays": entries,
    }
    meta_json = json.dumps(meta, sort_keys=True).encode()
    header = (_RUN_MAGIC + struct.pack("<I", _RUN_VERSION)
              + struct.pack("<I", len(meta_json)) + meta_json
              + struct.pack("<Q", len(blob)))
    body = header + bytes(blob)
    crc = binascii.crc32(body) & 0xFFFFFFFF
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))
    os.replace(tmp, path)  # resume point is never left half-written


def load_run_state(path):
    """Parse + validate fully before touching any state; raises CheckpointError."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _RUN_MAGIC:
        raise CheckpointError(f"{path}: not a run-state file")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if binascii.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != _RUN_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_len = struct.unpack("<I", raw[8:12])[0]
    meta_end = 12 + meta_len
    try:
        meta = json.loads(raw[12:meta_end].decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from exc
    blob_len = struct.unpack("<Q", raw[meta_end:meta_end + 8])[0]
    blob = raw[meta_end + 8:meta_end + 8 + blob_len]
    if len(blob) != blob_len:
        raise CheckpointError(f"{path}: truncated array data")

    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > blob_len:
            raise CheckpointError(f"{path}: array {entry['key']!r} out of bounds")
        arrays[entry["key"]] = np.frombuffer(
            blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()

    model_config = ModelConfig(**meta["model"])
    config = TrainConfig(**meta["train"])
    skeleton = init_weights(model_config, np.random.default_rng(0))
    problems = []
    for name, t in skeleton.params.items():
        for tag in ("w", "m", "v"):
            key = f"{tag}:{name}"
            if key not in arrays:
                problems.append(f"{key}: missing")
            elif arrays[key].shape != t.data.shape:
                problems.append(
                    f"{key}: file {arrays[key].shape} vs model {t.data.shape}")
    if len(arrays) != 3 * len(skeleton.params):
        problems.append("unexpected extra arrays")
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))

    opt = OptimState(step=meta["opt_step"])
    for name, t in skeleton.params.items():
        t.data = arrays[f"w:{name}"].astype(ng.default_dtype())
        opt.m[name] = arrays[f"m:{name}"].astype(ng.default_dtype())
        opt.v[name] = arrays[f"v:{name}"].astype(ng.default_dtype())
    return RunState(weights=skeleton, opt=opt, config=config,
                    streams=_restore_streams(meta["rng"]),
                    epoch=meta["epoch"])


# ---------------------------------------------------------------------------
# training loops


def _steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def _batch_starts(n, batch_size):
    return range(0, n, batch_size)


def _maybe_checkpoint(run, stop):
    cfg = run.config
    if cfg.checkpoint and (run.epoch % cfg.checkpoint_every == 0 or run.epoch == stop):
        save_run_state(cfg.checkpoint, run)


def pretrain_loop(run, corpus, until_epoch=None):
    """Mask-and-reconstruct training; returns the TraceRows produced by this
    call. Continues from run.epoch up to until_epoch (default: config.epochs),
    checkpointing to config.checkpoint every checkpoint_every epochs."""
    config = run.config
    if config.task != "pretrain":
        raise TrainError(f"pretrain_loop needs task 'pretrain', got {config.task!r}")
    if len(corpus) == 0:
        raise TrainError("dataset is empty")
    cfg = run.weights.config
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    spe = _steps_per_epoch(len(corpus), config.batch_size)
    rows = []
    while run.epoch < stop:
        order = run.streams["shuffle"].permutation(len(corpus))
        for start in _batch_starts(len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = lr_at(config, run.step, spe)
            run.weights.zero_grad()
            batch_loss = 0.0
            for i in idx:
                img = to_float(corpus.images[i])
                if config.random_crop:
                    img = random_crop_resize(img, run.streams["augment"],
                                             config.crop_min_scale, 1.0)
                patches = patchify(img, cfg.patch_size)
                targets = (patch_normalize(patches) if cfg.norm_pix_target
                           else raw_targets(patches))
                plan = sample_mask(cfg.num_patches, cfg.mask_ratio,
                                   run.streams["mask"])
                with ng.Tape() as tape:
                    latent = encoder_forward(run.weights, patches, plan)
                    pred = decoder_forward(run.weights, latent, plan)
                    loss = loss_pretrain(pred, targets, plan,
                                         config.recon_loss, config.reduction)
                    share = ng.scale(loss, 1.0 / len(idx))
                ng.backward(share, tape)
                batch_loss += loss.item() / len(idx)
            if not math.isfinite(batch_loss):
                raise NumericalError(f"non-finite loss at step {run.step}")
            adamw_step(run.weights, run.opt, lr, config.weight_decay,
                       beta2=config.beta2)
            rows.append(TraceRow(run.opt.step - 1, run.epoch, lr, batch_loss))
        run.epoch += 1
        _maybe_checkpoint(run, stop)
    return rows


def _labels_for(rec, task, index):
    if task == "detect":
        if rec.occurrence is None:
            raise TrainError(
                f"record {index} has no occurrence labels; task 'detect' needs them")
        return AULabels(occurrence=rec.occurrence.copy())
    if rec.intensity is None:
        raise TrainError(
            f"record {index} has no intensity labels; task 'intensity' needs them")
    return AULabels(intensity=rec.intensity.copy())


def _check_finetune_corpus(corpus, weights, task):
    if len(corpus) == 0:
        raise TrainError("dataset is empty")
    if corpus.manifest.num_aus != weights.config.num_aus:
        raise TrainError(
            f"manifest has {corpus.manifest.num_aus} action units, "
            f"model expects {weights.config.num_aus}")
    for i, rec in enumerate(corpus.manifest.records):
        _labels_for(rec, task, i)


def _smooth(labels, eps):
    return [AULabels(occurrence=l.occurrence * (1.0 - eps) + 0.5 * eps,
                     intensity=l.intensity, mask=l.mask) for l in labels]


def finetune_loop(run, corpus, eval_corpus=None, until_epoch=None):
    """Supervised stage on all patches (no masking). Detection mixes batches
    with mixup/cutmix; intensity uses neither. Returns (trace rows, list of
    (epoch, MetricsReport) from the held-out split every eval_every epochs)."""
    config = run.config
    task = config.task
    if task not in ("detect", "intensity"):
        raise TrainError(f"finetune_loop needs a fine-tune task, got {task!r}")
    _check_finetune_corpus(corpus, run.weights, task)
    if config.eval_every > 0 and eval_corpus is None:
        raise TrainError("eval_every > 0 needs a held-out eval corpus")
    cfg = run.weights.config
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    spe = _steps_per_epoch(len(corpus), config.batch_size)
    skip = ENCODER_PREFIXES if config.freeze_encoder else ()
    # frozen encoder means a deterministic feature extractor: no drop path
    use_branch = config.drop_path_rate > 0 and not config.freeze_encoder
    use_aug = config.randaug_prob > 0 and config.randaug_magnitude > 0
    rows = []
    reports = []
    while run.epoch < stop:
        order = run.streams["shuffle"].permutation(len(corpus))
        for start in _batch_starts(len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = lr_at(config, run.step, spe)
            imgs = [to_float(corpus.images[i]) for i in idx]
            labels = [_labels_for(corpus.manifest.records[i], task, i) for i in idx]
            if use_aug:
                imgs = [randaug_light(im, config.randaug_magnitude,
                                      config.randaug_prob, run.streams["augment"])
                        for im in imgs]
            if task == "detect":
                batch = np.stack(imgs)
                want_mix = config.mixup_alpha > 0
                want_cut = config.cutmix_alpha > 0
                if want_mix and want_cut:
                    if run.streams["mix"].random() < 0.5:
                        batch, labels, _ = mixup(batch, labels,
                                                 config.mixup_alpha,
                                                 run.streams["mix"])
                    else:
                        batch, labels, _ = cutmix(batch, labels,
                                                  config.cutmix_alpha,
                                                  run.streams["mix"])
                elif want_mix:
                    batch, labels, _ = mixup(batch, labels, config.mixup_alpha,
                                             run.streams["mix"])
                elif want_cut:
                    batch, labels, _ = cutmix(batch, labels, config.cutmix_alpha,
                                              run.streams["mix"])
                imgs = list(batch)
                if config.label_smoothing > 0:
                    labels = _smooth(labels, config.label_smoothing)
            run.weights.zero_grad()
            batch_loss = 0.0
            for img, lab in zip(imgs, labels):
                patches = patchify(np.asarray(img), cfg.patch_size)
                hook = None
                if use_branch:
                    hook = lambda t: drop_path(t, config.drop_path_rate,
                                               run.streams["branch"], training=True)
                with ng.Tape() as tape:
                    logits = classifier_forward(run.weights, patches, hook)
                    if task == "detect":
                        loss = loss_detection(logits, lab)
                    else:
                        loss = loss_intensity(ng.sigmoid(logits), lab)
                    share = ng.scale(loss, 1.0 / len(imgs))
                ng.backward(share, tape)
                batch_loss += loss.item() / len(imgs)
            if not math.isfinite(batch_loss):
                raise NumericalError(f"non-finite loss at step {run.step}")
            adamw_step(run.weights, run.opt, lr, config.weight_decay,
                       beta2=config.beta2, skip=skip)
            rows.append(TraceRow(run.opt.step - 1, run.epoch, lr, batch_loss))
        run.epoch += 1
        if config.eval_every > 0 and run.epoch % config.eval_every == 0:
            reports.append((run.epoch, evaluate(run.weights, eval_corpus)))
        _maybe_checkpoint(run, stop)
    return rows, reports


def evaluate(weights, corpus, threshold=0.5):
    """Held-out metrics: per-AU F1 for detection models, ICC/MSE/MAE on the
    0-5 scale for intensity models."""
    cfg = weights.config
    if cfg.task not in ("detect", "intensity"):
        raise TrainError(f"evaluate needs a fine-tune model, got {cfg.task!r}")
    _check_finetune_corpus(corpus, weights, cfg.task)
    au_names = corpus.manifest.au_names
    preds, gts = [], []
    for img, rec in zip(corpus.images, corpus.manifest.records):
        patches = patchify(to_float(img), cfg.patch_size)
        logits = classifier_forward(weights, patches)
        scores = ng.sigmoid(logits).data
        if cfg.task == "detect":
            preds.append((scores >= threshold).astype(np.int64))
            gts.append(rec.occurrence.astype(np.int64))
        else:
            preds.append(denormalize_intensity(scores))
            gts.append(rec.intensity.astype(np.float64))
    if cfg.task == "detect":
        return f1_scores(np.stack(preds), np.stack(gts), au_names=au_names)
    return intensity_report(np.stack(preds), np.stack(gts), au_names=au_names)


# ---------------------------------------------------------------------------
# sparse-frames protocol


# training-set fraction -> fine-tune epochs
PARTIAL_EPOCHS = {0.1: 200, 0.01: 2000, 0.005: 4000, 0.002: 10000, 0.001: 20000}


def partial_protocol(manifest, fraction, config):
    """Every-Nth-frame subset plus the epoch count that goes with it.

    Only the table fractions are accepted; returns (subset manifest, derived
    TrainConfig with the adjusted epoch budget).
    """
    match = None
    for key in PARTIAL_EPOCHS:
        if math.isclose(fraction, key, rel_tol=1e-9):
            match = key
            break
    if match is None:
        raise TrainError(
            f"fraction {fraction} not in protocol table {sorted(PARTIAL_EPOCHS)}")
    n = round(1.0 / match)
    subset = subsample_every_n(manifest, n)
    derived = dataclasses.replace(config, epochs=PARTIAL_EPOCHS[match])
    return subset, derived
