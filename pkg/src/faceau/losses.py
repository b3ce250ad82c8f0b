"""Training objectives: masked-patch reconstruction, occurrence BCE,
intensity regression, plus patch-wise target normalization.

Reduction convention: reconstruction averages over masked elements and the
per-sample task losses sum over action units; batch averaging happens in the
training loop. `reduction="sum"` on the reconstruction loss reproduces the
plain summed form instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor


class LossError(ValueError):
    """Loss inputs are structurally unusable (empty mask, missing labels)."""


@dataclass
class PretrainTargets:
    """Ground-truth patch rows for reconstruction, optionally standardized."""

    patches: np.ndarray  # [N, p*p*C]
    normalized: bool = False
    mean: np.ndarray | None = None  # [N, 1] caches for de-normalization
    var: np.ndarray | None = None


def raw_targets(patches):
    return PretrainTargets(patches=np.asarray(patches, dtype=np.float64))


def patch_normalize(patches, eps=1e-6):
    """Standardize each patch row to mean 0 / variance 1 (eps-guarded)."""
    patches = np.asarray(patches, dtype=np.float64)
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    normed = (patches - mean) / np.sqrt(var + eps)
    return PretrainTargets(patches=normed, normalized=True, mean=mean, var=var)


def denormalize_patches(pred, targets):
    """Map predicted patch rows back to raw pixel scale for rendering."""
    pred = np.asarray(pred, dtype=np.float64)
    if not targets.normalized:
        return pred
    return pred * np.sqrt(targets.var + 1e-6) + targets.mean


@dataclass
class AULabels:
    """Per-sample action-unit labels.

    occurrence holds reals in [0, 1]: hard bits from a manifest, or soft
    targets after mixing. intensity holds integer levels 0..5 where the
    validity mask is set.
    """

    occurrence: np.ndarray | None = None
    intensity: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        n = None
        if self.occurrence is not None:
            self.occurrence = np.asarray(self.occurrence, dtype=np.float64)
            n = self.occurrence.size
            if ((self.occurrence < 0) | (self.occurrence > 1)).any():
                raise LossError(f"occurrence values outside [0, 1]: {self.occurrence}")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64)
            n = self.intensity.size if n is None else n
        if n is None:
            raise LossError("labels need occurrence or intensity values")
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.intensity is not None:
            valid = self.intensity[self.mask]
            if ((valid < 0) | (valid > 5) | (valid != np.round(valid))).any():
                raise LossError(f"intensity levels must be integers in 0..5: {self.intensity}")

    @property
    def num_aus(self):
        src = self.occurrence if self.occurrence is not None else self.intensity
        return int(src.size)


def loss_pretrain(pred, targets, plan, flavor="L1", reduction="mean"):
    """Reconstruction loss over MASKED patches only.

    Mean over masked elements by default; "sum" gives the plain summed form.
    Visible patches never contribute.
    """
    if flavor not in ("L1", "L2"):
        raise ValueError(f"flavor must be L1 or L2, got {flavor!r}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be mean or sum, got {reduction!r}")
    masked = plan.masked_idx
    if masked.size == 0:
        raise LossError("mask plan has no masked patches; reconstruction loss is degenerate")
    if pred.shape != targets.patches.shape:
        raise ng.ShapeError(f"pred {pred.shape} vs targets {targets.patches.shape}")
    pred_m = ng.index_select(pred, masked)
    tgt_m = Tensor(targets.patches[masked])
    diff = ng.sub(pred_m, tgt_m)
    per_elem = ng.abs(diff) if flavor == "L1" else ng.square(diff)
    return ng.mean(per_elem) if reduction == "mean" else ng.sum(per_elem)


def _bce_with_logits(logits, target):
    # max(x,0) - x*p + log(1 + exp(-|x|)): stable for any logit magnitude
    ax = ng.abs(logits)
    relu_x = ng.scale(ng.add(logits, ax), 0.5)
    linear = ng.sub(relu_x, ng.mul(logits, Tensor(target)))
    softplus = ng.log(ng.add(ng.exp(ng.scale(ax, -1.0)), 1.0))
    return ng.add(linear, softplus)


def loss_detection(logits, labels):
    """Sigmoid binary cross-entropy summed over valid action units."""
    if labels.occurrence is None:
        raise LossError("detection loss needs occurrence labels")
    if logits.shape != labels.occurrence.shape:
        raise ng.ShapeError(f"logits {logits.shape} vs labels {labels.occurrence.shape}")
    per_au = _bce_with_logits(logits, labels.occurrence)
    weighted = ng.mul(per_au, Tensor(labels.mask.astype(np.float64)))
    return ng.sum(weighted)


def loss_intensity(pred, labels):
    """Squared error against levels normalized to [0, 1], summed over valid AUs.

    `pred` must already be on the [0, 1] scale (sigmoid applied upstream).
    """
    if labels.intensity is None:
        raise LossError("intensity loss needs intensity labels")
    if pred.shape != labels.intensity.shape:
        raise ng.ShapeError(f"pred {pred.shape} vs labels {labels.intensity.shape}")
    target = labels.intensity / 5.0
    sq = ng.square(ng.sub(pred, Tensor(target)))
    weighted = ng.mul(sq, Tensor(labels.mask.astype(np.float64)))
    return ng.sum(weighted)


def denormalize_intensity(pred01):
    """[0,1]-scale predictions -> 0-5 scale, clamped."""
    arr = pred01.data if isinstance(pred01, Tensor) else np.asarray(pred01, dtype=np.float64)
    return np.clip(arr * 5.0, 0.0, 5.0)
