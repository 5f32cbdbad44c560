"""Training loss and evaluation measures.

The training objective combines per-pixel cross entropy with a soft Dice
overlap on the foreground channel:

    total = ce - dice
    ce    = mean over pixels of -sum_c y_c log(clamp(yhat_c, eps, 1))
    dice  = (2 sum y_fg yhat_fg + eps) / (sum y_fg^2 + sum yhat_fg^2 + eps)

Cross entropy is averaged per pixel so the magnitude does not depend on
resolution; Dice is a single batch-global fraction with squared-sum
denominators, smoothed by eps so a correctly predicted empty foreground
scores 1. The minimum of total is -1, reached only as yhat -> y.

Scan-level measures follow the densitometry conventions: %emph of
reference and predicted masks, their signed difference (ref - pred), and
the hard Dice coefficient of the two binary masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cdf import CdfFeature
from .data import CtVolume, lung_slice_indices, percent_emphysema
from .errors import ConfigError
from .network import SegmentationNet, normalize_slice

EPS = 1e-6


@dataclass(frozen=True)
class LossValue:
    """total = ce_term - dice_term; fields stay attached to the graph."""

    total: torch.Tensor
    ce_term: torch.Tensor
    dice_term: torch.Tensor


def loss(y: torch.Tensor, yhat: torch.Tensor) -> LossValue:
    """Joint cross-entropy + Dice loss on one-hot truth and probabilities."""
    if y.shape != yhat.shape or y.ndim != 4 or y.shape[1] != 2:
        raise ConfigError(f"loss needs matching B x 2 x H x W, got {tuple(y.shape)} vs {tuple(yhat.shape)}")
    ce = -(y * torch.log(torch.clamp(yhat, EPS, 1.0))).sum(dim=1).mean()
    t = y[:, 1]
    p = yhat[:, 1]
    dice = (2.0 * (t * p).sum() + EPS) / ((t * t).sum() + (p * p).sum() + EPS)
    return LossValue(total=ce - dice, ce_term=ce, dice_term=dice)


def dsc(pred_mask: np.ndarray, ref_mask: np.ndarray) -> float:
    """Hard Dice overlap of two binary masks; both empty counts as 1."""
    pred = np.asarray(pred_mask, dtype=bool)
    ref = np.asarray(ref_mask, dtype=bool)
    if pred.shape != ref.shape:
        raise ConfigError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & ref)) / denom


def predict_scan(model: SegmentationNet, volume: CtVolume,
                 domain: CdfFeature | None, batch_size: int = 8) -> np.ndarray:
    """Segment every lung-containing slice of a volume.

    Returns a boolean grid of the volume's shape. Foreground needs a
    strictly larger logit than background (exact ties resolve to
    background), and anything outside the lung mask is discarded.
    """
    if model.cfg.uses_domain:
        if domain is None:
            raise ConfigError(f"variant {model.cfg.variant} needs a domain feature")
        if domain.n_bins != model.cfg.n_cdf_bins:
            raise ConfigError(
                f"domain feature has {domain.n_bins} bins, model expects "
                f"{model.cfg.n_cdf_bins}"
            )
    indices = lung_slice_indices(volume)
    out = np.zeros(volume.shape, dtype=bool)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for start in range(0, indices.size, batch_size):
            batch = indices[start : start + batch_size]
            images = torch.stack([
                torch.from_numpy(normalize_slice(volume.slice(int(i))))
                for i in batch
            ]).unsqueeze(1).to(dtype)
            if model.cfg.uses_domain:
                row = torch.from_numpy(domain.values).to(dtype)
                dom = row.expand(len(batch), -1)
            else:
                dom = None
            logits = model(images, dom)
            fg = (logits[:, 1] > logits[:, 0]).numpy()
            for j, i in enumerate(batch):
                out[i] = fg[j] & volume.lung_mask[i]
    return out


@dataclass(frozen=True)
class ScanEval:
    """Scan-level scores: densitometric error and mask overlap."""

    scan_id: str
    scanner: str
    pct_emph_ref: float
    pct_emph_pred: float
    signed_error: float
    dsc: float


def eval_scan(pred_mask: np.ndarray, volume: CtVolume) -> ScanEval:
    """Score a predicted mask against the volume's ground truth."""
    ref = percent_emphysema(volume, volume.emph_mask)
    pred = percent_emphysema(volume, pred_mask)
    return ScanEval(
        scan_id=volume.scan_id,
        scanner=volume.scanner,
        pct_emph_ref=ref,
        pct_emph_pred=pred,
        signed_error=ref - pred,
        dsc=dsc(pred_mask, volume.emph_mask),
    )
