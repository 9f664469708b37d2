"""Segmentation, mimicry and reconstruction losses and their per-domain composition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .xmask import MaskMode

STRATEGIES = ("xMRP", "2D+3D", "only2D", "only3D")


@dataclass(frozen=True)
class LossWeights:
    w_seg: float = 1.0
    w_mimic_src: float = 0.1
    w_mimic_tgt: float = 0.1
    w_xmrp: float = 0.1

    def __post_init__(self):
        if min(self.w_seg, self.w_mimic_src, self.w_mimic_tgt, self.w_xmrp) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossFlags:
    strategy: str = "xMRP"
    pl_mode: bool = False
    seg_only: bool = False          # source-only / oracle baselines: CE terms only
    kl_direction: str = "forward"   # forward: KL(reference || mimic)
    xmrp: bool = True               # off when nothing is ever masked

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError("kl_direction must be 'forward' or 'reverse'")


def seg_ce(logits: Tensor, labels, ignore_index=None) -> Tensor:
    """Mean cross-entropy over points (points labeled ``ignore_index`` are skipped)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise nc.ShapeError(f"seg_ce: {labels.shape} labels for {n} rows")
    keep = np.ones(n, dtype=bool) if ignore_index is None else labels != ignore_index
    if np.any((labels[keep] < 0) | (labels[keep] >= C)):
        raise ValueError(f"seg_ce: label outside [0, {C})")
    if not keep.any():
        raise ValueError("seg_ce: no labeled points")
    onehot = np.zeros((n, C))
    onehot[np.flatnonzero(keep), labels[keep]] = 1.0
    return nc.mul(nc.sum(nc.mul(nc.log_softmax(logits), Tensor(onehot))), -1.0 / keep.sum())


def mimic_kl(target_logits: Tensor, mimic_logits: Tensor, direction="forward") -> Tensor:
    """Mean per-point KL between the detached reference and the mimicry head."""
    if target_logits.shape != mimic_logits.shape:
        raise nc.ShapeError(f"mimic_kl: {target_logits.shape} vs {mimic_logits.shape}")
    n = target_logits.shape[0]
    ref = target_logits.detach()
    log_ref = nc.log_softmax(ref)
    log_mim = nc.log_softmax(mimic_logits)
    if direction == "forward":
        p = Tensor(np.exp(log_ref.data))
        kl = nc.mul(p, nc.sub(log_ref, log_mim))
    else:
        kl = nc.mul(nc.softmax(mimic_logits), nc.sub(log_mim, log_ref))
    return nc.mul(nc.sum(kl), 1.0 / n)


def xmrp_mse(pred: Tensor, target, rows=None) -> Tensor:
    """Mean squared error over all entries, or over the selected ``rows``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nc.ShapeError(f"xmrp_mse: {pred.shape} vs {target.shape}")
    if rows is not None:
        rows = np.asarray(rows)
        rows = np.flatnonzero(rows) if rows.dtype == bool else rows
        pred = nc.gather_rows(pred, rows)
        target = target[rows]
    diff = nc.sub(pred, Tensor(target))
    return nc.mean(nc.mul(diff, diff))


def reconstruction_terms(heads, batch, strategy):
    """Active reconstruction losses for the batch's mask plans.

    Cross-modal (xMRP): the 2D branch predicts every point's normalized
    coordinates on rows whose sample masked 2D or nothing; the 3D branch
    predicts the unmasked pixel values on rows that masked 3D or nothing.
    Same-modality strategies reconstruct only the removed points of the
    masked modality.
    """
    mode = batch.row_mode
    terms = {}
    if strategy == "xMRP":
        rows2 = (mode == MaskMode.MASK_2D) | (mode == MaskMode.NONE)
        rows3 = (mode == MaskMode.MASK_3D) | (mode == MaskMode.NONE)
        if rows2.any():
            terms["rec2d"] = xmrp_mse(heads.m2d_3d, batch.target3d, rows2)
        if rows3.any():
            terms["rec3d"] = xmrp_mse(heads.m3d_2d, batch.target2d, rows3)
        return terms
    rows2 = (mode == MaskMode.MASK_2D) & batch.in_masked_patch
    rows3 = (mode == MaskMode.MASK_3D) & batch.in_masked_patch
    if strategy in ("2D+3D", "only2D") and rows2.any():
        terms["rec2d"] = xmrp_mse(heads.m2d_3d, batch.target2d, rows2)
    if strategy in ("2D+3D", "only3D") and rows3.any():
        terms["rec3d"] = xmrp_mse(heads.m3d_2d, batch.target3d, rows3)
    return terms


def compose(domain, heads, batch, weights: LossWeights, flags: LossFlags | None = None):
    """Weighted total for one domain plus a ``{term: value}`` breakdown.

    ``batch`` carries labels (source labels or target pseudo-labels, -1 for
    unlabeled points), reconstruction targets and per-row mask modes.
    """
    flags = flags or LossFlags()
    parts = []   # (weight, name, tensor)
    labeled = domain == "source" or (flags.pl_mode and np.any(batch.labels >= 0))
    if domain == "source":
        if batch.labels is None or np.any(batch.labels < 0):
            raise ValueError("source batch without complete labels")
    if labeled:
        parts.append((weights.w_seg, "ce2d", seg_ce(heads.p2d, batch.labels, ignore_index=-1)))
        parts.append((weights.w_seg, "ce3d", seg_ce(heads.p3d, batch.labels, ignore_index=-1)))
    if not flags.seg_only:
        w_kl = weights.w_mimic_src if domain == "source" else weights.w_mimic_tgt
        parts.append((w_kl, "kl2d", mimic_kl(heads.p3d, heads.p2d_3d, flags.kl_direction)))
        parts.append((w_kl, "kl3d", mimic_kl(heads.p2d, heads.p3d_2d, flags.kl_direction)))
        if flags.xmrp:
            for name, term in reconstruction_terms(heads, batch, flags.strategy).items():
                parts.append((weights.w_xmrp, name, term))
    total = None
    breakdown = {}
    for w, name, term in parts:
        breakdown[name] = term.item()
        scaled = nc.mul(term, w)
        total = scaled if total is None else nc.add(total, scaled)
    if total is None:
        total = Tensor(0.0)
    breakdown["total"] = total.item()
    return total, breakdown
