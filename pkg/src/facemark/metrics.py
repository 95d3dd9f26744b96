"""Landmark error metrics: normalized mean error under three normalizers,
failure rate, AUC of the cumulative error curve, and report assembly.

Predictions and ground truth are (N, 2) arrays in normalized [0, 1] image
coordinates; they are scaled to pixels before measuring, so the normalizer
D is always a pixel distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderState, forward
from .errors import ConfigError

FR_THRESHOLDS = (0.08, 0.10)
AUC_CUTOFF = 0.07

NORMALIZERS = ("inter_ocular", "image_size", "bbox_geometric_mean")


def nme(pred, gt, d, pixel_scale):
    """Mean Euclidean pixel distance over landmarks, divided by d."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth {gt.shape}")
    if d <= 0:
        raise ValueError(f"normalizer must be positive, got {d}")
    w, h = pixel_scale
    diff = (pred - gt) * np.array([w, h])
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean() / d)


def failure_rate(nmes, threshold):
    """Fraction of samples with error strictly above the threshold."""
    nmes = np.asarray(nmes, dtype=float)
    if nmes.size == 0:
        raise ValueError("failure rate of an empty result set")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return float((nmes > threshold).mean())


def auc(nmes, cutoff):
    """Exact area under the empirical CDF of the errors on [0, cutoff],
    divided by cutoff.

    The CDF is a staircase; each sample contributes the length of
    [nme_i, cutoff] clipped to the interval, so the integral needs no
    curve sampling.
    """
    nmes = np.asarray(nmes, dtype=float)
    if nmes.size == 0:
        raise ValueError("AUC of an empty result set")
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    return float(np.clip(cutoff - nmes, 0.0, cutoff).mean() / cutoff)


def resolve_normalizer(kind, gt=None, pixel_scale=None, bbox=None,
                       eye_indices=(0, 1)):
    """Turn a normalizer kind plus sample metadata into the distance D.

    inter_ocular: pixel distance between two configured ground-truth
    landmarks; image_size: the image side; bbox_geometric_mean:
    sqrt(width * height) of the ground-truth box.
    """
    if kind == "inter_ocular":
        if gt is None or pixel_scale is None:
            raise ConfigError("inter-ocular normalizer needs ground truth and image size")
        li, ri = eye_indices
        n = np.asarray(gt).shape[0]
        if not (0 <= li < n and 0 <= ri < n):
            raise ConfigError(f"eye indices {eye_indices} out of range for {n} landmarks")
        w, h = pixel_scale
        diff = (np.asarray(gt)[li] - np.asarray(gt)[ri]) * np.array([w, h])
        d = float(np.sqrt((diff ** 2).sum()))
        if d == 0.0:
            raise ValueError("eye landmarks coincide; inter-ocular distance is zero")
        return d
    if kind == "image_size":
        if pixel_scale is None:
            raise ConfigError("image-size normalizer needs the image size")
        w, h = pixel_scale
        if w != h:
            raise ConfigError(f"image-size normalizer expects square images, got {w}x{h}")
        return float(w)
    if kind == "bbox_geometric_mean":
        if bbox is None:
            raise ConfigError("bbox normalizer needs a ground-truth box")
        x0, y0, x1, y1 = bbox
        area = (x1 - x0) * (y1 - y0)
        if area <= 0:
            raise ValueError(f"degenerate box {bbox}")
        return float(np.sqrt(area))
    raise ConfigError(f"unknown normalizer: {kind} (choose from {NORMALIZERS})")


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    normalizer: str
    per_sample: np.ndarray        # last-stage NME per sample
    per_stage: np.ndarray         # mean NME per supervision stage [Y_0..Y_T]
    fr: dict                      # threshold -> failure rate
    auc: dict                     # cutoff -> area

    @property
    def aggregate(self) -> float:
        return float(self.per_sample.mean())


def evaluate(state: DecoderState, dataset, normalizer="image_size",
             eye_indices=(0, 1), fr_thresholds=FR_THRESHOLDS,
             auc_cutoffs=(AUC_CUTOFF,)) -> EvalResult:
    """Run the model over a dataset and score every supervision stage.

    Headline numbers (per-sample NME, FR, AUC) use the last stage, which is
    what the model reports at inference time.
    """
    if len(dataset) == 0:
        raise ConfigError("evaluation dataset is empty")
    side = state.config.image_side
    scale = (side, side)
    stage_sums = None
    last = []
    for s in dataset:
        ys, _ = forward(state.params, s.image, state.config)
        d = resolve_normalizer(
            normalizer, gt=s.landmarks, pixel_scale=scale, bbox=s.bbox,
            eye_indices=eye_indices,
        )
        errs = [nme(y, s.landmarks, d, scale) for y in ys]
        if stage_sums is None:
            stage_sums = np.zeros(len(ys))
        stage_sums += errs
        last.append(errs[-1])
    per_sample = np.array(last)
    per_stage = stage_sums / len(dataset)
    return EvalResult(
        normalizer,
        per_sample,
        per_stage,
        {t: failure_rate(per_sample, t) for t in fr_thresholds},
        {c: auc(per_sample, c) for c in auc_cutoffs},
    )


def report_text(result: EvalResult) -> str:
    lines = [
        f"normalizer: {result.normalizer}",
        f"samples:    {result.per_sample.size}",
        f"NME:        {result.aggregate:.6f}",
    ]
    for t in sorted(result.fr):
        lines.append(f"FR@{t:g}:    {result.fr[t]:.6f}")
    for c in sorted(result.auc):
        lines.append(f"AUC@{c:g}:   {result.auc[c]:.6f}")
    lines.append("per-stage NME (initial estimate first):")
    for i, v in enumerate(result.per_stage):
        lines.append(f"  stage {i}:  {v:.6f}")
    return "\n".join(lines) + "\n"


def report_machine(result: EvalResult, config_hash: str) -> str:
    """Delimited metric/value/hash triples, one per line."""
    rows = [("nme", result.aggregate)]
    for t in sorted(result.fr):
        rows.append((f"fr_{t:g}", result.fr[t]))
    for c in sorted(result.auc):
        rows.append((f"auc_{c:g}", result.auc[c]))
    for i, v in enumerate(result.per_stage):
        rows.append((f"nme_stage_{i}", v))
    return "".join(f"{k}\t{v:.12g}\t{config_hash}\n" for k, v in rows)
