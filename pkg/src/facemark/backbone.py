"""Small strided CNN that turns an image into a multi-scale feature pyramid,
plus the per-level 1x1 projections that flatten the pyramid into the memory
matrix consumed by the attention layers.

Images are channel-first float arrays (3, side, side) with values in [0, 1].
Stage i halves the grid once (the first stage twice), so level strides run
4, 8, 16, ... and the finest level sits first in the flattened memory.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .geometry import PyramidLayout
from .params import Params, glorot


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    dim: int = 256  # projection width, matches the attention dim
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) < 1:
            raise ConfigError("backbone needs at least one stage")

    @property
    def num_levels(self) -> int:
        return len(self.stage_channels)

    @property
    def last_stride(self) -> int:
        return 4 * 2 ** (self.num_levels - 1)


MemoryFeature = namedtuple("MemoryFeature", "data layout")


def init_backbone_params(rng, cfg: BackboneConfig) -> Params:
    p: Params = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.stage_channels):
        p[f"backbone.s{i + 1}.conva.w"] = glorot(
            rng, cin * 9, cout * 9, (cout, cin, 3, 3)
        )
        p[f"backbone.s{i + 1}.conva.b"] = np.zeros(cout)
        p[f"backbone.s{i + 1}.convb.w"] = glorot(
            rng, cout * 9, cout * 9, (cout, cout, 3, 3)
        )
        p[f"backbone.s{i + 1}.convb.b"] = np.zeros(cout)
        cin = cout
    for i, c in enumerate(cfg.stage_channels):
        p[f"project.l{i + 1}.w"] = glorot(rng, c, cfg.dim)
        p[f"project.l{i + 1}.b"] = np.zeros(cfg.dim)
    return p


# ---------------------------------------------------------------------------
# 3x3 convolution, padding 1, via im2col
# ---------------------------------------------------------------------------

ConvCache = namedtuple("ConvCache", "cols w stride in_shape out_hw")


def conv2d_fwd(x, w, b, stride):
    cin, hi, wi = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * 9)
    out = cols @ w.reshape(cout, -1).T + b
    out = out.T.reshape(cout, ho, wo)
    return out, ConvCache(cols, w, stride, x.shape, (ho, wo))


def conv2d_bwd(dout, cache: ConvCache):
    cols, w, stride, (cin, hi, wi), (ho, wo) = cache
    cout = w.shape[0]
    dout2 = dout.reshape(cout, ho * wo).T
    dw = (dout2.T @ cols).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w.reshape(cout, -1)).reshape(ho, wo, cin, 3, 3)
    dxp = np.zeros((cin, hi + 2, wi + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += (
                dcols[:, :, :, ky, kx].transpose(2, 0, 1)
            )
    return dxp[:, 1:-1, 1:-1], {"w": dw, "b": db}


# ---------------------------------------------------------------------------
# Pyramid and memory assembly
# ---------------------------------------------------------------------------

StageCache = namedtuple("StageCache", "ca ma cb mb")
BackboneCache = namedtuple("BackboneCache", "stages projections cfg layout")


def extract_memory(image, params: Params, cfg: BackboneConfig):
    """Run the backbone and projections; return (MemoryFeature, cache).

    `params` is the full flat parameter dict; backbone entries live under
    the "backbone." and "project." prefixes.
    """
    c, hi, wi = image.shape
    if c != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels}-channel image, got {c}")
    if hi != wi:
        raise ConfigError(f"expected a square image, got {hi}x{wi}")
    if hi % cfg.last_stride != 0:
        raise ConfigError(
            f"image side {hi} not divisible by the coarsest stride "
            f"{cfg.last_stride}"
        )
    layout = PyramidLayout.for_image(hi, cfg.num_levels)
    stages = []
    feats = []
    x = image
    for i in range(cfg.num_levels):
        pre = f"backbone.s{i + 1}"
        h1, ca = conv2d_fwd(x, params[f"{pre}.conva.w"], params[f"{pre}.conva.b"], 2)
        a1, ma = relu_fwd_map(h1)
        sb = 2 if i == 0 else 1
        h2, cb = conv2d_fwd(a1, params[f"{pre}.convb.w"], params[f"{pre}.convb.b"], sb)
        x, mb = relu_fwd_map(h2)
        stages.append(StageCache(ca, ma, cb, mb))
        feats.append(x)
    blocks = []
    projections = []
    for i, feat in enumerate(feats):
        ch, h, w = feat.shape
        flat = feat.reshape(ch, h * w).T  # row-major over (row, col)
        out = flat @ params[f"project.l{i + 1}.w"] + params[f"project.l{i + 1}.b"]
        blocks.append(out)
        projections.append((flat, (ch, h, w)))
    data = np.concatenate(blocks, axis=0)
    return MemoryFeature(data, layout), BackboneCache(stages, projections, cfg, layout)


def relu_fwd_map(x):
    return np.maximum(x, 0.0), (x > 0.0)


def extract_memory_bwd(ddata, params: Params, cache: BackboneCache):
    """Backward through projections and stages.  Returns (dimage, grads)
    with grads keyed by full parameter paths.
    """
    grads: Params = {}
    dfeats = []
    for i, ((flat, (ch, h, w)), sl) in enumerate(
        zip(cache.projections, cache.layout.block_slices())
    ):
        dblock = ddata[sl]
        w_p = params[f"project.l{i + 1}.w"]
        grads[f"project.l{i + 1}.w"] = flat.T @ dblock
        grads[f"project.l{i + 1}.b"] = dblock.sum(axis=0)
        dflat = dblock @ w_p.T
        dfeats.append(dflat.T.reshape(ch, h, w))
    dx = None
    for i in range(cache.cfg.num_levels - 1, -1, -1):
        pre = f"backbone.s{i + 1}"
        st = cache.stages[i]
        d = dfeats[i] if dx is None else dfeats[i] + dx
        d = d * st.mb
        da1, gb = conv2d_bwd(d, st.cb)
        grads[f"{pre}.convb.w"] = gb["w"]
        grads[f"{pre}.convb.b"] = gb["b"]
        da1 = da1 * st.ma
        dx, ga = conv2d_bwd(da1, st.ca)
        grads[f"{pre}.conva.w"] = ga["w"]
        grads[f"{pre}.conva.b"] = ga["b"]
    return dx, grads
