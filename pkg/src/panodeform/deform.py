"""Deformable patch embedding and deformable token mixing.

Both mechanisms predict per-position 2-D sampling displacements from the
input, clamp them to a region of +-H/r by +-W/r, and read features at the
displaced positions with bilinear interpolation before a linear projection.
With a zero offset field they reduce exactly (bitwise) to their fixed-grid
counterparts: plain patch embedding and a per-token fully-connected layer.

Everything here is stateless; parameters come in as tensors and are owned by
the calling network.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MAX_OFFSET_GROUPS = 64


@dataclass
class PatchEmbedConfig:
    size: int = 3
    stride: int = 1
    in_channels: int = 3
    out_channels: int = 32
    deformable: bool = True
    r: float = 4.0

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError("patch size must be >= 1")
        if self.r <= 0:
            raise ShapeError("offset restriction r must be positive")


@dataclass
class OffsetField:
    """Clamped displacement map: (H', W', G, 2) with (dy, dx) on the last axis."""

    offsets: Tensor
    bounds: tuple[float, float]  # (H/r, W/r) clamp radii of the source map
    r: float


@lru_cache(maxsize=128)
def fixed_patch_coords(h: int, w: int, size: int, stride: int) -> np.ndarray:
    """Sampling grid of a fixed-offset patch embedding, shape (H'*W'*s*s, 2).

    Per-patch offsets run over [-(s//2), ..] around a patch center, i.e.
    [-1, 1] for a 3x3 patch.  For non-overlapping patches (size == stride)
    the positions tile the image exactly, so an identity projection
    reproduces the raw pixels.
    """
    if h % stride or w % stride:
        raise ShapeError(f"stride {stride} does not divide {h}x{w}")
    deltas = np.arange(size, dtype=np.float64) - size // 2
    center = size // 2 if size == stride else 0
    ys = np.arange(0, h, stride, dtype=np.float64) + center
    xs = np.arange(0, w, stride, dtype=np.float64) + center
    gy = ys[:, None, None, None] + deltas[None, None, :, None]
    gx = xs[None, :, None, None] + deltas[None, None, None, :]
    oh, ow = len(ys), len(xs)
    coords = np.empty((oh, ow, size, size, 2))
    coords[..., 0] = np.broadcast_to(gy, (oh, ow, size, size))
    coords[..., 1] = np.broadcast_to(gx, (oh, ow, size, size))
    return coords.reshape(-1, 2)


def predict_offsets(
    f: Tensor,
    conv_w: Tensor,
    conv_b: Tensor,
    groups: int,
    r: float,
    stride: int = 1,
) -> OffsetField:
    """Predict clamped sampling displacements from the input map.

    A 3x3 convolution (stride = embedding stride) emits 2 values per offset
    group at every output position; each component is hard-clamped to the
    +-H/r (rows) and +-W/r (columns) window of the source map.
    """
    h, w, _ = f.shape
    if conv_w.shape[3] != 2 * groups:
        raise ShapeError(f"offset conv must emit {2 * groups} channels")
    raw = T.conv3x3(f, conv_w, conv_b, stride=stride)
    oh, ow = raw.shape[0], raw.shape[1]
    raw = T.reshape(raw, (oh, ow, groups, 2))
    bounds = (h / r, w / r)
    lims = np.array([bounds[0], bounds[1]])
    clamped = T.clamp(raw, -lims, lims)
    return OffsetField(offsets=clamped, bounds=bounds, r=r)


def _gather_project(
    f: Tensor,
    coords: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    oh: int,
    ow: int,
    size: int,
    border: str,
) -> Tensor:
    cin = f.shape[2]
    sampled = T.bilinear_sample(f, coords, border)  # (oh*ow*s*s, cin)
    flat = T.reshape(sampled, (oh * ow, size * size * cin))
    return T.reshape(T.linear(flat, proj_w, proj_b), (oh, ow, proj_w.shape[1]))


def standard_pe(
    f: Tensor, proj_w: Tensor, proj_b: Tensor, cfg: PatchEmbedConfig, border: str = "clamp"
) -> Tensor:
    """Fixed-grid patch embedding: flatten s x s patches, project to out_channels."""
    h, w, cin = f.shape
    if cin != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {cin}")
    coords = fixed_patch_coords(h, w, cfg.size, cfg.stride)
    oh, ow = h // cfg.stride, w // cfg.stride
    return _gather_project(f, Tensor(coords), proj_w, proj_b, oh, ow, cfg.size, border)


def deformable_pe(
    f: Tensor,
    conv_w: Tensor,
    conv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    cfg: PatchEmbedConfig,
    border: str = "clamp",
) -> Tensor:
    """Patch embedding with learned, clamped per-sampling-point displacements.

    Each of the s*s fixed sampling positions of a patch is shifted by its own
    predicted offset; gradients flow through the sampled values and the
    offsets alike.  Zero offsets reproduce standard_pe bit for bit.
    """
    h, w, cin = f.shape
    if cin != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {cin}")
    groups = cfg.size * cfg.size
    field = predict_offsets(f, conv_w, conv_b, groups, cfg.r, stride=cfg.stride)
    oh, ow = h // cfg.stride, w // cfg.stride
    fixed = fixed_patch_coords(h, w, cfg.size, cfg.stride)
    coords = T.add(T.reshape(field.offsets, (oh * ow * groups, 2)), Tensor(fixed))
    return _gather_project(f, coords, proj_w, proj_b, oh, ow, cfg.size, border)


def mlp_mix(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-token fully-connected projection; no cross-position flow."""
    return T.linear(z, w, b)


def offset_groups(channels: int) -> int:
    """Offset groups for channel-wise mixing, capped to bound parameters."""
    return min(channels, MAX_OFFSET_GROUPS)


def deformable_mlp_mix(
    f: Tensor,
    conv_w: Tensor,
    conv_b: Tensor,
    w: Tensor,
    b: Tensor,
    r: float = 4.0,
    border: str = "clamp",
) -> Tensor:
    """Token mixing with one learned displacement per (position, channel).

    Channel c of the input map is gathered at its own shifted position, then
    the gathered channel vector at each position goes through one
    fully-connected layer.  Channels share offset groups round-robin when the
    channel count exceeds the group cap.  Zero offsets make this equal to
    mlp_mix on the flattened map.
    """
    h, wd, cin = f.shape
    groups = offset_groups(cin)
    field = predict_offsets(f, conv_w, conv_b, groups, r, stride=1)
    off = field.offsets  # (h, wd, groups, 2)
    if groups == cin:
        per_channel = off
    else:
        flat = T.reshape(off, (h * wd * groups, 2))
        pos = np.arange(h * wd, dtype=np.intp)[:, None]
        ch = np.arange(cin, dtype=np.intp)[None, :] % groups
        idx = (pos * groups + ch).reshape(-1)
        per_channel = T.reshape(T.take_rows(flat, idx), (h, wd, cin, 2))
    gathered = T.deform_channels(f, per_channel, border)
    out = mlp_mix(T.reshape(gathered, (h * wd, cin)), w, b)
    return T.reshape(out, (h, wd, w.shape[1]))


# ---------------------------------------------------------------------------
# finite-difference entry points used by the gradcheck suite


def gradcheck_patch_embed(rng: np.random.Generator) -> float:
    from .gradcheck import check_gradients

    cfg = PatchEmbedConfig(size=3, stride=2, in_channels=2, out_channels=3)
    h, w = 6, 8
    f = rng.uniform(0, 1, (h, w, 2))
    # small weights plus a fractional bias keep sampling points away from the
    # integer-lattice kinks where finite differences break down
    conv_w = rng.standard_normal((3, 3, 2, 2 * 9)) * 0.05
    conv_b = rng.uniform(0.2, 0.45, 2 * 9)
    proj_w = rng.standard_normal((9 * 2, 3)) * 0.3
    proj_b = rng.standard_normal(3) * 0.1
    probe = Tensor(rng.standard_normal((h // 2, w // 2, 3)))

    def build(ft, cw, cb, pw, pb):
        out = deformable_pe(ft, cw, cb, pw, pb, cfg)
        return T.sum_all(T.mul(out, probe))

    return check_gradients(build, [f, conv_w, conv_b, proj_w, proj_b])


def gradcheck_mixer(rng: np.random.Generator) -> float:
    from .gradcheck import check_gradients

    h, w, c = 5, 6, 3
    f = rng.uniform(0, 1, (h, w, c))
    conv_w = rng.standard_normal((3, 3, c, 2 * c)) * 0.05
    conv_b = rng.uniform(0.2, 0.45, 2 * c)
    fc_w = rng.standard_normal((c, c)) * 0.4
    fc_b = rng.standard_normal(c) * 0.1
    probe = Tensor(rng.standard_normal((h, w, c)))

    def build(ft, cw, cb, ww, bb):
        out = deformable_mlp_mix(ft, cw, cb, ww, bb, r=4.0)
        return T.sum_all(T.mul(out, probe))

    return check_gradients(build, [f, conv_w, conv_b, fc_w, fc_b])
