"""Synthetic layered scenes with exact ground-truth disparity.

Views are built by shifting textured planes: a point with disparity d_layer
seen from viewpoint offset k = (ku, kv) is displaced by k * d_layer pixels,
so view (a, b) shows layer(x + k * d_layer). Layers composite back to front
(larger disparity = nearer = on top), which makes occlusion boundaries differ
across views. By construction, the center-view warp identity holds exactly
on interior non-occluded pixels for integer disparities.

These scenes stand in for captured plenoptic data at desk scale: they supply
ground truth for both reconstruction and disparity acceptance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .dispnet import DisparityMap, center_index
from .lightfield import LightField


@dataclass(frozen=True)
class SceneSpec:
    """Layered-plane scene description.

    ``layer_disparities`` is ordered far to near is not required; layers are
    composited by increasing disparity. The first (smallest-disparity) layer
    acts as the full-canvas background. All disparities must fit in
    ``dmax``.
    """

    height: int = 32
    width: int = 32
    nv: int = 3
    layer_disparities: tuple = (0.0, 2.0)
    texture_smoothness: float = 2.5
    dmax: float = 4.0

    def __post_init__(self):
        if self.height < 4 or self.width < 4 or self.nv < 1:
            raise ValueError("scene too small")
        if not self.layer_disparities:
            raise ValueError("need at least one layer")
        if max(abs(d) for d in self.layer_disparities) > self.dmax:
            raise ValueError(f"layer disparities exceed dmax={self.dmax}")


@dataclass(frozen=True)
class SyntheticScene:
    """Generated light field plus its exact per-pixel ground truth."""

    lf: LightField
    gt_disparity: DisparityMap
    view_layer_ids: np.ndarray  # [H, W, Nv, Nv] int, visible layer per view
    spec: SceneSpec
    seed: int

    def occlusion_free_mask(self, k: tuple[int, int]) -> np.ndarray:
        """Pixels of the center view whose warp source in view k shows the
        same layer (nearest-neighbor lookup; exact for integer disparities)."""
        h, w = self.spec.height, self.spec.width
        c = center_index(self.spec.nv)
        ids_k = self.view_layer_ids[:, :, k[0] + c, k[1] + c]
        ids_c = self.view_layer_ids[:, :, c, c]
        d = self.gt_disparity.data
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pr = np.rint(rows - k[0] * d).astype(np.int64)
        pc = np.rint(cols - k[1] * d).astype(np.int64)
        inside = (pr >= 0) & (pr < h) & (pc >= 0) & (pc < w)
        prc = np.clip(pr, 0, h - 1)
        pcc = np.clip(pc, 0, w - 1)
        return inside & (ids_k[prc, pcc] == ids_c)


def _smooth_texture(rng, shape_hw: tuple[int, int], sigma: float, lo: float, hi: float) -> np.ndarray:
    tex = rng.random((shape_hw[0], shape_hw[1], 3))
    if sigma > 0:
        tex = gaussian_filter(tex, sigma=(sigma, sigma, 0))
    tmin, tmax = tex.min(), tex.max()
    tex = (tex - tmin) / max(tmax - tmin, 1e-9)
    return lo + (hi - lo) * tex


def _ellipse_mask(rng, shape_hw: tuple[int, int]) -> np.ndarray:
    h, w = shape_hw
    cr = rng.uniform(0.25 * h, 0.75 * h)
    cc = rng.uniform(0.25 * w, 0.75 * w)
    ar = rng.uniform(0.15 * h, 0.35 * h)
    br = rng.uniform(0.15 * w, 0.35 * w)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ((rows - cr) / ar) ** 2 + ((cols - cc) / br) ** 2 <= 1.0


def _shifted_crop(master: np.ndarray, off_r: float, off_c: float, h: int, w: int) -> np.ndarray:
    """Crop [h, w] starting at fractional offset (bilinear for fractions)."""
    r0 = math.floor(off_r)
    c0 = math.floor(off_c)
    fr = off_r - r0
    fc = off_c - c0
    base = master[r0 : r0 + h + 1, c0 : c0 + w + 1]
    if fr == 0.0 and fc == 0.0:
        return base[:h, :w].copy()
    out = (
        (1 - fr) * (1 - fc) * base[:h, :w]
        + (1 - fr) * fc * base[:h, 1 : w + 1]
        + fr * (1 - fc) * base[1 : h + 1, :w]
        + fr * fc * base[1 : h + 1, 1 : w + 1]
    )
    return out


def gen_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Deterministically generate a layered scene and its light field."""
    rng = np.random.default_rng(seed)
    h, w, nv = spec.height, spec.width, spec.nv
    c = center_index(nv)
    max_k = max(c, nv - 1 - c)
    margin = int(math.ceil(max_k * max(abs(d) for d in spec.layer_disparities))) + 1
    hp, wp = h + 2 * margin, w + 2 * margin

    order = np.argsort(spec.layer_disparities, kind="stable")
    textures, masks, disparities = [], [], []
    for rank, layer_idx in enumerate(order):
        textures.append(_smooth_texture(rng, (hp, wp), spec.texture_smoothness, 0.08, 0.95))
        if rank == 0:
            masks.append(np.ones((hp, wp), dtype=bool))
        else:
            masks.append(_ellipse_mask(rng, (hp, wp)))
        disparities.append(float(spec.layer_disparities[layer_idx]))

    data = np.zeros((h, w, nv, nv, 3), dtype=np.float64)
    ids = np.zeros((h, w, nv, nv), dtype=np.int64)
    for a in range(nv):
        for b in range(nv):
            k = (a - c, b - c)
            img = np.zeros((h, w, 3))
            idmap = np.zeros((h, w), dtype=np.int64)
            for layer, (tex, mask, d) in enumerate(zip(textures, masks, disparities)):
                off_r = margin + k[0] * d
                off_c = margin + k[1] * d
                tex_k = _shifted_crop(tex, off_r, off_c, h, w)
                mask_k = _shifted_crop(mask.astype(np.float64), off_r, off_c, h, w) >= 0.5
                img = np.where(mask_k[:, :, None], tex_k, img)
                idmap = np.where(mask_k, layer, idmap)
            data[:, :, a, b, :] = img
            ids[:, :, a, b] = idmap

    center_ids = ids[:, :, c, c]
    gt = np.asarray(disparities)[center_ids]
    lf = LightField(np.clip(data, 0.0, 1.0).astype(np.float32))
    return SyntheticScene(
        lf=lf,
        gt_disparity=DisparityMap(gt.astype(np.float32), dmax=spec.dmax),
        view_layer_ids=ids,
        spec=spec,
        seed=seed,
    )


def scene_patches(scene: SyntheticScene, patch: int, rng) -> LightField:
    """One random patch crop of the scene's light field."""
    h, w = scene.spec.height, scene.spec.width
    r = int(rng.integers(0, h - patch + 1))
    col = int(rng.integers(0, w - patch + 1))
    return LightField(scene.lf.data[r : r + patch, col : col + patch])
