"""Core light field containers, patch machinery and the matrix view of the sensing model.

A color light field is stored as a 5-D tensor ``[H, W, Nv, Nv, 3]``: spatial
rows/cols, two angular axes (one sub-aperture view per ``(u, v)``), and RGB.
The sensing tensor shares that layout and carries one transmittance weight per
ray. The canonical flat ordering used by :func:`vectorize` and
:func:`matrix_form` is spatial row-major, then angular row-major, then color
innermost, i.e. plain C-order flattening of the 5-D array:

    flat(x, y, u, v, c) = (((x * W + y) * Nv + u) * Nv + v) * 3 + c
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BoundsError(ValueError):
    """A patch spec does not lie inside its parent image."""


class CoverageError(ValueError):
    """Stitching target has pixels not covered by any patch."""


def _as_float_array(data, name: str) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LightField:
    """Radiance tensor ``[H, W, Nv, Nv, 3]`` with entries in [0, 1].

    Immutable after construction; all operations return new instances.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, "light field")
        if arr.ndim != 5:
            raise ValueError(f"light field must be 5-D, got shape {arr.shape}")
        h, w, nu, nv, ch = arr.shape
        if nu != nv or nu < 1:
            raise ValueError(f"angular axes must be square and >= 1, got {nu}x{nv}")
        if ch != 3:
            raise ValueError(f"expected 3 color channels, got {ch}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("light field entries must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def nv(self) -> int:
        return self.data.shape[2]

    def view(self, u: int, v: int) -> np.ndarray:
        """Sub-aperture view ``[H, W, 3]`` at angular index (u, v)."""
        return self.data[:, :, u, v, :]


@dataclass(frozen=True)
class SensingTensor:
    """Per-ray modulation weights ``[H, W, Nv, Nv, 3]`` in [0, 1].

    ``weights`` is the unattenuated transmittance pattern. The physical
    attenuation ``1 / (Nv^2 * 3)`` (light split across views and channels)
    is exposed as :attr:`attenuation` and applied by the forward operator.
    """

    weights: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.weights, "sensing tensor")
        if arr.ndim != 5:
            raise ValueError(f"sensing tensor must be 5-D, got shape {arr.shape}")
        h, w, nu, nv, ch = arr.shape
        if nu != nv or nu < 1:
            raise ValueError(f"angular axes must be square and >= 1, got {nu}x{nv}")
        if ch != 3:
            raise ValueError(f"expected 3 color channels, got {ch}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("sensing weights must lie in [0, 1]")
        object.__setattr__(self, "weights", arr)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def nv(self) -> int:
        return self.weights.shape[2]

    @property
    def attenuation(self) -> float:
        return 1.0 / (self.nv * self.nv * 3)


@dataclass(frozen=True)
class CodedImage:
    """2-D monochrome sensor measurement ``[H, W]``.

    Entries are finite; noiseless forward projections are nonnegative, but a
    measurement with additive Gaussian sensor noise may dip below zero (noise
    is deliberately not clipped so its statistics stay Gaussian).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, "coded image")
        if arr.ndim != 2:
            raise ValueError(f"coded image must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PatchSpec:
    """Spatial crop window: origin (row, col), size (h, w), grid stride."""

    origin: tuple[int, int]
    size: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        if self.size[0] < 1 or self.size[1] < 1:
            raise ValueError(f"patch size must be positive, got {self.size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    def check_inside(self, height: int, width: int) -> None:
        r, c = self.origin
        h, w = self.size
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise BoundsError(
                f"patch origin={self.origin} size={self.size} exceeds parent {height}x{width}"
            )

    @property
    def rows(self) -> slice:
        return slice(self.origin[0], self.origin[0] + self.size[0])

    @property
    def cols(self) -> slice:
        return slice(self.origin[1], self.origin[1] + self.size[1])


def extract_patch(obj, spec: PatchSpec):
    """Spatial crop of a LightField, SensingTensor or CodedImage.

    Angular and color dimensions are untouched. Raises BoundsError if the
    window falls outside the parent.
    """
    if isinstance(obj, LightField):
        spec.check_inside(obj.height, obj.width)
        return LightField(obj.data[spec.rows, spec.cols])
    if isinstance(obj, SensingTensor):
        spec.check_inside(obj.height, obj.width)
        return SensingTensor(obj.weights[spec.rows, spec.cols])
    if isinstance(obj, CodedImage):
        spec.check_inside(obj.height, obj.width)
        return CodedImage(obj.data[spec.rows, spec.cols])
    raise TypeError(f"cannot extract patch from {type(obj).__name__}")


def patch_grid(height: int, width: int, patch: int, stride: int) -> list[PatchSpec]:
    """Patch specs covering the full canvas.

    Origins advance by ``stride``; the last row/column origin is clamped so
    the final patch ends exactly at the border (full coverage for
    ``stride <= patch``).
    """
    if patch > height or patch > width:
        raise ValueError(f"patch {patch} larger than canvas {height}x{width}")

    def starts(extent: int) -> list[int]:
        s = list(range(0, extent - patch + 1, stride))
        if s[-1] != extent - patch:
            s.append(extent - patch)
        return s

    return [
        PatchSpec(origin=(r, c), size=(patch, patch), stride=stride)
        for r in starts(height)
        for c in starts(width)
    ]


def stitch_patches(
    patches: list[tuple[LightField, PatchSpec]], canvas: tuple[int, int]
) -> LightField:
    """Reassemble light field patches onto a canvas, averaging overlaps.

    Every output pixel is the arithmetic mean of all patch values covering
    it. Raises CoverageError if the specs leave any pixel uncovered.
    """
    height, width = canvas
    if not patches:
        raise CoverageError("no patches given")
    first = patches[0][0]
    nv = first.nv
    acc = np.zeros((height, width, nv, nv, 3), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.int64)
    for lf, spec in patches:
        spec.check_inside(height, width)
        if (lf.height, lf.width) != tuple(spec.size):
            raise ValueError(
                f"patch shape {(lf.height, lf.width)} does not match spec size {spec.size}"
            )
        if lf.nv != nv:
            raise ValueError("inconsistent angular resolution across patches")
        acc[spec.rows, spec.cols] += lf.data
        counts[spec.rows, spec.cols] += 1
    if np.any(counts == 0):
        n_holes = int(np.sum(counts == 0))
        raise CoverageError(f"{n_holes} canvas pixels not covered by any patch")
    acc /= counts[:, :, None, None, None]
    return LightField(acc.astype(first.data.dtype))


def ray_index(x: int, y: int, u: int, v: int, c: int, width: int, nv: int) -> int:
    """Canonical flat index of ray (x, y, u, v, c); see module docstring."""
    return (((x * width + y) * nv + u) * nv + v) * 3 + c


def vectorize(lf: LightField) -> np.ndarray:
    """Flatten to 1-D of length H*W*Nv^2*3 in the canonical index order."""
    return lf.data.reshape(-1).copy()


def devectorize(vec: np.ndarray, height: int, width: int, nv: int) -> LightField:
    """Exact inverse of :func:`vectorize` for the given geometry."""
    vec = np.asarray(vec)
    expected = height * width * nv * nv * 3
    if vec.size != expected:
        raise ValueError(f"vector length {vec.size} does not match {expected}")
    return LightField(vec.reshape(height, width, nv, nv, 3))


def matrix_form(phi: SensingTensor) -> np.ndarray:
    """Dense sensing matrix ``[H*W, H*W*Nv^2*3]`` equivalent to the forward operator.

    Columns follow the canonical ray order, so ``matrix_form(phi) @
    vectorize(l)`` reproduces the tensor forward model exactly. For a fixed
    (viewpoint, color) offset ``j``, the sub-matrix ``M[:, j::Nv^2*3]`` is
    diagonal with that view/channel's per-pixel weights times the attenuation.

    Built in float64 so it can serve as a correctness oracle. Dense: intended
    for small instances and patches, not full sensors.
    """
    h, w, nv = phi.height, phi.width, phi.nv
    q = nv * nv * 3
    npix = h * w
    flat = phi.weights.astype(np.float64).reshape(npix, q) * phi.attenuation
    mat = np.zeros((npix, npix * q), dtype=np.float64)
    rows = np.arange(npix)
    cols = rows[:, None] * q + np.arange(q)[None, :]
    mat[rows[:, None], cols] = flat
    return mat
