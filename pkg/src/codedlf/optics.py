"""Random color masks, the compressive forward model and sensor noise.

The simulated optic is a single random color mask near a monochrome sensor.
Each ray (x, y, u, v, c) is scaled by its mask weight, the sum over views and
channels lands on sensor pixel (x, y), and the whole measurement is
attenuated by the compression ratio 1/(Nv^2*3) because the incoming light is
split across all views and channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lightfield import CodedImage, LightField, SensingTensor

MASK_KINDS = ("uniform", "rgb", "rgbw")


@dataclass(frozen=True)
class MaskDistribution:
    """Named mask ensemble (uniform / rgb / rgbw) plus its generator seed."""

    kind: str
    seed: int

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}, expected one of {MASK_KINDS}")


@dataclass(frozen=True)
class NoiseModel:
    """i.i.d. zero-mean Gaussian sensor noise with standard deviation sigma."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def gen_sensing_tensor(shape: tuple[int, int, int], dist: MaskDistribution) -> SensingTensor:
    """Draw a sensing tensor of shape (H, W, Nv) from the given distribution.

    uniform: every ray weight i.i.d. U[0, 1].
    rgb: per spatial-angular cell exactly one channel passes at weight 1.
    rgbw: per cell one of {R, G, B, white} with probability 1/4 each, where
    white passes all three channels at weight 1.
    """
    h, w, nv = shape
    if h < 1 or w < 1 or nv < 1:
        raise ValueError(f"invalid sensing tensor shape {shape}")
    rng = np.random.default_rng(dist.seed)
    if dist.kind == "uniform":
        weights = rng.random((h, w, nv, nv, 3), dtype=np.float32)
    elif dist.kind == "rgb":
        choice = rng.integers(0, 3, size=(h, w, nv, nv))
        weights = (choice[..., None] == np.arange(3)).astype(np.float32)
    else:  # rgbw
        choice = rng.integers(0, 4, size=(h, w, nv, nv))
        weights = (choice[..., None] == np.arange(3)).astype(np.float32)
        weights[choice == 3] = 1.0
    return SensingTensor(weights)


def forward(phi: SensingTensor, lf: LightField) -> CodedImage:
    """Compressive projection i[x,y] = att * sum_{u,v,c} phi[x,y,u,v,c] * l[x,y,u,v,c]."""
    if phi.weights.shape != lf.data.shape:
        raise ValueError(
            f"shape mismatch: sensing tensor {phi.weights.shape} vs light field {lf.data.shape}"
        )
    coded = (phi.weights * lf.data).sum(axis=(2, 3, 4)) * phi.attenuation
    return CodedImage(coded)


def adjoint(phi: SensingTensor, image: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`forward`: spread a sensor image back along rays.

    Returns the raw 5-D array att * phi[x,y,u,v,c] * image[x,y] (not a
    LightField: adjoints of residuals are signed).
    """
    image = np.asarray(image)
    if image.shape != (phi.height, phi.width):
        raise ValueError(f"image shape {image.shape} does not match sensor {phi.height}x{phi.width}")
    return phi.weights * (phi.attenuation * image)[:, :, None, None, None]


def add_noise(image: CodedImage, noise: NoiseModel, seed: int) -> CodedImage:
    """Add i.i.d. N(0, sigma^2) sensor noise; deterministic given seed, no clipping."""
    if noise.sigma == 0:
        return image
    rng = np.random.default_rng(seed)
    n = rng.normal(0.0, noise.sigma, size=image.data.shape)
    return CodedImage(image.data + n.astype(image.data.dtype))


def compression_ratio(nv: int) -> Fraction:
    """Measurement-to-signal dimension ratio m/k = 1/(Nv^2 * 3)."""
    if nv < 1:
        raise ValueError(f"nv must be >= 1, got {nv}")
    return Fraction(1, nv * nv * 3)


def mean_backprojection(image: CodedImage, phi: SensingTensor) -> LightField:
    """Trivial reconstruction floor: sensor value normalized by total ray weight.

    Assigns every ray at pixel (x, y) the single value that would explain the
    measurement if the field were constant across views and channels there:
    i[x,y] / (att * sum_{u,v,c} phi[x,y,u,v,c]). Exact on angularly and
    chromatically flat scenes, wrong everywhere else; any learned method must
    beat it.
    """
    total = phi.weights.sum(axis=(2, 3, 4)) * phi.attenuation
    flat = np.where(total > 0, image.data / np.maximum(total, 1e-12), 0.0)
    flat = np.clip(flat, 0.0, 1.0)
    est = np.broadcast_to(
        flat[:, :, None, None, None].astype(phi.weights.dtype),
        phi.weights.shape,
    ).copy()
    return LightField(est)
