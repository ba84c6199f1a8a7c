"""Unsupervised disparity estimation from a light field.

A single full-resolution disparity map warps every sub-aperture view onto the
center view (one map for all views, not one per view). Training minimizes
the photometric distance between each warped view and the center view plus
an anisotropic total-variation smoothness term; no ground-truth disparity is
ever used.

Viewpoint coordinates are centered on the middle view: view index (a, b)
has offset k = (a - (Nv-1)//2, b - (Nv-1)//2), so Nv=5 gives k in {-2..2}^2.
A point with disparity d seen at offset k appears displaced by k*d pixels,
and warping samples view k at x - k*d(x) with bilinear interpolation; samples
falling outside the view are clamped to the border and flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    ConvTranspose2D,
    ELU,
    ScaledTanh,
    Sequential,
)
from .lightfield import CodedImage, LightField, SensingTensor
from .optim import AdamState, adam_step, exp_decay_lr


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel displacement (pixels per unit viewpoint offset), |d| <= dmax."""

    data: np.ndarray
    dmax: float = 4.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 2:
            raise ValueError(f"disparity map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("disparity map contains non-finite entries")
        if np.abs(arr).max() > self.dmax + 1e-6:
            raise ValueError(f"disparity exceeds dmax={self.dmax}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class DispNetConfig:
    nv: int = 5
    stage_channels: tuple = (128, 256, 512)
    stage1_rates: tuple = (1, 1, 2, 4, 8, 16, 16)
    dmax: float = 4.0
    gamma: float = 0.1
    kernel: int = 3
    updown_kernel: int = 5

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ValueError("three resolution stages expected")
        if self.dmax <= 0:
            raise ValueError("dmax must be positive")

    @property
    def in_channels(self) -> int:
        return self.nv * self.nv * 3


def center_index(nv: int) -> int:
    return (nv - 1) // 2


def view_offsets(nv: int) -> list[tuple[int, int]]:
    """Offsets k for every view index in row-major order."""
    c = center_index(nv)
    return [(a - c, b - c) for a in range(nv) for b in range(nv)]


def _warp_with_grad(view: np.ndarray, d: np.ndarray, k: tuple[float, float]):
    """Bilinear warp of one view plus d(warped)/d(disparity).

    Returns (warped [H,W,3], valid [H,W], ddisp [H,W,3]).
    """
    h, w = d.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pr = rows - k[0] * d
    pc = cols - k[1] * d
    valid = (pr >= 0) & (pr <= h - 1) & (pc >= 0) & (pc <= w - 1)
    pr = np.clip(pr, 0, h - 1)
    pc = np.clip(pc, 0, w - 1)
    r0 = np.floor(pr).astype(np.int64)
    c0 = np.floor(pc).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (pr - r0)[:, :, None]
    fc = (pc - c0)[:, :, None]
    v00 = view[r0, c0]
    v01 = view[r0, c1]
    v10 = view[r1, c0]
    v11 = view[r1, c1]
    warped = (
        (1 - fr) * (1 - fc) * v00
        + (1 - fr) * fc * v01
        + fr * (1 - fc) * v10
        + fr * fc * v11
    )
    d_dr = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
    d_dc = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
    ddisp = -k[0] * d_dr - k[1] * d_dc
    return warped, valid, ddisp


def warp_to_center(lf: LightField, d, k: tuple[int, int]):
    """Render view at offset k onto the center view using disparity d.

    Samples l(x - k*d(x), k) with bilinear interpolation. Returns the warped
    [H, W, 3] image and a validity mask that is False where the sample point
    left the image (those pixels hold border-clamped values).
    """
    darr = d.data if isinstance(d, DisparityMap) else np.asarray(d, dtype=np.float64)
    c = center_index(lf.nv)
    a, b = k[0] + c, k[1] + c
    if not (0 <= a < lf.nv and 0 <= b < lf.nv):
        raise ValueError(f"viewpoint offset {k} outside the {lf.nv}x{lf.nv} grid")
    view = lf.data[:, :, a, b, :].astype(np.float64)
    warped, valid, _ = _warp_with_grad(view, darr, k)
    return warped, valid


def tv_loss(d: np.ndarray):
    """Mean-normalized anisotropic total variation; returns (loss, grad)."""
    d = np.asarray(d)
    dr = d[1:, :] - d[:-1, :]
    dc = d[:, 1:] - d[:, :-1]
    n_terms = dr.size + dc.size
    if n_terms == 0:
        return 0.0, np.zeros_like(d)
    loss = (np.abs(dr).sum() + np.abs(dc).sum()) / n_terms
    g = np.zeros_like(d, dtype=np.float64)
    sr = np.sign(dr)
    sc = np.sign(dc)
    g[1:, :] += sr
    g[:-1, :] -= sr
    g[:, 1:] += sc
    g[:, :-1] -= sc
    return float(loss), g / n_terms


def disp_loss(lf: LightField, d, gamma: float):
    """Photometric warp loss over all views plus TV smoothness.

    data term: mean over the Nv^2 views of the mean absolute difference
    between the warped view and the center view, counted over valid (interior)
    pixels only. Returns (loss, grad w.r.t. the disparity map).
    """
    darr = d.data if isinstance(d, DisparityMap) else np.asarray(d, dtype=np.float64)
    if darr.shape != (lf.height, lf.width):
        raise ValueError("disparity map shape must match the light field")
    c = center_index(lf.nv)
    center = lf.data[:, :, c, c, :].astype(np.float64)
    n_views = lf.nv * lf.nv
    total = 0.0
    g = np.zeros_like(darr, dtype=np.float64)
    for a in range(lf.nv):
        for b in range(lf.nv):
            k = (a - c, b - c)
            if k == (0, 0):
                continue  # the center view warps to itself, zero term
            view = lf.data[:, :, a, b, :].astype(np.float64)
            warped, valid, ddisp = _warp_with_grad(view, darr, k)
            n_valid = int(valid.sum()) * 3
            if n_valid == 0:
                continue
            diff = warped - center
            mask = valid[:, :, None]
            total += np.abs(diff[valid]).sum() / n_valid
            g += (np.sign(diff) * mask * ddisp).sum(axis=2) / n_valid
    total /= n_views
    g /= n_views
    tvl, tvg = tv_loss(darr)
    return total + gamma * tvl, g + gamma * tvg


class DispNet:
    """Three-resolution dilated network with learned upsampling fusion.

    Stage 1 keeps full resolution with dilations 1-1-2-4-8-16-16; stages 2
    and 3 run at 1/2 and 1/4 resolution after stride-2 5x5 convs. The coarse
    maps are upsampled back with transposed convs, concatenated with the
    full-resolution features, and fused by a 1x1 conv; a scaled tanh bounds
    the output to (-dmax, dmax).
    """

    def __init__(self, cfg: DispNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        seeds = iter(rng.integers(0, 2**63 - 1, size=64))
        c1, c2, c3 = cfg.stage_channels
        k, uk = cfg.kernel, cfg.updown_kernel

        def conv_block(cin, cout, kernel=k, stride=1, dilation=1):
            return [
                Conv2D(cin, cout, kernel=kernel, stride=stride, dilation=dilation,
                       seed=int(next(seeds)), dtype=dtype),
                BatchNorm(cout, dtype=dtype),
                ELU(),
            ]

        def deconv_block(cin, cout):
            return [
                ConvTranspose2D(cin, cout, kernel=uk, stride=2,
                                seed=int(next(seeds)), dtype=dtype),
                BatchNorm(cout, dtype=dtype),
                ELU(),
            ]

        s1_layers = []
        cin = cfg.in_channels
        for rate in cfg.stage1_rates:
            s1_layers += conv_block(cin, c1, dilation=rate)
            cin = c1
        self.branches = {
            "s1": Sequential(s1_layers),
            "down2": Sequential(conv_block(c1, c2, kernel=uk, stride=2)),
            "s2": Sequential(conv_block(c2, c2) + conv_block(c2, c2) + conv_block(c2, c2)),
            "down3": Sequential(conv_block(c2, c3, kernel=uk, stride=2)),
            "s3": Sequential(conv_block(c3, c3) + conv_block(c3, c3) + conv_block(c3, c3)),
            "up2": Sequential(deconv_block(c2, c2)),
            "up3a": Sequential(deconv_block(c3, c3)),
            "up3b": Sequential(deconv_block(c3, c3)),
            "fuse": Sequential([
                Conv2D(c1 + c2 + c3, 1, kernel=1, seed=int(next(seeds)), dtype=dtype),
                ScaledTanh(cfg.dmax),
            ]),
        }
        # start the map near zero: a saturated tanh at init would starve the
        # photometric gradient
        fuse_conv = self.branches["fuse"].layers[0]
        fuse_conv.kernel = fuse_conv.kernel * 0.1
        self._shapes = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        br = self.branches
        f1 = br["s1"].forward(x, train)
        f2 = br["s2"].forward(br["down2"].forward(f1, train), train)
        f3 = br["s3"].forward(br["down3"].forward(f2, train), train)
        u2 = br["up2"].forward(f2, train)
        u3 = br["up3b"].forward(br["up3a"].forward(f3, train), train)
        h, w = f1.shape[1], f1.shape[2]
        self._shapes = {"u2": u2.shape, "u3": u3.shape, "c1": f1.shape[3]}
        u2c = u2[:, :h, :w, :]
        u3c = u3[:, :h, :w, :]
        cat = np.concatenate([f1, u2c, u3c], axis=3)
        return br["fuse"].forward(cat, train)

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        br = self.branches
        g_cat = br["fuse"].backward(g_out)
        c1 = self._shapes["c1"]
        c2 = self.cfg.stage_channels[1]
        g_f1 = g_cat[..., :c1]
        g_u2c = g_cat[..., c1 : c1 + c2]
        g_u3c = g_cat[..., c1 + c2 :]

        def uncrop(g, shape):
            out = np.zeros(shape, dtype=g.dtype)
            out[:, : g.shape[1], : g.shape[2], :] = g
            return out

        g_f3 = br["up3a"].backward(br["up3b"].backward(uncrop(g_u3c, self._shapes["u3"])))
        g_f2 = br["up2"].backward(uncrop(g_u2c, self._shapes["u2"]))
        g_f2 = g_f2 + br["down3"].backward(br["s3"].backward(g_f3))
        g_f1 = g_f1 + br["down2"].backward(br["s2"].backward(g_f2))
        return br["s1"].backward(g_f1)

    def _collect(self, method: str) -> dict:
        out = {}
        for name, seq in self.branches.items():
            for key, val in getattr(seq, method)().items():
                out[f"{name}.{key}"] = val
        return out

    def params(self) -> dict:
        return self._collect("params")

    def grads(self) -> dict:
        return self._collect("grads")

    def state(self) -> dict:
        return self._collect("state")

    def _scatter(self, method: str, values: dict) -> None:
        for name, seq in self.branches.items():
            prefix = name + "."
            sub = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            getattr(seq, method)(sub)

    def set_params(self, values: dict) -> None:
        self._scatter("set_params", values)

    def set_state(self, values: dict) -> None:
        self._scatter("set_state", values)

    def estimate(self, lf: LightField, train: bool = False) -> DisparityMap:
        if lf.nv != self.cfg.nv:
            raise ValueError(f"light field nv={lf.nv} does not match config nv={self.cfg.nv}")
        h, w = lf.height, lf.width
        x = lf.data.reshape(h, w, -1).astype(np.float32)[None]
        out = self.forward(x, train=train)
        return DisparityMap(out[0, :, :, 0], dmax=self.cfg.dmax)


def disp_forward(cfg: DispNetConfig, params: dict, lf: LightField,
                 state: dict | None = None) -> DisparityMap:
    """Run the disparity network described by (cfg, params) on a light field."""
    model = DispNet(cfg, seed=0)
    model.set_params(params)
    if state:
        model.set_state(state)
    return model.estimate(lf, train=False)


@dataclass
class DispTrainResult:
    params: dict
    state: dict
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    diverged: bool = False


def train_disp(
    cfg: DispNetConfig,
    fields,
    epochs: int = 1,
    steps_per_epoch: int = 100,
    lr0: float = 1e-3,
    seed: int = 0,
    decay: float = 0.98,
    crop: int | None = None,
    out_dir=None,
    model: DispNet | None = None,
) -> DispTrainResult:
    """Unsupervised Adam training of the disparity network.

    Each step draws one light field (optionally a random spatial crop) and
    descends the warp loss; nothing about ground-truth disparity enters.
    Works on ground-truth or previously reconstructed light fields alike.
    """
    if len(fields) == 0:
        raise ValueError("no training light fields")
    if model is None:
        model = DispNet(cfg, seed=seed)
    adam = AdamState(lr=lr0)
    rng = np.random.default_rng(seed)
    result = DispTrainResult(params=model.params(), state=model.state())
    good = ({k: v.copy() for k, v in model.params().items()},
            {k: v.copy() for k, v in model.state().items()})

    for epoch in range(epochs):
        adam.lr = exp_decay_lr(lr0, epoch, decay)
        epoch_sum, n = 0.0, 0
        for _ in range(steps_per_epoch):
            lf = fields[int(rng.integers(0, len(fields)))]
            if crop is not None and (lf.height > crop or lf.width > crop):
                r = int(rng.integers(0, lf.height - crop + 1))
                c = int(rng.integers(0, lf.width - crop + 1))
                lf = LightField(lf.data[r : r + crop, c : c + crop])
            h, w = lf.height, lf.width
            x = lf.data.reshape(h, w, -1).astype(np.float32)[None]
            out = model.forward(x, train=True)
            d = out[0, :, :, 0].astype(np.float64)
            loss, g_d = disp_loss(lf, d, cfg.gamma)
            if not np.isfinite(loss):
                model.set_params(good[0])
                model.set_state(good[1])
                result.params, result.state = good
                result.diverged = True
                return result
            model.backward(g_d[None, :, :, None].astype(np.float32))
            model.set_params(adam_step(model.params(), model.grads(), adam))
            result.step_losses.append(float(loss))
            epoch_sum += loss
            n += 1
        result.epoch_losses.append(epoch_sum / max(n, 1))
        good = ({k: v.copy() for k, v in model.params().items()},
                {k: v.copy() for k, v in model.state().items()})
        if out_dir is not None:
            from . import lfio

            lfio.save_checkpoint(
                f"{out_dir}/epoch_{epoch:04d}",
                model.params(),
                model.state(),
                meta={
                    "kind": "disparity",
                    "epoch": epoch,
                    "steps": len(result.step_losses),
                    "nv": cfg.nv,
                    "stage_channels": list(cfg.stage_channels),
                    "gamma": cfg.gamma,
                    "dmax": cfg.dmax,
                    "lr": adam.lr,
                },
            )
    result.params = model.params()
    result.state = model.state()
    return result


def disp_from_coded(
    image: CodedImage,
    phi: SensingTensor,
    recon_cfg,
    recon_params: dict,
    disp_cfg: DispNetConfig,
    disp_params: dict,
    recon_state: dict | None = None,
    disp_state: dict | None = None,
) -> DisparityMap:
    """Disparity straight from a coded measurement: g(f(i, phi))."""
    from .reconnet import recon_forward

    lf_hat = recon_forward(recon_cfg, recon_params, image, phi, state=recon_state)
    return disp_forward(disp_cfg, disp_params, lf_hat, state=disp_state)
