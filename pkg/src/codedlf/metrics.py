"""Image quality metrics and the cross-mask-distribution evaluation harness."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .lightfield import CodedImage, LightField, SensingTensor
from .optics import MaskDistribution, NoiseModel, add_noise, forward, gen_sensing_tensor


def _unwrap(x) -> np.ndarray:
    if isinstance(x, LightField):
        return x.data
    if isinstance(x, CodedImage):
        return x.data
    return np.asarray(x)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all entries; +inf when the inputs match."""
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _ssim_2d(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    taps = _gaussian_taps(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    2-D inputs are compared directly; higher-rank inputs (view/channel stacks,
    full light fields) are compared slice by 2-D slice and averaged.
    """
    a, b = _unwrap(a).astype(np.float64), _unwrap(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    if a.ndim == 2:
        return _ssim_2d(a, b, peak)
    flat_a = a.reshape(a.shape[0], a.shape[1], -1)
    flat_b = b.reshape(b.shape[0], b.shape[1], -1)
    vals = [_ssim_2d(flat_a[:, :, i], flat_b[:, :, i], peak) for i in range(flat_a.shape[2])]
    return float(np.mean(vals))


@dataclass
class EvalReport:
    """Reconstruction quality for a set of images under one configuration.

    ``psnr_per_image``/``ssim_per_image`` index the evaluation set; the means
    are what the comparison tables report. ``recon_time_s`` measures the
    reconstruction call only (no I/O, no simulation). Everything except the
    timing is reproducible from (fingerprint, seed).
    """

    psnr_per_image: list = field(default_factory=list)
    ssim_per_image: list = field(default_factory=list)
    psnr_center_view: list = field(default_factory=list)
    ssim_center_view: list = field(default_factory=list)
    recon_time_s: float = 0.0
    fingerprint: str = ""
    seed: int = 0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_per_image)) if self.psnr_per_image else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_per_image)) if self.ssim_per_image else math.nan

    def metrics_dict(self) -> dict:
        """Deterministic portion of the report (timing kept separate)."""
        return {
            "psnr_per_image": [round(v, 10) if math.isfinite(v) else "inf" for v in self.psnr_per_image],
            "ssim_per_image": [round(v, 10) for v in self.ssim_per_image],
            "psnr_center_view": [round(v, 10) if math.isfinite(v) else "inf" for v in self.psnr_center_view],
            "ssim_center_view": [round(v, 10) for v in self.ssim_center_view],
            "mean_psnr": round(self.mean_psnr, 10) if math.isfinite(self.mean_psnr) else "inf",
            "mean_ssim": round(self.mean_ssim, 10),
            "fingerprint": self.fingerprint,
            "seed": self.seed,
        }


def evaluate_reconstruction(
    recon_fn,
    truths: list[LightField],
    phis: list[SensingTensor],
    sigma: float = 0.0,
    seed: int = 0,
    fingerprint: str = "",
) -> EvalReport:
    """Simulate, reconstruct and score each (field, mask) pair.

    ``recon_fn(image, phi) -> LightField`` is timed; simulation and metric
    computation are not.
    """
    if len(truths) != len(phis):
        raise ValueError("need one sensing tensor per evaluation image")
    report = EvalReport(seed=seed, fingerprint=fingerprint)
    elapsed = 0.0
    for idx, (lf, phi) in enumerate(zip(truths, phis)):
        image = forward(phi, lf)
        if sigma > 0:
            image = add_noise(image, NoiseModel(sigma), seed=seed * 100003 + idx)
        t0 = time.perf_counter()
        est = recon_fn(image, phi)
        elapsed += time.perf_counter() - t0
        report.psnr_per_image.append(psnr(est, lf))
        report.ssim_per_image.append(ssim(est, lf))
        c = (lf.nv - 1) // 2
        report.psnr_center_view.append(psnr(est.view(c, c), lf.view(c, c)))
        report.ssim_center_view.append(ssim(est.view(c, c), lf.view(c, c)))
    report.recon_time_s = elapsed
    return report


@dataclass
class CrossMaskResult:
    """3x3 grid of reports: rows = training distribution, cols = test distribution."""

    distributions: list
    reports: dict          # (train_kind, test_kind) -> EvalReport
    errors: dict = field(default_factory=dict)  # (train_kind, test_kind) -> str

    def psnr_matrix(self) -> np.ndarray:
        n = len(self.distributions)
        out = np.full((n, n), np.nan)
        for i, tr in enumerate(self.distributions):
            for j, te in enumerate(self.distributions):
                rep = self.reports.get((tr, te))
                if rep is not None:
                    out[i, j] = rep.mean_psnr
        return out

    def ssim_matrix(self) -> np.ndarray:
        n = len(self.distributions)
        out = np.full((n, n), np.nan)
        for i, tr in enumerate(self.distributions):
            for j, te in enumerate(self.distributions):
                rep = self.reports.get((tr, te))
                if rep is not None:
                    out[i, j] = rep.mean_ssim
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["train\\test"] + list(self.distributions))
            pm, sm = self.psnr_matrix(), self.ssim_matrix()
            for i, tr in enumerate(self.distributions):
                row = [tr]
                for j in range(len(self.distributions)):
                    if np.isnan(pm[i, j]):
                        row.append("error")
                    else:
                        row.append(f"{pm[i, j]:.4f}/{sm[i, j]:.4f}")
                writer.writerow(row)

    def to_json(self, path) -> None:
        payload = {
            "distributions": list(self.distributions),
            "cells": {
                f"{tr}->{te}": rep.metrics_dict() for (tr, te), rep in self.reports.items()
            },
            "errors": {f"{tr}->{te}": msg for (tr, te), msg in self.errors.items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def render(self) -> str:
        lines = [f"{'train/test':>12} | " + " | ".join(f"{d:>14}" for d in self.distributions)]
        lines.append("-" * len(lines[0]))
        pm, sm = self.psnr_matrix(), self.ssim_matrix()
        for i, tr in enumerate(self.distributions):
            cells = []
            for j in range(len(self.distributions)):
                if np.isnan(pm[i, j]):
                    cells.append(f"{'error':>14}")
                else:
                    cells.append(f"{pm[i, j]:>7.2f}/{sm[i, j]:.3f}")
            lines.append(f"{tr:>12} | " + " | ".join(cells))
        return "\n".join(lines)


def cross_mask_matrix(
    distributions,
    train_fn,
    eval_fields: list[LightField],
    seed: int = 0,
    sigma: float = 0.0,
    fingerprint: str = "",
) -> CrossMaskResult:
    """Train one reconstructor per mask distribution and evaluate it on test
    data generated from every distribution.

    ``train_fn(dist: MaskDistribution) -> recon_fn`` where
    ``recon_fn(image, phi) -> LightField``. Masks for the test sets are drawn
    deterministically from (seed, distribution, image index). A failed
    training run is recorded in ``errors`` and its row left empty.
    """
    if not eval_fields:
        raise ValueError("empty evaluation set")
    nv = eval_fields[0].nv
    kinds = [d if isinstance(d, str) else d.kind for d in distributions]
    result = CrossMaskResult(distributions=kinds, reports={})
    for i, train_kind in enumerate(kinds):
        try:
            recon_fn = train_fn(MaskDistribution(train_kind, seed=seed * 7919 + i))
        except Exception as exc:  # harness must report, not die
            for test_kind in kinds:
                result.errors[(train_kind, test_kind)] = f"training failed: {exc}"
            continue
        for j, test_kind in enumerate(kinds):
            phis = [
                gen_sensing_tensor(
                    (lf.height, lf.width, nv),
                    MaskDistribution(test_kind, seed=seed * 104729 + j * 1000 + idx),
                )
                for idx, lf in enumerate(eval_fields)
            ]
            try:
                result.reports[(train_kind, test_kind)] = evaluate_reconstruction(
                    recon_fn, eval_fields, phis, sigma=sigma, seed=seed,
                    fingerprint=fingerprint,
                )
            except Exception as exc:
                result.errors[(train_kind, test_kind)] = f"evaluation failed: {exc}"
    return result
