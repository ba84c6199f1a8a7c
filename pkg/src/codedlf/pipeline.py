"""End-to-end experiment orchestration and dataset ingestion.

run_pipeline drives simulate -> reconstruct -> (disparity) -> evaluate ->
emit. Every run directory carries the resolved config, all seeds and a
deterministic report; wall-clock timings live in a separate file so reports
are bit-reproducible under equal fingerprints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, write_resolved_config
from .dispnet import DispNet, DispNetConfig, train_disp
from .lfio import (
    DatasetError,
    read_view_dir,
    save_coded_png,
    save_disparity_png,
    save_lightfield,
    save_sensing_tensor,
    save_view_mosaic,
)
from .lightfield import LightField, PatchSpec, extract_patch
from .metrics import EvalReport, evaluate_reconstruction, psnr
from .optics import (
    MaskDistribution,
    NoiseModel,
    add_noise,
    forward,
    gen_sensing_tensor,
    mean_backprojection,
)
from .reconnet import ReconNet, ReconNetConfig, train_recon
from .scenes import SceneSpec, gen_scene
from .sparse import Dictionary, default_atom_count, ksvd, recon_sparse


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name and config fingerprint."""

    def __init__(self, stage: str, fingerprint: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed (config {fingerprint}): {cause}")
        self.stage = stage
        self.fingerprint = fingerprint


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    names: dict = field(default_factory=dict)

    @property
    def all(self) -> list:
        return self.train + self.test


def ingest_dataset(directory) -> DatasetSplit:
    """Load light fields from a dataset directory.

    A directory holding ``meta.json`` directly is a single scene. Otherwise
    every subdirectory with a ``meta.json`` is a scene; an optional top-level
    ``manifest.json`` with ``{"train": [...], "test": [...]}`` assigns the
    split (unlisted scenes default to train).
    """
    directory = Path(directory)
    if (directory / "meta.json").exists():
        lf = read_view_dir(directory)
        return DatasetSplit(train=[lf], names={directory.name: "train"})
    scene_dirs = sorted(d for d in directory.iterdir() if (d / "meta.json").exists())
    if not scene_dirs:
        raise DatasetError(f"{directory}: no scenes found (no meta.json anywhere)")
    manifest_path = directory / "manifest.json"
    test_names: set = set()
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
            test_names = set(manifest.get("test", []))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{directory}: malformed manifest.json ({exc})") from exc
    split = DatasetSplit()
    shapes = set()
    for scene_dir in scene_dirs:
        lf = read_view_dir(scene_dir)
        shapes.add(lf.data.shape)
        if len(shapes) > 1:
            raise DatasetError(f"{directory}: inconsistent view shapes across scenes: {shapes}")
        if scene_dir.name in test_names:
            split.test.append(lf)
            split.names[scene_dir.name] = "test"
        else:
            split.train.append(lf)
            split.names[scene_dir.name] = "train"
    return split


def _grid_patches(fields: list[LightField], patch: int, stride: int) -> list[LightField]:
    out = []
    for lf in fields:
        for r in range(0, lf.height - patch + 1, stride):
            for c in range(0, lf.width - patch + 1, stride):
                out.append(extract_patch(lf, PatchSpec((r, c), (patch, patch), stride)))
    return out


def _random_patch_matrix(fields, patch, nv, count, rng) -> np.ndarray:
    """Random patch columns [patch*patch*nv*nv*3, count] for dictionary training."""
    cols = np.empty((patch * patch * nv * nv * 3, count))
    for i in range(count):
        lf = fields[int(rng.integers(0, len(fields)))]
        r = int(rng.integers(0, lf.height - patch + 1))
        c = int(rng.integers(0, lf.width - patch + 1))
        cols[:, i] = lf.data[r : r + patch, c : c + patch].reshape(-1)
    return cols


def _train_dictionary(cfg: ExperimentConfig, fields, rng) -> Dictionary:
    sp = cfg.sparse
    nv = cfg.geometry.nv
    k = sp.patch * sp.patch * nv * nv * 3
    atoms = sp.atoms or default_atom_count(k)
    # cap the toy dictionary so K-SVD stays tractable at desk scale
    atoms = min(atoms, max(64, sp.train_patches // 2))
    samples = _random_patch_matrix(fields, sp.patch, nv, sp.train_patches, rng)
    D, _ = ksvd(samples, s=atoms, iters=sp.ksvd_iters, seed=int(rng.integers(2**31)))
    return D


def _build_reconstructor(cfg: ExperimentConfig, train_fields, out: dict):
    """Returns (recon_fn, artifacts) for the configured method."""
    g = cfg.geometry
    rng = np.random.default_rng(cfg.seed + 17)
    if cfg.method == "backprojection":
        return mean_backprojection, {}

    if cfg.method in ("sparse-admm", "sparse-omp"):
        D = _train_dictionary(cfg, train_fields, rng)
        solver = "admm" if cfg.method == "sparse-admm" else "omp"
        sp = cfg.sparse

        def recon_fn(image, phi):
            return recon_sparse(
                image, phi, D, solver=solver, patch=sp.patch, overlap=sp.overlap,
                lam=sp.lam, max_nnz=sp.max_nnz, admm_iters=sp.admm_iters,
            )

        return recon_fn, {"dictionary": D}

    # trained reconstruction network
    rc = cfg.recon
    net_cfg = ReconNetConfig(
        nv=g.nv, channels=rc.channels, beta=rc.beta,
        patch=(g.patch, g.patch), batch=rc.batch,
    )
    patches = _grid_patches(train_fields, g.patch, g.stride)
    masks = [
        gen_sensing_tensor((g.patch, g.patch, g.nv),
                           MaskDistribution(cfg.mask.distribution, seed=cfg.mask.seed + 1000 + i))
        for i in range(8)
    ]
    model = ReconNet(net_cfg, seed=cfg.seed)
    result = train_recon(
        net_cfg, patches, masks,
        epochs=rc.epochs, steps_per_epoch=rc.steps_per_epoch, lr0=rc.lr,
        sigma=cfg.noise_sigma, seed=cfg.seed, decay=rc.decay,
        batch_size=rc.batch, fine_tune=rc.fine_tune, model=model,
    )
    out["recon_train_losses"] = result.step_losses

    def recon_fn(image, phi):
        return model.reconstruct(image, phi, train=False)

    return recon_fn, {"model": model, "net_cfg": net_cfg, "train_result": result}


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """Execute the configured experiment; returns artifact paths and reports."""
    fingerprint = cfg.fingerprint()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)
    timings: dict = {}
    results: dict = {"out_dir": str(out_dir), "fingerprint": fingerprint}

    def stage(name):
        class _Stage:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                return self_inner

            def __exit__(self_inner, exc_type, exc, tb):
                timings[name] = time.perf_counter() - self_inner.t0
                if exc is not None and not isinstance(exc, PipelineError):
                    raise PipelineError(name, fingerprint, exc) from exc
                return False

        return _Stage()

    g = cfg.geometry
    with stage("scene"):
        if cfg.data_dir:
            split = ingest_dataset(cfg.data_dir)
            train_fields = split.train
            test_fields = split.test or split.train
            gt_disp = [None] * len(test_fields)
        else:
            spec = SceneSpec(
                height=g.height, width=g.width, nv=g.nv,
                layer_disparities=cfg.scene.layer_disparities,
                texture_smoothness=cfg.scene.texture_smoothness,
                dmax=cfg.scene.dmax,
            )
            scenes = [gen_scene(spec, seed=cfg.seed + i)
                      for i in range(cfg.scene.count + cfg.scene.test_count)]
            train_fields = [s.lf for s in scenes[: cfg.scene.count]]
            test_scenes = scenes[cfg.scene.count :]
            test_fields = [s.lf for s in test_scenes]
            gt_disp = [s.gt_disparity for s in test_scenes]

    with stage("mask"):
        phis = [
            gen_sensing_tensor((lf.height, lf.width, g.nv),
                               MaskDistribution(cfg.mask.distribution, seed=cfg.mask.seed + i))
            for i, lf in enumerate(test_fields)
        ]
        save_sensing_tensor(out_dir / "phi_0.lft", phis[0])

    with stage("simulate"):
        coded = []
        for i, (lf, phi) in enumerate(zip(test_fields, phis)):
            img = forward(phi, lf)
            if cfg.noise_sigma > 0:
                img = add_noise(img, NoiseModel(cfg.noise_sigma), seed=cfg.seed * 31 + i)
            coded.append(img)
        save_coded_png(coded[0], out_dir / "coded_0.png")

    with stage("reconstruct"):
        recon_fn, artifacts = _build_reconstructor(cfg, train_fields, results)
        report = evaluate_reconstruction(
            recon_fn, test_fields, phis, sigma=cfg.noise_sigma,
            seed=cfg.seed, fingerprint=fingerprint,
        )
        recons = []
        for img, phi in zip(coded, phis):
            recons.append(recon_fn(img, phi))
        save_view_mosaic(recons[0], out_dir / "recon_mosaic_0.png")
        save_view_mosaic(test_fields[0], out_dir / "truth_mosaic_0.png")
        save_lightfield(out_dir / "recon_0.lft", recons[0])

    with stage("baselines"):
        zero_psnr = [psnr(np.zeros_like(lf.data), lf.data) for lf in test_fields]
        bp_report = evaluate_reconstruction(
            mean_backprojection, test_fields, phis, sigma=cfg.noise_sigma,
            seed=cfg.seed, fingerprint=fingerprint,
        )

    disp_metrics = {}
    if cfg.run_disparity:
        with stage("disparity"):
            dc = cfg.disp
            disp_cfg = DispNetConfig(
                nv=g.nv, stage_channels=dc.stage_channels, gamma=dc.gamma, dmax=dc.dmax,
            )
            source = recons if dc.source == "reconstruction" else test_fields
            model = DispNet(disp_cfg, seed=cfg.seed)
            train_disp(
                disp_cfg, source, epochs=dc.epochs, steps_per_epoch=dc.steps_per_epoch,
                lr0=dc.lr, seed=cfg.seed, crop=min(dc.crop, g.height), model=model,
            )
            dmap = model.estimate(source[0], train=False)
            save_disparity_png(dmap, out_dir / "disparity_0.png")
            from .lfio import write_lft

            write_lft(out_dir / "disparity_0.lft", dmap.data)
            if gt_disp[0] is not None:
                interior = dmap.data[4:-4, 4:-4]
                gt_interior = gt_disp[0].data[4:-4, 4:-4]
                disp_metrics = {
                    "median_abs_error": float(np.median(np.abs(interior - gt_interior))),
                    "mean_abs_error": float(np.mean(np.abs(interior - gt_interior))),
                }

    with stage("emit"):
        report_payload = {
            "fingerprint": fingerprint,
            "seed": cfg.seed,
            "method": cfg.method,
            "reconstruction": report.metrics_dict(),
            "mean_backprojection": bp_report.metrics_dict(),
            "zero_image_psnr": [round(v, 10) for v in zero_psnr],
            "disparity": disp_metrics,
        }
        (out_dir / "report.json").write_text(json.dumps(report_payload, indent=2, sort_keys=True))
        timings["reconstruction_time_s"] = report.recon_time_s
        (out_dir / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True))

    results["report"] = report_payload
    results["eval_report"] = report
    results["backprojection_report"] = bp_report
    results.update({k: v for k, v in artifacts.items() if k in ("net_cfg",)})
    return results
