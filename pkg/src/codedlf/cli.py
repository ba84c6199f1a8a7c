"""Command-line surface of the toolkit.

Subcommands: gen-mask, gen-scene, simulate, train-dict, recon-sparse,
train-recon, infer, train-disp, disp, eval, cross-mask. Every stochastic
command takes an explicit --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import lfio
from .config import ExperimentConfig, load_config, write_resolved_config
from .dispnet import DispNet, DispNetConfig, disp_forward, train_disp
from .lightfield import LightField
from .metrics import cross_mask_matrix, psnr, ssim
from .optics import MaskDistribution, NoiseModel, add_noise, forward, gen_sensing_tensor
from .pipeline import _grid_patches, ingest_dataset, run_pipeline
from .reconnet import ReconNet, ReconNetConfig, train_recon
from .scenes import SceneSpec, gen_scene
from .sparse import default_atom_count, ksvd, recon_sparse


def _load_lightfield(path: str) -> LightField:
    p = Path(path)
    if p.is_dir():
        return lfio.read_view_dir(p)
    return lfio.load_lightfield(p)


def _scene_fields(cfg: ExperimentConfig):
    if cfg.data_dir:
        split = ingest_dataset(cfg.data_dir)
        return split.train, (split.test or split.train)
    g, sc = cfg.geometry, cfg.scene
    spec = SceneSpec(height=g.height, width=g.width, nv=g.nv,
                     layer_disparities=sc.layer_disparities,
                     texture_smoothness=sc.texture_smoothness, dmax=sc.dmax)
    scenes = [gen_scene(spec, seed=cfg.seed + i) for i in range(sc.count + sc.test_count)]
    return [s.lf for s in scenes[: sc.count]], [s.lf for s in scenes[sc.count :]]


def cmd_gen_mask(args) -> int:
    phi = gen_sensing_tensor((args.height, args.width, args.nv),
                             MaskDistribution(args.dist, seed=args.seed))
    lfio.save_sensing_tensor(args.out, phi)
    print(f"wrote sensing tensor {phi.weights.shape} to {args.out}")
    return 0


def cmd_gen_scene(args) -> int:
    disparities = tuple(float(x) for x in args.layers.split(","))
    spec = SceneSpec(height=args.height, width=args.width, nv=args.nv,
                     layer_disparities=disparities, texture_smoothness=args.smooth)
    scene = gen_scene(spec, seed=args.seed)
    out = Path(args.out)
    lfio.export_views(scene.lf, out)
    lfio.write_lft(out / "gt_disparity.lft", scene.gt_disparity.data)
    lfio.save_disparity_png(scene.gt_disparity, out / "gt_disparity.png")
    print(f"wrote scene ({args.height}x{args.width}, nv={args.nv}, "
          f"{len(disparities)} layers) to {out}")
    return 0


def cmd_simulate(args) -> int:
    lf = _load_lightfield(args.lf)
    phi = lfio.load_sensing_tensor(args.phi)
    image = forward(phi, lf)
    if args.sigma > 0:
        image = add_noise(image, NoiseModel(args.sigma), seed=args.seed)
    lfio.write_lft(args.out, image.data)
    if args.png:
        lfio.save_coded_png(image, args.png)
    print(f"wrote coded image {image.data.shape} to {args.out}")
    return 0


def cmd_train_dict(args) -> int:
    fields: list[LightField] = []
    data = Path(args.data)
    if data.is_dir() and (data / "meta.json").exists():
        fields = [lfio.read_view_dir(data)]
    elif data.is_dir():
        fields = ingest_dataset(data).all
    else:
        fields = [lfio.load_lightfield(data)]
    nv = fields[0].nv
    k = args.patch * args.patch * nv * nv * 3
    atoms = args.atoms or default_atom_count(k)
    rng = np.random.default_rng(args.seed)
    cols = np.empty((k, args.samples))
    for i in range(args.samples):
        lf = fields[int(rng.integers(0, len(fields)))]
        r = int(rng.integers(0, lf.height - args.patch + 1))
        c = int(rng.integers(0, lf.width - args.patch + 1))
        cols[:, i] = lf.data[r : r + args.patch, c : c + args.patch].reshape(-1)
    D, errs = ksvd(cols, s=min(atoms, args.samples), iters=args.iters, seed=args.seed,
                   nnz=args.nnz)
    lfio.save_dictionary(args.out, D, meta={
        "patch": args.patch, "nv": nv, "n_atoms": D.n_atoms, "lambda": args.lam,
    })
    print(f"trained dictionary [{D.patch_dim}, {D.n_atoms}], "
          f"final training mse {errs[-1]:.3e}, saved to {args.out}")
    return 0


def cmd_recon_sparse(args) -> int:
    image_arr = lfio.read_lft(args.coded)
    from .lightfield import CodedImage

    image = CodedImage(image_arr)
    phi = lfio.load_sensing_tensor(args.phi)
    D, meta = lfio.load_dictionary(args.dict)
    lf = recon_sparse(image, phi, D, solver=args.solver, patch=meta.get("patch", 8),
                      overlap=args.overlap, lam=args.lam, max_nnz=args.max_nnz)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lfio.save_lightfield(out / "recon.lft", lf)
    lfio.save_view_mosaic(lf, out / "recon_mosaic.png")
    print(f"wrote sparse reconstruction to {out}")
    return 0


def cmd_train_recon(args) -> int:
    cfg = load_config(args.config)
    train_fields, _ = _scene_fields(cfg)
    g, rc = cfg.geometry, cfg.recon
    net_cfg = ReconNetConfig(nv=g.nv, channels=rc.channels, beta=rc.beta,
                             patch=(g.patch, g.patch), batch=rc.batch)
    patches = _grid_patches(train_fields, g.patch, g.stride)
    masks = [gen_sensing_tensor((g.patch, g.patch, g.nv),
                                MaskDistribution(cfg.mask.distribution, seed=cfg.mask.seed + 1000 + i))
             for i in range(8)]
    model = ReconNet(net_cfg, seed=cfg.seed)
    result = train_recon(net_cfg, patches, masks, epochs=rc.epochs,
                         steps_per_epoch=rc.steps_per_epoch, lr0=rc.lr,
                         sigma=cfg.noise_sigma, seed=cfg.seed, decay=rc.decay,
                         batch_size=rc.batch, fine_tune=rc.fine_tune,
                         out_dir=args.out, model=model)
    lfio.save_checkpoint(Path(args.out) / "final", result.params, result.state, meta={
        "kind": "recon", "nv": g.nv, "channels": rc.channels, "beta": rc.beta,
        "steps": len(result.step_losses), "diverged": result.diverged,
    })
    write_resolved_config(cfg, args.out)
    status = "diverged" if result.diverged else "ok"
    print(f"training {status}: {len(result.step_losses)} steps, "
          f"final loss {result.step_losses[-1]:.4f}, checkpoint in {args.out}/final")
    return 0


def _recon_cfg_from_meta(meta: dict) -> ReconNetConfig:
    return ReconNetConfig(nv=int(meta["nv"]), channels=int(meta["channels"]),
                          beta=float(meta.get("beta", 0.004)))


def cmd_infer(args) -> int:
    from .lightfield import CodedImage
    from .reconnet import recon_forward

    params, state, meta = lfio.load_checkpoint(args.ckpt)
    cfg = _recon_cfg_from_meta(meta)
    image = CodedImage(lfio.read_lft(args.coded))
    phi = lfio.load_sensing_tensor(args.phi)
    lf = recon_forward(cfg, params, image, phi, state=state)
    out = Path(args.out)
    lfio.export_views(lf, out)
    lfio.save_lightfield(out / "recon.lft", lf)
    lfio.save_view_mosaic(lf, out / "recon_mosaic.png")
    print(f"wrote reconstruction ({lf.height}x{lf.width}, nv={lf.nv}) to {out}")
    return 0


def cmd_train_disp(args) -> int:
    cfg = load_config(args.config)
    train_fields, _ = _scene_fields(cfg)
    dc, g = cfg.disp, cfg.geometry
    disp_cfg = DispNetConfig(nv=g.nv, stage_channels=dc.stage_channels,
                             gamma=dc.gamma, dmax=dc.dmax)
    model = DispNet(disp_cfg, seed=cfg.seed)
    result = train_disp(disp_cfg, train_fields, epochs=dc.epochs,
                        steps_per_epoch=dc.steps_per_epoch, lr0=dc.lr,
                        seed=cfg.seed, crop=min(dc.crop, g.height),
                        out_dir=args.out, model=model)
    lfio.save_checkpoint(Path(args.out) / "final", result.params, result.state, meta={
        "kind": "disparity", "nv": g.nv, "stage_channels": list(dc.stage_channels),
        "gamma": dc.gamma, "dmax": dc.dmax, "steps": len(result.step_losses),
        "diverged": result.diverged,
    })
    write_resolved_config(cfg, args.out)
    print(f"disparity training done: {len(result.step_losses)} steps, "
          f"final loss {result.step_losses[-1]:.4f}, checkpoint in {args.out}/final")
    return 0


def _disp_cfg_from_meta(meta: dict) -> DispNetConfig:
    return DispNetConfig(nv=int(meta["nv"]),
                         stage_channels=tuple(meta["stage_channels"]),
                         gamma=float(meta.get("gamma", 0.1)),
                         dmax=float(meta.get("dmax", 4.0)))


def cmd_disp(args) -> int:
    params, state, meta = lfio.load_checkpoint(args.ckpt)
    disp_cfg = _disp_cfg_from_meta(meta)
    if args.lf:
        lf = _load_lightfield(args.lf)
    else:
        if not (args.coded and args.phi and args.recon_ckpt):
            print("disp: need --lf, or --coded with --phi and --recon-ckpt", file=sys.stderr)
            return 2
        from .lightfield import CodedImage
        from .reconnet import recon_forward

        rparams, rstate, rmeta = lfio.load_checkpoint(args.recon_ckpt)
        image = CodedImage(lfio.read_lft(args.coded))
        phi = lfio.load_sensing_tensor(args.phi)
        lf = recon_forward(_recon_cfg_from_meta(rmeta), rparams, image, phi, state=rstate)
    dmap = disp_forward(disp_cfg, params, lf, state=state)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lfio.write_lft(out / "disparity.lft", dmap.data)
    lfio.save_disparity_png(dmap, out / "disparity.png")
    print(f"wrote disparity map {dmap.data.shape} to {out}")
    return 0


def cmd_eval(args) -> int:
    recon = _load_lightfield(args.recon)
    truth = _load_lightfield(args.truth)
    metrics = {
        "psnr": psnr(recon, truth),
        "ssim": ssim(recon, truth),
    }
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    results = run_pipeline(cfg)
    rep = results["report"]["reconstruction"]
    print(f"pipeline done ({results['fingerprint']}): "
          f"psnr {rep['mean_psnr']}, ssim {rep['mean_ssim']}, artifacts in {results['out_dir']}")
    return 0


def cmd_cross_mask(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig(seed=args.seed, out_dir=args.out)
    g, rc = cfg.geometry, cfg.recon
    _, test_fields = _scene_fields(cfg)
    patches_per_dist, _ = _scene_fields(cfg)
    patches = _grid_patches(patches_per_dist, g.patch, g.stride)

    def train_fn(dist: MaskDistribution):
        net_cfg = ReconNetConfig(nv=g.nv, channels=rc.channels, beta=rc.beta,
                                 patch=(g.patch, g.patch), batch=rc.batch)
        masks = [gen_sensing_tensor((g.patch, g.patch, g.nv),
                                    MaskDistribution(dist.kind, seed=dist.seed + i))
                 for i in range(8)]
        model = ReconNet(net_cfg, seed=cfg.seed)
        train_recon(net_cfg, patches, masks, epochs=rc.epochs,
                    steps_per_epoch=rc.steps_per_epoch, lr0=rc.lr,
                    sigma=cfg.noise_sigma, seed=cfg.seed, decay=rc.decay,
                    batch_size=rc.batch, model=model)
        return lambda image, phi: model.reconstruct(image, phi)

    result = cross_mask_matrix(["uniform", "rgb", "rgbw"], train_fn, test_fields,
                               seed=args.seed, sigma=cfg.noise_sigma,
                               fingerprint=cfg.fingerprint())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / f"cross_mask_{args.seed}.csv")
    result.to_json(out / f"cross_mask_{args.seed}.json")
    print(result.render())
    print(f"matrix written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codedlf",
                                     description="coded color-mask light field toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mask", help="draw and save a sensing tensor")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--nv", type=int, required=True)
    p.add_argument("--dist", choices=["uniform", "rgb", "rgbw"], default="rgbw")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_mask)

    p = sub.add_parser("gen-scene", help="generate a synthetic layered scene")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--nv", type=int, default=3)
    p.add_argument("--layers", default="0,2", help="comma-separated layer disparities")
    p.add_argument("--smooth", type=float, default=2.5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("simulate", help="project a light field through a mask")
    p.add_argument("--lf", required=True, help="view directory or .lft file")
    p.add_argument("--phi", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", default=None)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train-dict", help="K-SVD dictionary from light field patches")
    p.add_argument("--data", required=True)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--atoms", type=int, default=0)
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--nnz", type=int, default=None)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_dict)

    p = sub.add_parser("recon-sparse", help="sparse-coding reconstruction")
    p.add_argument("--coded", required=True)
    p.add_argument("--phi", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--solver", choices=["omp", "admm"], default="admm")
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--max-nnz", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_recon_sparse)

    p = sub.add_parser("train-recon", help="train the reconstruction network")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_recon)

    p = sub.add_parser("infer", help="reconstruct with a trained network")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--coded", required=True)
    p.add_argument("--phi", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("train-disp", help="train the disparity network (unsupervised)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_disp)

    p = sub.add_parser("disp", help="estimate disparity from a light field or coded image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lf", default=None)
    p.add_argument("--coded", default=None)
    p.add_argument("--phi", default=None)
    p.add_argument("--recon-ckpt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_disp)

    p = sub.add_parser("eval", help="PSNR/SSIM between two light fields")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("cross-mask", help="train/test matrix across mask distributions")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cross_mask)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
