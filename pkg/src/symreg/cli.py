"""Command-line entry point: ``symreg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, esp, flow, harness, parallel, phantom, swd
from .io import load_volume, save_volume
from .volume import ScalarVolume, rmsd

log = logging.getLogger("symreg")


def _pipeline_config(args) -> harness.PipelineConfig:
    cfg = harness.PipelineConfig.load(args.config) if args.config else harness.preset(args.preset)
    if getattr(args, "preconditioning", None):
        cfg.preconditioning = args.preconditioning
    if getattr(args, "coupling", None):
        cfg.esp = None if args.coupling == "none" else flow.EspSpec(args.coupling)
    if getattr(args, "levels", None):
        cfg.flow.levels = args.levels
    if getattr(args, "max_shells", None):
        cfg.flow.max_shells = args.max_shells
    return cfg.validate()


def cmd_register(args) -> int:
    cfg = _pipeline_config(args)
    fixed, moving = load_volume(args.fixed), load_volume(args.moving)
    res = harness.register_pair(fixed, moving, cfg, args.case_id or Path(args.moving).name.split(".")[0],
                                args.warp_kind)
    paths = harness.write_outputs(res, args.out, cfg, args.format)
    print(f"rmsd_before,{res.rmsd_before:.6g}")
    print(f"rmsd_after,{res.rmsd_after:.6g}")
    print(f"shells,{res.shells}")
    print(f"wall_seconds,{res.wall_seconds:.1f}")
    if args.inverse:
        inv, resid = flow.invert_map(fixed, res.warped, cfg.registration_config(), res.map)
        flow.save_map(inv, f"{args.out}_inverse.map")
        print(f"inverse_residual_voxels,{resid:.4g}")
    log.info("wrote %s", ", ".join(paths.values()))
    return 0


def cmd_phantom(args) -> int:
    dims = tuple(args.dims)
    if args.kind == "c-sphere":
        c, ball = phantom.make_c_sphere_pair(dims, tuple(args.radii), args.gap)
        save_volume(c, f"{args.out}_c{_ext(args.format)}", args.format)
        save_volume(ball, f"{args.out}_ball{_ext(args.format)}", args.format)
    else:
        v = phantom.textured_phantom(dims, seed=args.seed)
        save_volume(v, f"{args.out}{_ext(args.format)}", args.format)
    return 0


def cmd_panel(args) -> int:
    v = load_volume(args.volume)
    case_id = args.case_id or Path(args.volume).name.split(".")[0]
    if args.register:
        cfg = _pipeline_config(args)
        results = harness.run_panel(v, args.out_dir, case_id, cfg, args.seed, args.format)
        rep = harness.RunReport([r.row() for r in results])
        sys.stdout.write(rep.render(cfg.report_format))
    else:
        for vol_path, desc_path in harness.make_panel(v, args.out_dir, case_id, args.seed, args.format):
            print(f"{vol_path},{desc_path}")
    return 0


def cmd_eval(args) -> int:
    a, b = load_volume(args.reference), load_volume(args.test)
    print(f"rmsd,{rmsd(a, b):.6g}")
    if args.map:
        dmap = flow.load_map(args.map)
        d = dmap.det()
        print(f"det_min,{float(d.min()):.6g}")
        print(f"det_max,{float(d.max()):.6g}")
        print(f"fold_fraction,{flow.fold_fraction(dmap):.6g}")
    return 0


def cmd_report(args) -> int:
    rep = harness.collect_report(args.directory)
    fmt = "markdown" if args.markdown else "csv"
    text = rep.render(fmt)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for w in rep.warnings:
        log.warning(w)
    return 0


def cmd_esp(args) -> int:
    v = load_volume(args.volume)
    if args.coupling == "adjacency":
        Q = esp.build_adjacency_coupling(v.geometry, args.connectivity)
    elif args.coupling == "image-weighted":
        Q = esp.build_image_weighted_coupling(v, args.connectivity, args.beta)
    else:
        Q = esp.build_gaussian_coupling(v.geometry, sigma=args.sigma)
    rho = esp.transition_kernel(Q)
    print(f"lambda,{rho.solution.lam:.10g}")
    save_volume(rho.solution.mu, args.out, args.format)
    if args.smooth:
        save_volume(ScalarVolume(v.geometry, rho.propagate(v.data)), args.smooth, args.format)
    return 0


def cmd_swd(args) -> int:
    v = load_volume(args.volume)
    basis = swd.build_basis(args.radius or swd.default_radius(v.geometry), args.L, args.N)
    c = swd.forward_swd(v, basis)
    if args.coeffs:
        swd.save_coefficients(c, args.coeffs)
    filt = None
    if args.lowpass:
        filt = swd.FilterSpec.lowpass(args.lowpass[0], args.lowpass[1])
    if args.out:
        rec = swd.inverse_swd(c, filt, v.geometry)
        save_volume(rec, args.out, args.format)
        if filt is None:
            inside = np.linalg.norm(v.geometry.grid() - np.reshape(c.center, (3, 1, 1, 1)), axis=0) <= basis.a
            print(f"roundtrip_rel_l2,{swd.relative_l2(rec, v, inside):.6g}")
    if args.similarity:
        other = load_volume(args.similarity)
        c0 = swd.forward_swd(v, basis, swd.intensity_centroid(v))
        c1 = swd.forward_swd(other, basis, swd.intensity_centroid(other))
        p = swd.estimate_similarity(c0, c1)
        print(f"scale,{p.s_r:.6g}")
        print(f"theta_deg,{np.rad2deg(p.theta_r):.4f}")
        print(f"phi_deg,{np.rad2deg(p.phi_r):.4f}")
        print("translation," + ",".join(f"{t:.4f}" for t in p.translation))
    return 0


def _ext(fmt: str) -> str:
    return ".nii.gz" if fmt == "nifti1" else ".vol"


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="symreg", description="Volumetric image registration by symplectic flow.")
    top.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (0 = all CPUs)")
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--format", choices=("nifti1", "raw-f32"), default="nifti1", help="output volume format")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verbose", "-v", action="count", default=0)
    sub = top.add_subparsers(dest="command", required=True)

    def reg_opts(p):
        p.add_argument("--preset", default="default", choices=("default", "c-sphere", "panel"))
        p.add_argument("--preconditioning", choices=("none", "swd-similarity"))
        p.add_argument("--coupling", choices=("none", "adjacency", "image-weighted", "gaussian-stationary"))
        p.add_argument("--levels", type=int)
        p.add_argument("--max-shells", type=int)

    p = sub.add_parser("register", parents=[common], help="register MOVING onto FIXED")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--case-id")
    p.add_argument("--warp-kind", default="none")
    p.add_argument("--inverse", action="store_true", help="also estimate the inverse map")
    reg_opts(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom")
    p.add_argument("kind", choices=("c-sphere", "textured"))
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--radii", type=float, nargs=2, default=(12.0, 22.0))
    p.add_argument("--gap", type=float, default=60.0, help="gap angle in degrees")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("panel", parents=[common], help="generate the five-warp panel for a volume")
    p.add_argument("volume")
    p.add_argument("out_dir")
    p.add_argument("--case-id")
    p.add_argument("--register", action="store_true", help="register every member and print the report")
    reg_opts(p)
    p.set_defaults(func=cmd_panel)

    p = sub.add_parser("eval", parents=[common], help="RMSD between two volumes")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--map", help="map file whose Jacobian statistics to print")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="aggregate result files in a directory")
    p.add_argument("directory")
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("esp", parents=[common], help="stationary density of a transition kernel")
    p.add_argument("volume")
    p.add_argument("--coupling", choices=("adjacency", "image-weighted", "gaussian-stationary"), default="adjacency")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=6)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--smooth", help="also write the volume smoothed by the kernel")
    p.set_defaults(func=cmd_esp)

    p = sub.add_parser("swd", parents=[common], help="spherical wave decomposition tools")
    p.add_argument("volume")
    p.add_argument("-L", type=int, default=16)
    p.add_argument("-N", type=int, default=16)
    p.add_argument("--radius", type=float)
    p.add_argument("--coeffs", help="write coefficients here")
    p.add_argument("--out", help="write the (filtered) reconstruction here")
    p.add_argument("--lowpass", type=int, nargs=2, metavar=("L", "N"))
    p.add_argument("--similarity", metavar="OTHER", help="estimate the similarity taking VOLUME to OTHER")
    p.set_defaults(func=cmd_swd)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parallel.set_workers(args.threads)
    try:
        return args.func(args)
    except (ValueError, OSError, flow.IntegrationError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
