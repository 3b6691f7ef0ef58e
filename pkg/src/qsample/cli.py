"""Command-line surface: qsample <subcommand> [--flag value ...].

Every run writes a manifest next to its primary output echoing the
toolkit version and all effective parameter values, so runs can be
reproduced exactly.  Exit codes: 0 success, 1 usage error, 2 data error.
Diagnostics go to stderr; results go to files or stdout.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .design import DesignConfig, electrostatic_design
from .phantom import PhantomSpec, add_rician_noise, generate_phantom, load_truth, save_truth
from .pipeline import ReconstructionParams, TrainConfig, reconstruct, subsample, train_joint
from .score import (
    BD_CAP,
    BD_VARIANT,
    assign_bundles,
    bhattacharyya_distance,
    bundle_points,
    connection_scores,
    psnr,
    write_report_csv,
    write_report_text,
)
from .sphere import (
    DirectionSet,
    canonicalize_hemisphere,
    load_directions_csv,
    save_directions_csv,
)
from .tract import (
    TrackParams,
    csa_odf,
    gfa_map,
    load_qtrk,
    peak_field,
    save_qtrk,
    track_streamlines,
)
from .util import default_threads
from .volume import brain_mask, load_qvol, load_scalar_qvol, save_qvol, save_scalar_qvol

__all__ = ["entry", "export_bvec", "main", "plot_dirs_svg"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def export_bvec(dirs: DirectionSet, b_value: float, n_b0: int, bvec_path, bval_path) -> None:
    """Write FSL-convention gradient tables.

    The bvec file holds three space-separated lines (x, y, z components)
    with ``n_b0`` zero columns first; the bval file is one line of
    b-values.  Directions are canonicalized to the upper hemisphere.
    """
    if n_b0 < 0:
        raise ValueError("n_b0 must be >= 0")
    vecs = canonicalize_hemisphere(dirs.to_cartesian())
    cols = np.concatenate([np.zeros((n_b0, 3)), vecs], axis=0)
    with open(bvec_path, "w", newline="\n") as f:
        for axis in range(3):
            f.write(" ".join(f"{v:.8f}" for v in cols[:, axis]) + "\n")
    with open(bval_path, "w", newline="\n") as f:
        values = [0.0] * n_b0 + [float(b_value)] * len(dirs)
        f.write(" ".join(f"{v:g}" for v in values) + "\n")


def plot_dirs_svg(sets, colors=("#d62728", "#1f77b4")) -> bytes:
    """Orthographic top view of up to two direction sets on the unit hemisphere.

    Deterministic byte-for-byte for identical inputs.
    """
    sets = list(sets)
    if not 1 <= len(sets) <= 2:
        raise ValueError("plot takes one or two direction sets")
    size = 360
    scale = size * 0.45
    cx = cy = size / 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{scale:.2f}" fill="none" '
        'stroke="#444444" stroke-width="1"/>',
    ]
    for dirs, color in zip(sets, colors):
        vecs = canonicalize_hemisphere(dirs.to_cartesian())
        for v in vecs:
            x = cx + scale * v[0]
            y = cy - scale * v[1]
            parts.append(f'<circle cx="{x:.4f}" cy="{y:.4f}" r="4" fill="{color}"/>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8")


def _write_manifest(primary_output, subcommand: str, values: dict) -> None:
    path = Path(str(primary_output) + ".manifest")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"tool: qsample {__version__}\n")
        f.write(f"subcommand: {subcommand}\n")
        for key in sorted(values):
            f.write(f"{key}: {values[key]}\n")


def _effective(args, skip=("func",)) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_design(args) -> int:
    cfg = DesignConfig(
        n=args.n, seed=args.seed, max_iters=args.max_iters, step_init=args.step_init, tol=args.tol
    )
    dirs = electrostatic_design(cfg)
    save_directions_csv(args.out, dirs)
    _write_manifest(args.out, "design", _effective(args))
    return 0


def _parse_preset(text: str):
    if "(" in text and text.endswith(")"):
        name, arg = text[:-1].split("(", 1)
        return name, float(arg)
    return text, None


def _cmd_phantom(args) -> int:
    preset, angle = _parse_preset(args.preset)
    if angle is None:
        angle = args.angle
    spec = PhantomSpec(
        preset,
        dims=tuple(args.dims),
        n_dirs=args.n_dirs,
        seed=args.seed,
        crossing_angle_deg=angle,
        orientation_deg=args.orientation,
        b_value=args.b_value,
        voxel_size=args.voxel_size,
        tube_radius=args.tube_radius,
    )
    vol, truth = generate_phantom(spec)
    if args.snr != math.inf:
        vol = add_rician_noise(vol, args.snr, args.noise_seed)
    out = Path(args.out)
    save_qvol(vol, out)
    save_truth(truth, out.with_suffix(".truth.txt"))
    save_scalar_qvol(
        truth.fiber_mask().astype(float), vol.voxel_size, out.with_suffix(".fibermask.qvol")
    )
    for b in truth.bundles:
        for tag, roi in (("a", b.roi_a), ("b", b.roi_b)):
            save_scalar_qvol(
                roi.astype(float), vol.voxel_size, out.with_suffix(f".roi-{b.name}-{tag}.qvol")
            )
    _write_manifest(out, "phantom", _effective(args))
    return 0


def _load_train_config(args) -> TrainConfig:
    values = {
        "af": args.af,
        "mode": args.mode,
        "recon": args.recon,
        "lr_recon": args.lr_recon,
        "lr_dirs": args.lr_dirs,
        "epochs": args.epochs,
        "batch_slices": args.batch,
        "seed": args.seed,
        "sh_order": args.sh_order,
        "lam": args.lam,
        "loss": args.loss,
    }
    if args.config:
        parsed = {}
        with open(args.config) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                parsed[key.strip()] = value.strip()
        casts = {
            "af": float, "mode": str, "recon": str, "lr_recon": float, "lr_dirs": float,
            "epochs": int, "batch_slices": int, "seed": int, "lam": float, "loss": str,
            "sh_order": lambda v: None if v == "auto" else int(v),
        }
        for key, value in parsed.items():
            if key not in casts:
                raise ValueError(f"unknown training config key {key!r}")
            values[key] = casts[key](value)
    if values["sh_order"] is not None and values["sh_order"] < 0:
        values["sh_order"] = None
    return TrainConfig(**values)


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    volumes = [load_qvol(p) for p in args.train]
    val_volumes = tuple(load_qvol(p) for p in (args.val or []))
    fixed = load_directions_csv(args.fixed_dirs) if args.fixed_dirs else None
    result = train_joint(volumes, cfg, val_volumes=val_volumes, fixed_dirs=fixed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_directions_csv(out / "dirs.csv", result.dirs)
    if result.params.mode == "linear":
        np.savez(out / "recon.npz", mode="linear", weights=result.params.weights, bias=result.params.bias)
    with open(out / "loss_history.csv", "w", newline="\n") as f:
        f.write("epoch,train_loss,val_loss\n")
        for i, tl in enumerate(result.train_history):
            vl = result.val_history[i] if i < len(result.val_history) else ""
            f.write(f"{i},{tl!r},{vl!r}\n" if vl != "" else f"{i},{tl!r},\n")
    with open(out / "dir_history.csv", "w", newline="\n") as f:
        f.write("epoch,index,theta,phi\n")
        for e, snapshot in enumerate(result.dir_history):
            for i, (t, p) in enumerate(snapshot):
                f.write(f"{e},{i},{float(t)!r},{float(p)!r}\n")
    _write_manifest(out / "run", "train", _effective(args))
    return 0


def _load_recon_params(path) -> ReconstructionParams:
    with np.load(path) as data:
        mode = str(data["mode"])
        if mode == "linear":
            return ReconstructionParams("linear", data["weights"], data["bias"])
        return ReconstructionParams(mode)


def _cmd_resample(args) -> int:
    vol = load_qvol(args.infile)
    dirs = load_directions_csv(args.dirs)
    order = None if args.sh_order < 0 else args.sh_order
    out_vol = subsample(vol, dirs, order=order, lam=args.lam)
    if args.recon != "identity":
        target = load_directions_csv(args.target_dirs) if args.target_dirs else vol.dirs
        params = (
            _load_recon_params(args.recon_params)
            if args.recon == "linear"
            else ReconstructionParams(args.recon)
        )
        if args.recon == "linear" and params.mode != "linear":
            raise ValueError("recon-params file does not hold linear parameters")
        out_vol = reconstruct(out_vol, params, target, order=order, lam=args.lam)
    save_qvol(out_vol, args.out)
    _write_manifest(args.out, "resample", _effective(args))
    return 0


def _cmd_track(args) -> int:
    vol = load_qvol(args.infile)
    order = None if args.sh_order < 0 else args.sh_order
    field = csa_odf(vol, order=order, lam=args.lam, threads=args.threads)
    peaks = peak_field(
        field,
        rel_threshold=args.rel_peak,
        min_sep_angle_deg=args.min_sep,
        threads=args.threads,
    )
    stop_map = gfa_map(field)
    if args.seed_mask:
        seeds = np.argwhere(load_scalar_qvol(args.seed_mask) > 0.5).astype(float)
    else:
        seeds = np.argwhere(stop_map >= args.gfa_thresh).astype(float)
    params = TrackParams(
        step_size=args.step,
        angle_thresh_deg=args.angle_thresh,
        gfa_thresh=args.gfa_thresh,
        max_len=args.max_len,
    )
    tractogram = track_streamlines(peaks, stop_map, seeds, params, threads=args.threads)
    save_qtrk(tractogram, args.out)
    _write_manifest(args.out, "track", _effective(args))
    return 0


def _cmd_score_psnr(args) -> int:
    recon_vol = load_qvol(args.recon)
    ref = load_qvol(args.ref)
    value = psnr(recon_vol, ref, brain_mask(ref))
    mapping = {"psnr_db": value}
    write_report_text(args.out + ".txt", mapping, header={"tool": f"qsample {__version__}"})
    write_report_csv(args.out + ".csv", mapping)
    print(f"psnr_db: {value}" if not math.isinf(value) else "psnr_db: inf")
    _write_manifest(args.out + ".txt", "score-psnr", _effective(args))
    return 0


def _cmd_score_bd(args) -> int:
    test = load_qtrk(args.test)
    ref = load_qtrk(args.ref)
    header = {
        "tool": f"qsample {__version__}",
        "bd_variant": BD_VARIANT,
        "bins": args.bins,
        "cap": BD_CAP,
    }
    if args.truth:
        truth = load_truth(args.truth)
        test_l, _ = assign_bundles(test, truth)
        ref_l, _ = assign_bundles(ref, truth)
        mapping = {}
        values = []
        for b in truth.bundles:
            try:
                bd = bhattacharyya_distance(
                    bundle_points(test_l, b.name), bundle_points(ref_l, b.name), bins=args.bins
                )
            except ValueError:
                bd = BD_CAP  # a bundle missing from either tractogram scores the cap
            mapping[f"bd_{b.name}"] = bd
            values.append(bd)
        mapping["bd_mean"] = sum(values) / len(values)
    else:
        mapping = {"bd_mean": bhattacharyya_distance(test, ref, bins=args.bins)}
    write_report_text(args.out + ".txt", mapping, header=header)
    write_report_csv(args.out + ".csv", mapping)
    print(f"bd_mean: {mapping['bd_mean']}")
    _write_manifest(args.out + ".txt", "score-bd", _effective(args))
    return 0


def _cmd_score_connections(args) -> int:
    tractogram = load_qtrk(args.tract)
    truth = load_truth(args.truth)
    labeled, _ = assign_bundles(tractogram, truth)
    report = connection_scores(labeled, truth)
    mapping = report.as_mapping()
    write_report_text(args.out + ".txt", mapping, header={"tool": f"qsample {__version__}"})
    write_report_csv(args.out + ".csv", mapping)
    print(" ".join(f"{k}={v}" for k, v in mapping.items()))
    _write_manifest(args.out + ".txt", "score-connections", _effective(args))
    return 0


def _cmd_export_bvec(args) -> int:
    dirs = load_directions_csv(args.dirs)
    export_bvec(dirs, args.b_value, args.n_b0, args.out_bvec, args.out_bval)
    _write_manifest(args.out_bvec, "export-bvec", _effective(args))
    return 0


def _cmd_plot_dirs(args) -> int:
    sets = [load_directions_csv(args.dirs)]
    if args.dirs2:
        sets.append(load_directions_csv(args.dirs2))
    colors = tuple(args.colors.split(",")) if args.colors else ("#d62728", "#1f77b4")
    svg = plot_dirs_svg(sets, colors)
    with open(args.out, "wb") as f:
        f.write(svg)
    _write_manifest(args.out, "plot-dirs", _effective(args))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="qsample", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qsample {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("design", help="electrostatic-repulsion direction design")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--step-init", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_design)

    p = sub.add_parser("phantom", help="generate a synthetic multi-tensor phantom")
    p.add_argument("--preset", required=True, help="straight, crossing, crossing(DEG), or arc")
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--n-dirs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--angle", type=float, default=90.0)
    p.add_argument("--orientation", type=float, default=0.0)
    p.add_argument("--b-value", type=float, default=1000.0)
    p.add_argument("--voxel-size", type=float, default=2.0)
    p.add_argument("--tube-radius", type=float, default=None)
    p.add_argument("--snr", type=float, default=math.inf)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output QVOL header path")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="jointly train directions and reconstruction")
    p.add_argument("--train", nargs="+", required=True, help="training QVOL volumes")
    p.add_argument("--val", nargs="*", default=[], help="validation QVOL volumes")
    p.add_argument("--config", default=None, help="key=value training config file")
    p.add_argument("--af", type=float, default=1.0)
    p.add_argument("--mode", choices=["fixed", "learned"], default="learned")
    p.add_argument("--recon", choices=["identity", "sh-interp", "linear"], default="linear")
    p.add_argument("--lr-recon", type=float, default=0.001)
    p.add_argument("--lr-dirs", type=float, default=0.0001)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=1, help="axial slices per step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sh-order", type=int, default=-1, help="-1 selects automatically")
    p.add_argument("--lam", type=float, default=0.006)
    p.add_argument("--loss", choices=["l2", "mse"], default="l2")
    p.add_argument("--fixed-dirs", default=None, help="CSV of directions for fixed mode")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("resample", help="subsample (and optionally reconstruct) a volume")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--dirs", required=True, help="CSV of target acquisition directions")
    p.add_argument("--recon", choices=["identity", "sh-interp", "linear"], default="identity")
    p.add_argument("--recon-params", default=None, help="recon.npz from a training run")
    p.add_argument("--target-dirs", default=None, help="CSV of reconstruction directions")
    p.add_argument("--sh-order", type=int, default=-1)
    p.add_argument("--lam", type=float, default=0.006)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_resample)

    p = sub.add_parser("track", help="ODF peaks + deterministic streamline tracking")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--seed-mask", default=None, help="D=1 QVOL; default: GFA >= threshold")
    p.add_argument("--sh-order", type=int, default=-1)
    p.add_argument("--lam", type=float, default=0.006)
    p.add_argument("--rel-peak", type=float, default=0.5)
    p.add_argument("--min-sep", type=float, default=25.0)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--angle-thresh", type=float, default=60.0)
    p.add_argument("--gfa-thresh", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("score-psnr", help="PSNR between two volumes over the brain mask")
    p.add_argument("--recon", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="report prefix (.txt/.csv)")
    p.set_defaults(func=_cmd_score_psnr)

    p = sub.add_parser("score-bd", help="Bhattacharyya distance between tractograms")
    p.add_argument("--test", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--truth", default=None, help="QTRUTH file for per-bundle scoring")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out", required=True, help="report prefix (.txt/.csv)")
    p.set_defaults(func=_cmd_score_bd)

    p = sub.add_parser("score-connections", help="tractometer-style connection metrics")
    p.add_argument("--tract", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score_connections)

    p = sub.add_parser("export-bvec", help="write FSL bvec/bval gradient tables")
    p.add_argument("--dirs", required=True)
    p.add_argument("--b-value", type=float, default=1000.0)
    p.add_argument("--n-b0", type=int, default=1)
    p.add_argument("--out-bvec", required=True)
    p.add_argument("--out-bval", required=True)
    p.set_defaults(func=_cmd_export_bvec)

    p = sub.add_parser("plot-dirs", help="SVG hemisphere plot of direction sets")
    p.add_argument("--dirs", required=True)
    p.add_argument("--dirs2", default=None)
    p.add_argument("--colors", default=None, help="comma-separated fill colors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot_dirs)

    for sp in sub.choices.values():
        sp.add_argument("--threads", type=int, default=default_threads())
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
