"""The standard desk-scale benchmark: learned vs fixed directions.

Builds a set of crossing-fiber phantom volumes that share one acquisition
(N directions, one b-value) but differ in fiber orientation and noise,
trains the learned and fixed pipelines at several acceleration factors,
and scores them in signal space (PSNR) and tractography space
(per-bundle Bhattacharyya distance).  Used by the acceptance suite and by
scripts/run_orderings.py; every step is deterministic given the config.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import DesignConfig, electrostatic_design
from .phantom import PhantomSpec, add_rician_noise, generate_phantom, phantom_truth, synthesize_signals
from .pipeline import (
    ReconstructionParams,
    TrainConfig,
    TrainResult,
    reconstruct,
    subsample,
    train_joint,
)
from .score import BD_CAP, assign_bundles, bhattacharyya_distance, bundle_points, connection_scores, psnr
from .sphere import DirectionSet, save_directions_csv
from .tract import TrackParams, Tractogram, csa_odf, default_sh_order, gfa_map, peak_field, track_streamlines
from .volume import DwiVolume, brain_mask

__all__ = [
    "BenchmarkConfig",
    "BenchmarkData",
    "SignalArm",
    "build_benchmark_data",
    "run_signal_benchmark",
    "run_tract_benchmark",
    "write_signal_reports",
]


@dataclass(frozen=True)
class BenchmarkConfig:
    """The standard phantom-set benchmark configuration."""

    dims: tuple[int, int, int] = (32, 32, 32)
    n_dirs: int = 60
    crossing_angle_deg: float = 60.0
    snr: float = 20.0
    n_train: int = 8
    n_val: int = 2
    tube_radius: float = 4.0
    design_seed: int = 0
    noise_seed: int = 400
    train_seed: int = 7
    epochs: int = 60
    b_value: float = 1000.0

    @property
    def orientations(self) -> list[float]:
        # one fiber orientation per volume, evenly spread over the half-turn
        # (orientation space wraps at 180 degrees); training volumes first,
        # then validation volumes interleaved inside the training coverage
        total = self.n_train + self.n_val
        grid = [180.0 * k / total for k in range(total)]
        step = max(1, total // (self.n_val + 1))
        val_slots = [step * (j + 1) for j in range(self.n_val)]
        train = [g for k, g in enumerate(grid) if k not in val_slots]
        val = [grid[k] for k in val_slots]
        return train + val


@dataclass
class BenchmarkData:
    """Shared acquisition plus the per-volume phantoms of the benchmark."""

    config: BenchmarkConfig
    dirs: DirectionSet
    train_volumes: list[DwiVolume]
    val_volumes: list[DwiVolume]
    val_truths: list
    val_references: list[DwiVolume]  # noiseless analytic signals at the acquisition dirs


def build_benchmark_data(cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkData:
    """Generate the standard volumes: one orientation and noise draw each."""
    dirs = electrostatic_design(DesignConfig(n=cfg.n_dirs, seed=cfg.design_seed))
    train_volumes: list[DwiVolume] = []
    val_volumes: list[DwiVolume] = []
    val_truths = []
    val_references = []
    for k, orientation in enumerate(cfg.orientations):
        spec = PhantomSpec(
            "crossing",
            dims=cfg.dims,
            n_dirs=cfg.n_dirs,
            seed=cfg.design_seed,
            crossing_angle_deg=cfg.crossing_angle_deg,
            orientation_deg=orientation,
            tube_radius=cfg.tube_radius,
            b_value=cfg.b_value,
        )
        truth = phantom_truth(spec)
        clean = DwiVolume(
            synthesize_signals(truth, dirs, cfg.b_value),
            dirs,
            cfg.b_value,
            (spec.voxel_size,) * 3,
            np.ones(cfg.dims),
        )
        noisy = add_rician_noise(clean, cfg.snr, cfg.noise_seed + k)
        if k < cfg.n_train:
            train_volumes.append(noisy)
        else:
            val_volumes.append(noisy)
            val_truths.append(truth)
            val_references.append(clean)
    return BenchmarkData(cfg, dirs, train_volumes, val_volumes, val_truths, val_references)


@dataclass
class SignalArm:
    """One trained pipeline plus its validation PSNR."""

    name: str
    dirs: DirectionSet
    params: ReconstructionParams
    psnr_db: float
    result: TrainResult | None = None


def _mean_validation_psnr(data: BenchmarkData, dirs, params) -> float:
    values = []
    for noisy, reference in zip(data.val_volumes, data.val_references):
        xt = subsample(noisy, dirs)
        xhat = reconstruct(xt, params, data.dirs)
        values.append(psnr(xhat, reference, brain_mask(reference)))
    return float(np.mean(values))


def run_signal_benchmark(data: BenchmarkData, af: float) -> dict[str, SignalArm]:
    """Train the learned and fixed arms at one acceleration factor.

    Validation PSNR is measured against the noiseless analytic reference
    at the full direction set.  The identity arm is the raw acquired
    validation volume passed through the identity operator (no
    sub-sampling, no reconstruction): the do-nothing floor.
    """
    cfg = data.config
    n = max(1, round(cfg.n_dirs / af))
    fixed_dirs = electrostatic_design(DesignConfig(n=n, seed=cfg.design_seed))
    arms: dict[str, SignalArm] = {}

    for mode in ("learned", "fixed"):
        train_cfg = TrainConfig(
            af=af, mode=mode, recon="linear", epochs=cfg.epochs, seed=cfg.train_seed
        )
        result = train_joint(
            data.train_volumes,
            train_cfg,
            val_volumes=tuple(data.val_volumes),
            fixed_dirs=fixed_dirs if mode == "fixed" else None,
        )
        arms[mode] = SignalArm(
            mode, result.dirs, result.params, _mean_validation_psnr(data, result.dirs, result.params), result
        )

    identity = ReconstructionParams("identity")
    raw_psnr = float(
        np.mean(
            [
                psnr(reconstruct(noisy, identity, noisy.dirs), reference, brain_mask(reference))
                for noisy, reference in zip(data.val_volumes, data.val_references)
            ]
        )
    )
    arms["identity"] = SignalArm("identity", data.dirs, identity, raw_psnr)
    return arms


def _tractogram_for(volume: DwiVolume, truth) -> Tractogram:
    order = default_sh_order(len(volume.dirs))
    field = csa_odf(volume, order=order)
    peaks = peak_field(field)
    stop = gfa_map(field)
    seeds = np.argwhere(truth.fiber_mask()).astype(float)
    return track_streamlines(peaks, stop, seeds, TrackParams())


def _mean_bundle_bd(test: Tractogram, reference: Tractogram, truth) -> float:
    test_labeled, _ = assign_bundles(test, truth)
    ref_labeled, _ = assign_bundles(reference, truth)
    values = []
    for bundle in truth.bundles:
        try:
            values.append(
                bhattacharyya_distance(
                    bundle_points(test_labeled, bundle.name), bundle_points(ref_labeled, bundle.name)
                )
            )
        except ValueError:
            values.append(BD_CAP)  # bundle missing from one tractogram
    return float(np.mean(values))


def run_tract_benchmark(data: BenchmarkData, af: float, learned_dirs: DirectionSet) -> dict[str, float]:
    """Bhattacharyya comparison of no-reconstruction tractograms at one AF.

    Validation volumes are sub-sampled onto the learned and the fixed
    (electrostatic) directions, tracked without any reconstruction, and
    each bundle's point cloud is compared against the tractogram of the
    fully-sampled volume.  Returns the mean BD per arm (lower is better).
    """
    cfg = data.config
    n = max(1, round(cfg.n_dirs / af))
    fixed_dirs = electrostatic_design(DesignConfig(n=n, seed=cfg.design_seed))
    totals = {"learned": [], "fixed": []}
    for noisy, truth in zip(data.val_volumes, data.val_truths):
        reference_tract = _tractogram_for(noisy, truth)
        for name, dirs in (("learned", learned_dirs), ("fixed", fixed_dirs)):
            sub = subsample(noisy, dirs)
            totals[name].append(_mean_bundle_bd(_tractogram_for(sub, truth), reference_tract, truth))
    return {name: float(np.mean(values)) for name, values in totals.items()}


def write_signal_reports(out_dir, af: float, arms: dict[str, SignalArm]) -> None:
    """Persist one AF's artifacts: PSNR report CSV, histories, direction CSVs."""
    from .score import write_report_csv, write_report_text

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"af{af:g}"
    mapping = {
        "af": af,
        "psnr_learned_db": arms["learned"].psnr_db,
        "psnr_fixed_db": arms["fixed"].psnr_db,
        "psnr_identity_db": arms["identity"].psnr_db,
    }
    write_report_csv(out_dir / f"psnr_{tag}.csv", mapping)
    write_report_text(out_dir / f"psnr_{tag}.txt", mapping)
    for mode in ("learned", "fixed"):
        arm = arms[mode]
        save_directions_csv(out_dir / f"dirs_{mode}_{tag}.csv", arm.dirs)
        if arm.result is not None:
            with open(out_dir / f"loss_history_{mode}_{tag}.csv", "w", newline="\n") as f:
                f.write("epoch,train_loss,val_loss\n")
                for i, tl in enumerate(arm.result.train_history):
                    vl = arm.result.val_history[i]
                    f.write(f"{i},{tl!r},{vl!r}\n")
            with open(out_dir / f"dir_history_{mode}_{tag}.csv", "w", newline="\n") as f:
                f.write("epoch,index,theta,phi\n")
                for e, snap in enumerate(arm.result.dir_history):
                    for i, (t, p) in enumerate(snap):
                        f.write(f"{e},{i},{float(t)!r},{float(p)!r}\n")
