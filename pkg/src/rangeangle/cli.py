"""Command-line front end: ``rangeangle <subcommand> ...``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on
numerical failures (non-convergence, singular systems, aborted parking runs).
Output files go to the directory named by ``RANGEANGLE_OUTPUT_DIR`` (the
current directory by default) unless an explicit path is given.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import crb as crb_mod
from . import experiments, mle, spectral
from .files import ConfigError, RunConfig, parse_range, read_config, read_measurement, write_measurement
from .radar import MeasurementMatrix, Target, synthesize_measurement

log = logging.getLogger("rangeangle")

OUTPUT_DIR_ENV = "RANGEANGLE_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def output_path(name: Optional[str], default: str) -> Path:
    """Explicit paths are used as given; defaults land in the output directory."""
    if name:
        path = Path(name)
    else:
        path = Path(os.environ.get(OUTPUT_DIR_ENV, ".")) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_rows(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _config(args) -> RunConfig:
    cfg = read_config(args.config, args.set)
    log.info("configuration: %s, overrides %s", args.config or "built-in defaults",
             list(args.set) or "none")
    return cfg


def _measurement(args, cfg: RunConfig) -> MeasurementMatrix:
    if getattr(args, "input", None):
        return read_measurement(args.input)
    if not cfg.targets:
        raise UsageError("no targets: give --input or [target.*] sections in --config")
    seed = args.seed if args.seed is not None else cfg.seed
    return synthesize_measurement(cfg.radar, cfg.targets, cfg.sigma, seed=seed)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    z = _measurement(args, cfg)
    hdr, binf = write_measurement(z, output_path(args.output, "measurement"))
    print(f"wrote {hdr} and {binf}: {z.config.N}x{z.config.M} samples, "
          f"{len(cfg.targets)} targets, sigma={z.sigma:g}")
    return EXIT_OK


def _spectrum_rows(z, algo, K, ests, step):
    config = z.config
    if algo == "fft2d":
        objective = lambda xs, ys: np.abs(spectral.dtft_grid(z.data, xs, ys))
    elif algo == "music2d":
        objective = spectral.MusicSpectrum(z, K)
    elif algo == "lse":
        objective = spectral.lse_objective(z)
    else:
        raise UsageError("--spectrum is available for fft2d, music2d and lse")
    bins = np.array([spectral.estimate_to_bins(config, e) for e in ests])
    xs = np.arange(math.floor(bins[:, 0].min()) - 2, math.ceil(bins[:, 0].max()) + 2 + step / 2,
                   step)
    ys = np.arange(math.floor(bins[:, 1].min()) - 2, math.ceil(bins[:, 1].max()) + 2 + step / 2,
                   step)
    vals = objective(xs, ys)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            yield (x, y, vals[i, j])


def cmd_estimate(args) -> int:
    cfg = _config(args)
    z = _measurement(args, cfg)
    K = args.K or len(cfg.targets)
    if K < 1:
        raise UsageError("number of targets unknown: pass -K")
    status = EXIT_OK
    if args.algo == "mle":
        res = mle.estimate(z, K, cfg.options.mle_settings, keep_trace=args.trace is not None)
        ests = res.estimates
        if args.trace is not None:
            res.write_trace(output_path(args.trace, "mle_trace.csv"))
        note = f"{res.iterations} iterations, converged={res.converged}"
        if not res.converged:
            status = EXIT_NUMERIC
    else:
        ests = experiments.run_estimator(args.algo, z, K, cfg.options)
        note = f"{cfg.options.range_oversample}x{cfg.options.angle_oversample} grid"
    config = z.config
    rows = []
    for k, e in enumerate(ests):
        x, y = spectral.estimate_to_bins(config, e)
        rows.append((args.algo, k, e.r, math.degrees(e.theta), e.power, x, y, e.a, e.psi))
    path = output_path(args.output, f"estimate_{args.algo}.csv")
    write_rows(path, ("algorithm", "k", "r_m", "theta_deg", "power", "range_bin", "angle_bin",
                      "a", "psi"), rows)
    if args.spectrum is not None:
        spath = output_path(args.spectrum, f"spectrum_{args.algo}.csv")
        write_rows(spath, ("range_bin", "angle_bin", "value"),
                   _spectrum_rows(z, args.algo, K, ests, args.spectrum_step))
    if args.slice_range is not None:
        thetas = np.radians(np.arange(-90.0, 90.0 + 1e-9, args.slice_step_deg))[1:-1]
        vals = spectral.lse_slice(z, args.slice_range, thetas)
        write_rows(output_path(args.slice_output, "lse_slice.csv"), ("theta_deg", "value"),
                   zip(np.degrees(thetas), vals))
    summary = ", ".join(f"({e.r:.6f} m, {math.degrees(e.theta):.4f} deg)" for e in ests)
    print(f"{args.algo}: {summary} [{note}] -> {path}")
    return status


def cmd_bias(args) -> int:
    cfg = _config(args)
    config = cfg.radar
    theta = math.radians(args.theta_deg)
    try:
        range_bias, angle_bias = spectral.bias_prediction(config, theta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [("predicted", args.range, args.theta_deg, range_bias, math.degrees(angle_bias))]
    line = f"predicted bias: {range_bias:.4f} m, {math.degrees(angle_bias):.3f} deg"
    if args.measure:
        z = synthesize_measurement(config, [Target(1.0, 0.0, args.range, theta)])
        grid = spectral.GridSpec(args.oversample, args.oversample)
        est = spectral.fft2d_estimate(z, 1, grid).estimates[0]
        mr, mt = est.r - args.range, math.degrees(est.theta - theta)
        rows.append(("measured_fft2d", args.range, args.theta_deg, mr, mt))
        line += (f"; 2D-FFT at {args.oversample}x: {est.r:.5f} m, "
                 f"{math.degrees(est.theta):.3f} deg (bias {mr:.4f} m, {mt:.3f} deg)")
    path = output_path(args.output, "bias.csv")
    write_rows(path, ("source", "r_m", "theta_deg", "range_bias_m", "angle_bias_deg"), rows)
    print(line)
    return EXIT_OK


def _snr_grid(args, cfg) -> List[float]:
    return parse_range(args.snr_db) if args.snr_db else list(cfg.sweep.snr_db)


def cmd_crb(args) -> int:
    cfg = _config(args)
    target = cfg.targets[0] if cfg.targets else Target(1.0, 0.0, 5.0, math.radians(15.0))
    rows = crb_mod.crb_vs_snr(cfg.radar, target, _snr_grid(args, cfg))
    path = output_path(args.output, "crb.csv")
    crb_mod.write_crb_csv(path, rows)
    first, last = rows[0], rows[-1]
    print(f"CRB at {first['snr_db']:g} dB: {first['sigma_r_m']:.3e} m, "
          f"{first['sigma_theta_deg']:.3e} deg; at {last['snr_db']:g} dB: "
          f"{last['sigma_r_m']:.3e} m, {last['sigma_theta_deg']:.3e} deg -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not cfg.targets:
        raise UsageError("sweep needs [target.*] sections in --config")
    sw = cfg.sweep
    scenario = experiments.Scenario(
        cfg.radar, cfg.targets, _snr_grid(args, cfg),
        trials=args.trials or sw.trials,
        estimators=tuple(args.estimators.split(",")) if args.estimators else sw.estimators,
        seed_base=args.seed if args.seed is not None else sw.seed_base,
        options=cfg.options,
    )
    table = experiments.run_rmse_sweep(scenario, workers=args.workers or sw.workers)
    path = output_path(args.output, "rmse.csv")
    table.to_csv(path)
    print(f"{len(table.rows)} rows ({scenario.trials} trials per SNR point) -> {path}")
    return EXIT_OK


def _scene(args):
    from .scene import load_scene

    scene = load_scene(args.scene)
    if args.snr_db_scene is not None:
        from dataclasses import replace
        scene = replace(scene, snr_db=args.snr_db_scene)
    return scene


def cmd_pointcloud(args) -> int:
    scene = _scene(args)
    names = args.estimators.split(",") if args.estimators else list(experiments.ESTIMATORS)
    pose = None
    if args.pose:
        x, y, h = (float(v) for v in args.pose.split(","))
        pose = (x, y, math.radians(h))
    summaries = [experiments.run_point_cloud(scene, n, frames=args.frames, seed=args.seed or 0,
                                             pose=pose) for n in names]
    path = output_path(args.output, "pointcloud.csv")
    experiments.write_point_cloud_csv(path, summaries)
    if args.points is not None:
        rows = []
        for s in summaries:
            for f, est in enumerate(s.clouds):
                for i, p, t, radar in zip(est.indices, est.points_vehicle,
                                          est.true_points_vehicle, est.radar):
                    rows.append((s.estimator, f, i, radar, p[0], p[1], t[0], t[1]))
        write_rows(output_path(args.points, "pointcloud_points.csv"),
                   ("estimator", "frame", "scatterer", "radar", "x_V", "y_V", "true_x_V",
                    "true_y_V"), rows)
    for s in summaries:
        print(f"{s.estimator}: range {s.rmse_range:.2e} m, angle {s.rmse_angle_deg:.3f} deg, "
              f"position {s.rmse_position:.2e} m over {s.detected}/{s.total} scatterers")
    print(f"-> {path}")
    return EXIT_OK


def cmd_park(args) -> int:
    from .slam import run_parking

    scene = _scene(args)
    res = run_parking(scene, args.algo, seed=args.seed or 0, keep_clouds=args.clouds is not None)
    path = output_path(args.output, f"trajectory_{args.algo}.csv")
    res.to_csv(path)
    if args.reference is not None:
        write_rows(output_path(args.reference, "reference_path.csv"), ("x", "y", "heading_deg"),
                   ((w[0], w[1], math.degrees(w[2])) for w in scene.path.waypoints))
    if args.clouds is not None:
        rows = []
        for f, est in enumerate(res.clouds):
            for i, p in zip(est.indices, est.points_vehicle):
                rows.append((f, i, p[0], p[1]))
        write_rows(output_path(args.clouds, f"clouds_{args.algo}.csv"),
                   ("frame", "scatterer", "x_V", "y_V"), rows)
    print(f"{args.algo}: {res.frames} frames, final position error "
          f"{res.final_position_error:.4g} m, heading error {res.final_heading_error_deg:.3g} deg, "
          f"goal {'reached' if res.reached_goal else 'NOT reached'} -> {path}")
    return EXIT_OK if res.reached_goal else EXIT_NUMERIC


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rangeangle", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="run configuration (INI)")
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help="override a configuration entry (repeatable)")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("-o", "--output", help="output file (default: in $%s)" % OUTPUT_DIR_ENV)

    sp = sub.add_parser("synth", help="synthesize a measurement and export it")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("estimate", help="estimate ranges and angles")
    common(sp)
    sp.add_argument("--input", type=Path, help="measurement header written by synth")
    sp.add_argument("--algo", choices=experiments.ESTIMATORS, required=True)
    sp.add_argument("-K", type=int, help="number of targets (default: targets in the config)")
    sp.add_argument("--spectrum", nargs="?", const="", default=None,
                    help="also write the objective around the estimates")
    sp.add_argument("--spectrum-step", type=float, default=1.0 / 16, help="grid step in bins")
    sp.add_argument("--slice-range", type=float, help="write the LSE angle cut at this range (m)")
    sp.add_argument("--slice-step-deg", type=float, default=0.01)
    sp.add_argument("--slice-output")
    sp.add_argument("--trace", nargs="?", const="", default=None,
                    help="MLE only: also write the per-iteration state")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("bias", help="predicted (and measured) 2D-FFT bias")
    common(sp)
    sp.add_argument("--theta-deg", type=float, required=True)
    sp.add_argument("--range", type=float, default=5.0, help="target range (m)")
    sp.add_argument("--measure", action="store_true", help="also run the 2D-FFT estimator")
    sp.add_argument("--oversample", type=int, default=2048)
    sp.set_defaults(func=cmd_bias)

    sp = sub.add_parser("crb", help="Cramer-Rao bounds versus SNR")
    common(sp)
    sp.add_argument("--snr-db", help="start:step:stop or a list")
    sp.set_defaults(func=cmd_crb)

    sp = sub.add_parser("sweep", help="Monte-Carlo RMSE versus SNR")
    common(sp)
    sp.add_argument("--snr-db", help="start:step:stop or a list")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--estimators", help="comma-separated subset of " + ",".join(experiments.ESTIMATORS))
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_sweep)

    for name, helptext in (("pointcloud", "scatterer position RMSE at one pose"),
                           ("park", "closed-loop back-in parking run")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, config=False)
        sp.add_argument("--scene", type=Path, help="scene file (default: packaged scene)")
        sp.add_argument("--snr-db", dest="snr_db_scene", type=float,
                        help="per-scatterer SNR (dB)")
        if name == "pointcloud":
            sp.add_argument("--estimators", help="comma-separated subset")
            sp.add_argument("--frames", type=int, default=1)
            sp.add_argument("--pose", help="x,y,heading_deg (default: the scene's snapshot pose)")
            sp.add_argument("--points", nargs="?", const="", default=None,
                            help="also write every scatterer estimate")
            sp.set_defaults(func=cmd_pointcloud)
        else:
            sp.add_argument("--algo", choices=experiments.ESTIMATORS + ("exact",), required=True)
            sp.add_argument("--reference", nargs="?", const="", default=None,
                            help="also write the reference path")
            sp.add_argument("--clouds", nargs="?", const="", default=None,
                            help="also write every frame's point cloud")
            sp.set_defaults(func=cmd_park)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (mle.MleError, spectral.EstimatorError, crb_mod.SingularFisherError,
            np.linalg.LinAlgError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
