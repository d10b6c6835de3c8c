"""Command-line front end: `moe-lab fit | sweep | check | adversarial`.

Exit codes: 0 success, 2 configuration or input error, 3 divergence,
4 unsupported capability, 5 infeasible adversarial construction.
"""

import argparse
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd

from moelab.adversarial import (
    construct_gn_polynomial,
    construct_gn_ridge,
    find_ridge_root,
    ratio_curve,
)
from moelab.config import RunConfig, load_run_config
from moelab.estimate import fit_sgd, gauge_fix, init_from_truth
from moelab.exceptions import (
    CapabilityError,
    ConfigError,
    ConstructionError,
    DivergenceError,
    DomainError,
    InputError,
    SweepError,
)
from moelab.harness import derive_seed, emit_report, generate_dataset, l2_rate_sweep, run_sweep
from moelab.identify import (
    Mode,
    check_family,
    classify_regime,
    dependency_equation,
    detect_pde_interaction,
)
from moelab.losses import l2_distance, voronoi_loss
from moelab.model import ExpertSpec, Family
from moelab.utils import plot_ratio_curve, write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CAPABILITY = 4
EXIT_CONSTRUCTION = 5


def _output_dir(cfg: RunConfig) -> Path:
    directory = Path(cfg.out)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def cmd_fit(cfg: RunConfig) -> int:
    """Generates one data set, fits it and writes the fitted measure."""
    truth = cfg.truth_measure()
    fit_cfg = cfg.fit_config()
    data = generate_dataset(truth, cfg.n, cfg.noise_var,
                            seed=derive_seed(cfg.seed, cfg.n, 0, "data"))
    init = init_from_truth(truth, fit_cfg.k, fit_cfg.init_spread,
                           derive_seed(cfg.seed, cfg.n, 0, "init"))
    fit_cfg.batch_size = min(fit_cfg.batch_size, cfg.n)
    result = fit_sgd(data, init, fit_cfg, reference=truth)
    G_hat = gauge_fix(result.G_hat, truth, fit_cfg.gauge)

    loss = voronoi_loss(G_hat, truth, cfg.loss, cfg.r)
    distance = l2_distance(G_hat, truth)
    logger.info("Fitted %d atoms: objective %.6g, %s %.6g, L2 %.6g",
                G_hat.k, result.final_objective, cfg.loss, loss.total, distance)

    out = _output_dir(cfg)
    write_json(out / "measure.json", G_hat.to_dict())
    polished = result.objective_trace.size - fit_cfg.epochs
    write_csv(out / "trace.csv", pd.DataFrame({
        "epoch": np.r_[np.arange(1, fit_cfg.epochs + 1), np.full(polished, fit_cfg.epochs)],
        "stage": ["sgd"] * fit_cfg.epochs + ["polish"] * polished,
        "objective": [repr(float(value)) for value in result.objective_trace],
    }))
    write_json(out / "summary.json", {
        "config": cfg.to_dict(),
        "final_objective": result.final_objective,
        "iterations": result.iterations,
        "loss": {"name": cfg.loss, "r": cfg.r, "total": loss.total,
                 "weight_term": loss.weight_term,
                 "per_cell": [float(value) for value in loss.per_cell_terms]},
        "l2_distance": distance,
    })
    print(f"{cfg.loss} = {loss.total:.6g}, L2 = {distance:.6g}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Runs the rate sweep and writes its report."""
    sweep_cfg = cfg.sweep_config()
    report = l2_rate_sweep(sweep_cfg) if cfg.metric == "l2" else run_sweep(sweep_cfg)
    paths = emit_report(report, _output_dir(cfg), extra={"run_config": cfg.to_dict()})
    if report.slope_defined:
        print(f"slope = {report.slope:.4f} (r^2 = {report.r_squared:.4f})")
    else:
        print("slope undefined")
    logger.info("Report written to %s", paths["json"].parent)
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    """Checks strong identifiability or strong independence numerically."""
    mode = Mode(cfg.mode)
    if mode is Mode.INDEPENDENCE:
        activation, degree = cfg.check_activation()
        spec = ExpertSpec.ridge(activation, degree)
    else:
        spec = cfg.expert()
    if spec.family is Family.NORMALIZED_RIDGE and spec.norm_eps == 0:
        logger.warning("x/|x| only takes the values -1 and 1 in d = 1; "
                       "set norm_eps > 0 for the layer-normalized variant.")

    result = check_family(spec, mode, k=cfg.check_k, seed=cfg.seed,
                          trials=cfg.trials, threshold=cfg.threshold)
    equation = dependency_equation(result)
    report = {"family": spec.label, "mode": mode.value, "k": cfg.check_k,
              **result.to_dict()}

    if mode is Mode.IDENTIFIABILITY:
        truth = cfg.truth_measure()
        report["regime"] = classify_regime(truth)
        report["interactions"] = []
        for j, atom in enumerate(truth.atoms):
            pde = detect_pde_interaction(spec, atom)
            report["interactions"].append({"atom": j + 1, "present": pde.present,
                                           "kind": pde.kind,
                                           "description": pde.description,
                                           "residual": pde.residual})

    out = _output_dir(cfg)
    write_json(out / "verdict.json", report)
    write_json(out / "summary.json", {"config": cfg.to_dict(), "verdict": report})

    print(f"{spec.label} ({mode.value}): "
          f"{'independent' if result.independent else 'dependent'}")
    print(f"min singular ratio = {result.min_singular_ratio:.3e}")
    if equation:
        print(f"dependency: {equation}")
    for interaction in report.get("interactions", []):
        if interaction["present"]:
            print(f"atom {interaction['atom']}: {interaction['description']}")
    return EXIT_OK


def cmd_adversarial(cfg: RunConfig) -> int:
    """Traces the ratio ||f_Gn - f_G*|| / D3,r along the grid of n."""
    truth = cfg.truth_measure()
    expert = truth.expert
    extra = {}
    if expert.family is Family.LINEAR:
        constructor = construct_gn_polynomial
    elif expert.family is Family.RIDGE:
        if int(cfg.r) != cfg.r:
            raise ConfigError(f"r must be an integer for ridge experts, got {cfg.r}.",
                              key="r")
        constructor = partial(construct_gn_ridge, activation=expert.link[0])
        logger.warning("Shift coefficients use n^alpha; the closed form with n^r "
                       "differs for alpha != r.")
        activation, degree = expert.link
        extra["roots"] = [find_ridge_root(activation, degree, float(truth.b[0]),
                                          int(cfg.r), n)[0] for n in cfg.n_grid]
        extra["offsets"] = [c / n for c, n in zip(extra["roots"], cfg.n_grid)]
        extra["coefficient_convention"] = "n^alpha"
    else:
        raise InputError(
            f"No adversarial construction for {expert.label}; use linear or ridge experts."
        )

    curve = ratio_curve(truth, cfg.r, cfg.n_grid, constructor)
    columns = {"n": curve.n_grid, "D3r": curve.losses, "L2": curve.distances,
               "ratio": curve.ratios}
    if expert.family is Family.LINEAR:
        tail = 1.0 / curve.n_grid.astype(float) ** (cfg.r + 1)
        columns["closed_form"] = tail + (np.exp(truth.beta0[0]) + tail) / curve.n_grid ** cfg.r

    out = _output_dir(cfg)
    write_csv(out / "ratio.csv", pd.DataFrame(
        {key: value if key == "n" else [repr(float(v)) for v in value]
         for key, value in columns.items()}))
    plot_ratio_curve(out / "ratio.svg", curve.n_grid, curve.ratios,
                     title=f"{expert.label}, r = {cfg.r:g}")
    write_json(out / "summary.json", {
        "config": cfg.to_dict(),
        "ratios": [float(v) for v in curve.ratios],
        "strictly_decreasing": curve.strictly_decreasing,
        **extra,
    })
    print(f"ratio strictly decreasing: {curve.strictly_decreasing}")
    if not curve.strictly_decreasing:
        logger.error("The ratio of %s does not decrease along n = %s.",
                     expert.label, cfg.n_grid)
        return EXIT_CONSTRUCTION
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "adversarial": cmd_adversarial,
}


def build_parser() -> argparse.ArgumentParser:
    """Parser of all subcommands; every flag defaults to None so that
    configuration files keep their values unless a flag is given."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--family", help="expert family, e.g. ridge-sigmoid, linear")
    common.add_argument("--norm-eps", dest="norm_eps", type=float,
                        help="stabilizer of normalized ridge experts")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser(prog="moe-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)

    fit = sub.add_parser("fit", parents=[common], help="fit one data set")
    fit.add_argument("--n", type=int, help="sample size")
    fit.add_argument("--k", type=int, help="number of fitted atoms")
    fit.add_argument("--loss", help="Voronoi loss D1, D2 or D3")
    fit.add_argument("--r", type=float, help="exponent of D3")

    sweep = sub.add_parser("sweep", parents=[common], help="run a rate sweep")
    sweep.add_argument("--setting", choices=["exact", "over"])
    sweep.add_argument("--quick", action="store_true", default=None,
                       help="10 sizes in [1e3, 1e4] with 10 replications")
    sweep.add_argument("--metric", choices=["voronoi", "l2"])
    sweep.add_argument("--replications", type=int)
    sweep.add_argument("--loss", help="Voronoi loss D1, D2 or D3")
    sweep.add_argument("--r", type=float, help="exponent of D3")

    check = sub.add_parser("check", parents=[common], help="check identifiability")
    check.add_argument("--mode", choices=[m.value for m in Mode])
    check.add_argument("--activation", help="sigmoid, tanh, gelu or polyP")
    check.add_argument("--k", dest="check_k", type=int, help="number of atoms")
    check.add_argument("--trials", type=int)
    check.add_argument("--threshold", type=float)

    adversarial = sub.add_parser("adversarial", parents=[common],
                                 help="trace an adversarial ratio curve")
    adversarial.add_argument("--r", type=float, help="order of the construction")
    adversarial.add_argument("--b1", type=float, help="true bias b*_1 of ridge experts")
    adversarial.add_argument("--n-grid", dest="n_grid", type=int, nargs="+")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: list[str] | None = None) -> int:
    """Runs one subcommand and returns its exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    overrides = {key: value for key, value in vars(args).items()
                 if key not in ("config", "verbose", "quiet")}
    try:
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[cfg.experiment](cfg)
    except (ConfigError, InputError, DomainError, FileNotFoundError) as exc:
        key = getattr(exc, "key", None)
        logger.error("%s%s", f"[{key}] " if key else "", exc)
        return EXIT_CONFIG
    except (DivergenceError, SweepError) as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGENCE
    except CapabilityError as exc:
        logger.error("%s", exc)
        return EXIT_CAPABILITY
    except ConstructionError as exc:
        logger.error("%s", exc)
        return EXIT_CONSTRUCTION


if __name__ == "__main__":
    sys.exit(main())
