import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

from jinja2 import Environment, FileSystemLoader

from controllers.experiments import (REPORTED_OPTIMUM, check_feasibility, monte_carlo,
                                     oracle_plant_optimum, prediction_report, scenario_calibrate,
                                     sweep)
from controllers.rto import ALGORITHMS, NoiseConfig, OptimizationError, RunConfig
from controllers.scenario_manager import (PROJECT_ROOT, ScenarioError, ScenarioManager,
                                          dumps_scenario)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

SWEEP_FLAGS = {"eps-trunc": "eps_trunc_max", "filter-gain": "filter_gain"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage problems exit with 1 here."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated decimals, got {text!r}") from e


def _float_pair(text: str) -> tuple[float, float]:
    values = _float_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return values[0], values[1]


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--scenario", default="default",
                        help="scenario name under resources/scenarios or path to a .toml file")
    parser.add_argument("--output-dir", default="runs",
                        help="root directory for run directories (default: runs)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for every random stream of the invocation (default: 0)")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker processes for independent runs, capped by R2R_THREADS")


def _add_run_overrides(parser: argparse.ArgumentParser):
    parser.add_argument("--eps-trunc", type=float, default=None,
                        help="truncation-error bound eps_max^T, dimensionless (default: 0.05)")
    parser.add_argument("--filter-gain", type=float, default=None,
                        help="modifier filter gain K in (0, 1], dimensionless (default: 0.5)")
    parser.add_argument("--max-iters", type=int, default=None,
                        help="maximum number of batches per run (default: 40)")
    parser.add_argument("--noise", type=float, default=None,
                        help="relative measurement noise sigma, dimensionless (default: 0 for run "
                             "and sweep, the scenario's noise_sigma_rel for mc)")
    parser.add_argument("--n-starts", type=int, default=None,
                        help="identification starts per batch (default: 5)")
    parser.add_argument("--fd-step", type=float, default=None,
                        help="plant/model input-gradient step in range-scaled units (default: 0.02)")
    parser.add_argument("--central-differences", action="store_true",
                        help="probe plant gradients with central differences (4 extra batches)")
    parser.add_argument("--no-hessian", action="store_true",
                        help="skip the finite-difference Hessian in the KKT report")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="r2rlab", description="Run-to-run optimization lab for a fed-batch "
                                                "penicillin process with model-plant mismatch.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="log level for stderr and the log file (default: INFO)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run one algorithm on a scenario")
    _add_common(p)
    p.add_argument("--algorithm", default="proposed",
                   help=f"one of {', '.join(ALGORITHMS)} (default: proposed)")
    _add_run_overrides(p)

    p = sub.add_parser("oracle", help="brute-force plant optimum of a scenario")
    _add_common(p)
    p.add_argument("--grid", type=int, default=201, help="grid points per decision axis (default: 201)")

    p = sub.add_parser("calibrate", help="fit t_f (h) and V_max (L) to a reported optimum")
    _add_common(p)
    p.add_argument("--targets", type=_float_list, default=list(REPORTED_OPTIMUM),
                   help="S0* (g/L), F* (L/h), P(t_f)V(t_f)* (g) (default: 55,0.1728,592)")
    p.add_argument("--t-f-range", type=_float_pair, default=(100.0, 300.0),
                   help="batch duration search range in h, 'lo,hi' (default: 100,300)")
    p.add_argument("--v-max-range", type=_float_pair, default=(110.0, 160.0),
                   help="terminal volume limit search range in L, 'lo,hi' (default: 110,160)")
    p.add_argument("--t-f-steps", type=int, default=21, help="t_f candidates (default: 21)")
    p.add_argument("--v-max-steps", type=int, default=11, help="V_max candidates (default: 11)")
    p.add_argument("--screen-grid", type=int, default=61,
                   help="grid points per axis while screening candidates (default: 61)")
    p.add_argument("--grid", type=int, default=201,
                   help="grid points per axis for the confirming oracle (default: 201)")
    p.add_argument("--threshold", type=float, default=0.05,
                   help="largest acceptable relative residual, dimensionless (default: 0.05)")
    p.add_argument("--save-as", default=None,
                   help="also write the calibrated scenario to this path")

    p = sub.add_parser("sweep", help="one run per value of eps-trunc (proposed) or filter-gain (ma)")
    _add_common(p)
    p.add_argument("--param", required=True, help="eps-trunc or filter-gain")
    p.add_argument("--values", type=_float_list, required=True,
                   help="comma-separated values, dimensionless (e.g. 0.01,0.05)")
    p.add_argument("--oracle-grid", type=int, default=101,
                   help="oracle grid per axis for iterations-to-optimum (default: 101, 0 skips)")
    _add_run_overrides(p)

    p = sub.add_parser("mc", help="noise Monte-Carlo study with paired seeds")
    _add_common(p)
    p.add_argument("--algorithms", default="proposed,ma",
                   help=f"comma-separated subset of {', '.join(ALGORITHMS)} (default: proposed,ma)")
    p.add_argument("--replicates", type=int, default=10, help="replicates per algorithm, >= 2 (default: 10)")
    p.add_argument("--s0-star", type=float, default=None,
                   help="true optimal S0 in g/L for the IAE (default: computed by the oracle)")
    p.add_argument("--oracle-grid", type=int, default=101,
                   help="oracle grid per axis when --s0-star is not given (default: 101)")
    _add_run_overrides(p)

    p = sub.add_parser("validate-scenario", help="parse a scenario and check its feasibility")
    p.add_argument("--scenario", default="default",
                   help="scenario name under resources/scenarios or path to a .toml file")
    return parser


def build_run_config(args, noise_default: float = 0.0) -> RunConfig:
    cfg = RunConfig()
    correction = cfg.correction
    if args.eps_trunc is not None:
        correction = replace(correction, eps_trunc_max=args.eps_trunc)
    if args.fd_step is not None:
        correction = replace(correction, fd_step_u=args.fd_step)
    estimation = cfg.estimation
    if args.n_starts is not None:
        estimation = replace(estimation, n_starts=args.n_starts)
    termination = cfg.termination
    if args.max_iters is not None:
        termination = replace(termination, max_iterations=args.max_iters)
    noise = NoiseConfig(sigma_rel=noise_default if args.noise is None else args.noise)
    return RunConfig(correction=correction, estimation=estimation, termination=termination,
                     noise=noise,
                     filter_gain=cfg.filter_gain if args.filter_gain is None else args.filter_gain,
                     central_differences=args.central_differences,
                     kkt_hessian=not args.no_hessian)


class App:
    """Command handlers. Each returns an exit code; artifacts go to run directories."""

    def __init__(self, output_root: str = "runs", scenario_dir: str | None = None):
        self.scenarios = ScenarioManager(scenario_dir=scenario_dir, output_root=output_root)
        template_dir = os.path.join(PROJECT_ROOT, "resources", "templates")
        self.jinja_env = Environment(loader=FileSystemLoader(template_dir), autoescape=False,
                                     keep_trailing_newline=True)

    def render(self, template: str, **context) -> str:
        return self.jinja_env.get_template(template).render(**context)

    def write_summary(self, directory: str, summary: dict) -> str:
        summary = {**summary, "timestamp": datetime.now(timezone.utc).isoformat()}
        return self.scenarios.write(directory, "summary.json", json.dumps(summary, indent=2, sort_keys=True))

    # --- run ---

    def cmd_run(self, args) -> int:
        if args.algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {args.algorithm!r}; valid algorithms: "
                             f"{', '.join(ALGORITHMS)}")
        scenario = self.scenarios.load(args.scenario)
        cfg = build_run_config(args)
        result = ALGORITHMS[args.algorithm](scenario, cfg, args.seed)

        out = self.scenarios.run_dir(scenario.name, args.algorithm, args.seed)
        self.scenarios.write(out, "result.json", result.to_json())
        self.scenarios.write(out, "iterations.csv", result.to_csv())
        if result.ledger is not None:
            self.scenarios.write(out, "ledger.csv", result.ledger.to_csv())
            self.scenarios.write(out, "ledger.json", result.ledger.to_json())
        if result.records:
            try:
                self.scenarios.write(out, "prediction.csv", prediction_report(scenario, result))
            except Exception as e:
                logging.error(f"Prediction report failed: {e}", exc_info=True)
        self.write_summary(out, {
            "command": "run", "algorithm": args.algorithm, "scenario": scenario.name,
            "seed": args.seed, "termination": result.termination, "message": result.message,
            "iterations": result.iterations,
            "final_u": None if result.final_u is None else [float(v) for v in result.final_u],
        })
        print(self.render("run.txt.j2", result=result, directory=out), end="")
        logging.info(f"Run artifacts written to {out}")
        return EXIT_FAILURE if result.failed else EXIT_OK

    # --- oracle ---

    def cmd_oracle(self, args) -> int:
        scenario = self.scenarios.load(args.scenario)
        oracle = oracle_plant_optimum(scenario, grid=args.grid)
        out = self.scenarios.run_dir(scenario.name, "oracle", args.seed)
        self.scenarios.write(out, "oracle.json", json.dumps(oracle.to_dict(), indent=2, sort_keys=True))
        self.write_summary(out, {"command": "oracle", "scenario": scenario.name, **oracle.to_dict()})
        print(self.render("oracle.txt.j2", scenario=scenario, oracle=oracle), end="")
        return EXIT_OK

    # --- calibrate ---

    def cmd_calibrate(self, args) -> int:
        if len(args.targets) != 3:
            raise UsageError("--targets needs exactly three values: S0*, F*, mass*")
        scenario = self.scenarios.load(args.scenario)
        calibration = scenario_calibrate(
            scenario, targets=tuple(args.targets), t_f_range=args.t_f_range,
            V_max_range=args.v_max_range, t_f_steps=args.t_f_steps, V_max_steps=args.v_max_steps,
            screen_grid=args.screen_grid, oracle_grid=args.grid, threshold=args.threshold,
            workers=args.workers)
        out = self.scenarios.run_dir(scenario.name, "calibrate", args.seed)
        self.scenarios.write(out, "calibration.json",
                             json.dumps(calibration.to_dict(), indent=2, sort_keys=True))
        self.scenarios.write(out, "scenario.toml", dumps_scenario(calibration.scenario))
        if args.save_as:
            self.scenarios.save(calibration.scenario, args.save_as)
        self.write_summary(out, {"command": "calibrate", "scenario": scenario.name,
                                 "t_f": calibration.scenario.inputs.t_f,
                                 "V_max": calibration.scenario.spec.V_max,
                                 "residual": calibration.residual})
        print(self.render("calibrate.txt.j2", calibration=calibration, threshold=args.threshold), end="")
        return EXIT_OK

    # --- sweep ---

    def cmd_sweep(self, args) -> int:
        if args.param not in SWEEP_FLAGS:
            raise UsageError(f"unknown sweep parameter {args.param!r}; valid: {', '.join(SWEEP_FLAGS)}")
        if not args.values:
            raise UsageError("--values needs at least one value")
        scenario = self.scenarios.load(args.scenario)
        cfg = build_run_config(args)
        s0_star = None
        if args.oracle_grid:
            s0_star = float(oracle_plant_optimum(scenario, grid=args.oracle_grid).u[0])
        result = sweep(scenario, SWEEP_FLAGS[args.param], args.values, seed=args.seed, cfg=cfg,
                       s0_star=s0_star, workers=args.workers)

        for value, run in zip(result.values, result.runs):
            run_out = self.scenarios.run_dir(scenario.name, result.algorithm, args.seed,
                                             suffix=f"{args.param}-{value:g}")
            self.scenarios.write(run_out, "result.json", run.to_json())
            self.scenarios.write(run_out, "iterations.csv", run.to_csv())
        out = self.scenarios.run_dir(scenario.name, "sweep", args.seed, suffix=args.param)
        self.scenarios.write(out, "convergence.csv", result.convergence_csv())
        self.scenarios.write(out, "sweep_summary.csv", result.summary_csv())
        self.write_summary(out, {"command": "sweep", "scenario": scenario.name, "parameter": args.param,
                                 "values": result.values, "s0_star": s0_star,
                                 "runs": result.summary_rows()})
        print(self.render("sweep.txt.j2", result=result, rows=result.summary_rows(), directory=out), end="")
        return EXIT_FAILURE if any(r.failed for r in result.runs) else EXIT_OK

    # --- mc ---

    def cmd_mc(self, args) -> int:
        algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
        unknown = [a for a in algorithms if a not in ALGORITHMS]
        if not algorithms:
            raise UsageError("--algorithms needs at least one algorithm")
        if unknown:
            raise UsageError(f"unknown algorithm {unknown[0]!r}; valid algorithms: "
                             f"{', '.join(ALGORITHMS)}")
        if args.replicates < 2:
            raise UsageError("--replicates must be >= 2")
        scenario = self.scenarios.load(args.scenario)
        cfg = build_run_config(args, noise_default=scenario.noise_sigma_rel)
        s0_star = args.s0_star
        if s0_star is None:
            s0_star = float(oracle_plant_optimum(scenario, grid=args.oracle_grid).u[0])
        study = monte_carlo(scenario, algorithms, args.replicates, base_seed=args.seed, cfg=cfg,
                            s0_star=s0_star, sigma=cfg.noise.sigma_rel, workers=args.workers)

        out = self.scenarios.run_dir(scenario.name, "mc", args.seed)
        self.scenarios.write(out, "replicates.csv", study.replicates_csv())
        self.scenarios.write(out, "convergence_band.csv", study.convergence_band_csv())
        self.scenarios.write(out, "mc_summary.json", study.summary.to_json())
        self.write_summary(out, {"command": "mc", "scenario": scenario.name, "algorithms": algorithms,
                                 **study.summary.to_dict()})
        print(self.render("mc.txt.j2", summary=study.summary, directory=out), end="")
        return EXIT_OK

    # --- validate-scenario ---

    def cmd_validate_scenario(self, args) -> int:
        scenario = self.scenarios.load(args.scenario)
        feasibility = check_feasibility(scenario)
        print(self.render("scenario.txt.j2", scenario=scenario, feasibility=feasibility), end="")
        if not feasibility["feasible"]:
            logging.error(f"V_max = {scenario.spec.V_max} L is below the smallest reachable "
                          f"V(t_f) = {feasibility['min_terminal_volume']:.4f} L")
            return EXIT_USAGE
        return EXIT_OK

    def dispatch(self, args) -> int:
        handlers = {
            "run": self.cmd_run,
            "oracle": self.cmd_oracle,
            "calibrate": self.cmd_calibrate,
            "sweep": self.cmd_sweep,
            "mc": self.cmd_mc,
            "validate-scenario": self.cmd_validate_scenario,
        }
        return handlers[args.command](args)


def run_cli(argv=None, setup_logging=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    if setup_logging is not None:
        setup_logging(args.log_level)
    if not args.command:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE

    try:
        app = App(output_root=getattr(args, "output_dir", "runs"))
        return app.dispatch(args)
    except (UsageError, ScenarioError) as e:
        logging.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # invalid overrides surface from the config dataclasses
        logging.error(f"Invalid value: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OptimizationError as e:
        logging.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
