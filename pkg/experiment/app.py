import argparse
import logging
import os
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from experiment.config import OUTPUT_ROOT_ENV, ConfigError, describe_validation_error, load_config
from experiment.runner import run_compare, run_experiment, run_oracles

# Set up logging
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_ORACLE_FAILURE = 2


class ExperimentCLI:
    def __init__(self):
        # Load environment variables
        load_dotenv()
        self.output_root = os.getenv(OUTPUT_ROOT_ENV)
        if self.output_root:
            logger.debug(f"Output root from environment: {self.output_root}")

        self.parser = argparse.ArgumentParser(
            prog="safesim",
            description="Safe online learning of pendulum dynamics with probabilistic barrier constraints",
        )
        self.parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
        self._register_commands()

    def _register_commands(self):
        """Register the run, oracle and compare verbs"""
        commands = self.parser.add_subparsers(dest="command", required=True)

        run = commands.add_parser("run", help="run the closed loop and export trajectory, learning error and summary")
        run.add_argument("config", help="JSON experiment configuration")
        run.set_defaults(handler=self.run_command)

        oracle = commands.add_parser("oracle", help="run the correctness oracles and write oracle_report.json")
        oracle.add_argument("config", help="JSON experiment configuration")
        oracle.add_argument("--tolerance-scale", type=float, default=None, help="multiply every oracle tolerance")
        oracle.set_defaults(handler=self.oracle_command)

        compare = commands.add_parser("compare", help="compare a stored posterior with the true pendulum")
        compare.add_argument("posterior", help="posterior.json written by a run")
        compare.add_argument("grid", help="grid spec: JSON file or inline JSON object")
        compare.add_argument("--output", default=None, help="CSV destination")
        compare.set_defaults(handler=self.compare_command)

    def run_command(self, args: argparse.Namespace) -> int:
        cfg = load_config(args.config)
        result = run_experiment(cfg)
        summary = result.log.summary()
        print(f"min_h={summary['min_h']:.6g} final_rmse={summary['final_rmse']} steps={summary['steps']}")
        return EXIT_OK

    def oracle_command(self, args: argparse.Namespace) -> int:
        cfg = load_config(args.config)
        report = run_oracles(cfg, args.tolerance_scale)
        for result in report.results:
            status = "PASS" if result.passed else "FAIL"
            print(f"{status} {result.name}: {result.observed:.3e} <= {result.tolerance:.3e}")
        if not report.passed:
            logger.error(f"{len(report.failures)} oracle check(s) failed")
            return EXIT_ORACLE_FAILURE
        return EXIT_OK

    def compare_command(self, args: argparse.Namespace) -> int:
        report = run_compare(args.posterior, args.grid, args.output)
        print(f"f_rmse={report.f_rmse:.6g} g_rmse={report.g_rmse:.6g}")
        return EXIT_OK

    def run(self, argv: Optional[List[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        try:
            return args.handler(args)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            return EXIT_CONFIG_ERROR
        except ValidationError as e:
            logger.error(f"Configuration error: {describe_validation_error(e)}")
            return EXIT_CONFIG_ERROR
        except OSError as e:
            logger.error(f"Error writing artifacts: {e}")
            return EXIT_CONFIG_ERROR
