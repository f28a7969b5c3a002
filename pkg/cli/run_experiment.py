# cli/run_experiment.py
#
# Command-line harness for rain-field reconstruction experiments.
# Example usage:
#   python -m cli.run_experiment simulate    --config configs/cml_synthetic.yaml
#   python -m cli.run_experiment reconstruct --config configs/cml_synthetic.yaml --runtime-cap 60
#   python -m cli.run_experiment evaluate    --config configs/cml_synthetic.yaml
#   python -m cli.run_experiment oracle      --config configs/gp1d.yaml
#   python -m cli.run_experiment em-fit      --config configs/cml_synthetic.yaml --fields runs/cml/fields
#
# Every stage reads the same config and writes into one output directory, next to
# a manifest.json that lists each file with its sha256.

import argparse
import logging
import sys

from cmlrain.experiment import ConfigError, Experiment, ExperimentConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmlrain",
        description="Rain-field reconstruction from commercial microwave links",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment YAML/JSON file")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--out", default=None, help="Output directory (overrides config and CMLRAIN_OUTPUT_ROOT)")
    common.add_argument("--runtime-cap", type=float, default=None, help="Per-batch sampler cap in seconds")
    common.add_argument("--parallel-methods", action="store_true", help="Run methods concurrently")
    common.add_argument("--log-level", default="INFO", help="Logging level (DEBUG, INFO, WARNING)")

    sub = parser.add_subparsers(dest="command")
    sub.add_parser("simulate", parents=[common], help="Generate reference fields and observations")
    sub.add_parser("reconstruct", parents=[common], help="Run every requested sampler and baseline")
    sub.add_parser("evaluate", parents=[common], help="Compute metrics and plot dumps")
    sub.add_parser("oracle", parents=[common], help="Exact posterior of the 1-D benchmark")
    em = sub.add_parser("em-fit", parents=[common], help="Fit the censored GP prior to reference fields")
    em.add_argument("--fields", default=None, help="Directory of .rfld fields (default: <out>/fields)")
    return parser


def load_experiment(args) -> Experiment:
    config = ExperimentConfig.from_file(args.config).with_overrides(
        seed=args.seed, output_dir=args.out, runtime_cap=args.runtime_cap)
    return Experiment(config, parallel_methods=args.parallel_methods)


def run_command(args) -> int:
    """Run one subcommand and return the process exit code."""
    exp = load_experiment(args)
    print(f"=== {args.command}: {exp.config.name} ({exp.config.scenario}) -> {exp.out} ===")

    if args.command == "simulate":
        audit = exp.simulate()
        n = len(exp.reference_files())
        print(f"[OK] {n} reference field(s) and observations written")
        sim = audit.get("simulate", {})
        if sim.get("sigma_within_bound") is False:
            print("[WARN] heteroscedastic noise levels outside (sigma/2, sigma]")
        return 0

    if args.command == "reconstruct":
        outcomes = exp.reconstruct()
        for o in outcomes:
            if o.ok:
                print(f"[OK] {o.name:8s} {o.seconds:8.2f}s")
                for r in o.reductions:
                    print(f"[WARN] {o.name}: {r['parameter']} reduced {r['from']} -> {r['to']} to fit the runtime cap")
            else:
                print(f"[FAIL] {o.name:8s} {o.error_type}: {o.error}")
        return 0 if any(o.ok for o in outcomes) else 1

    if args.command == "evaluate":
        summary = exp.evaluate()
        if summary.empty:
            print("[WARN] no method outputs to evaluate")
            return 1
        print(summary.round(4).to_string())
        print(f"\n[OK] metrics written to {exp.out / 'metrics.csv'} and {exp.out / 'summary.csv'}")
        return 0

    if args.command == "oracle":
        posterior = exp.oracle()
        print(f"[OK] oracle posterior on {posterior.mean.size} grid points written to {exp.out / 'oracle'}")
        return 0

    if args.command == "em-fit":
        params, report = exp.em_fit(args.fields)
        print(f"[OK] selected beta={report.selected_beta:g}")
        for key, value in params.to_dict().items():
            print(f"  {key:14s} {value:.4f}")
        return 0

    raise ValueError(f"Unknown command: {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"[FAIL] {exc}")
        return 2
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
