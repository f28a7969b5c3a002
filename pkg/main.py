#!/usr/bin/env python3
"""
Main entry point for cmlrain

This script provides a unified interface to the experiment harness and the test suite.
"""

import argparse
import os
import sys
from pathlib import Path

# Add the project root to the path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from cli.run_experiment import main as run_experiment

HARNESS_COMMANDS = ("simulate", "reconstruct", "evaluate", "oracle", "em-fit")


def run_tests() -> int:
    import unittest
    loader = unittest.TestLoader()
    start_dir = os.path.join(project_root, "tests")
    suite = loader.discover(start_dir, pattern="test_*.py", top_level_dir=str(project_root))
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    return 0 if result.wasSuccessful() else 1


def main():
    """Main entry point"""
    if len(sys.argv) > 1 and sys.argv[1] in HARNESS_COMMANDS:
        sys.exit(run_experiment(sys.argv[1:]))

    parser = argparse.ArgumentParser(
        description="Rain-field reconstruction from commercial microwave links",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py simulate    --config configs/gp1d.yaml
  python main.py oracle      --config configs/gp1d.yaml
  python main.py reconstruct --config configs/gp1d.yaml
  python main.py evaluate    --config configs/gp1d.yaml
  python main.py em-fit      --config configs/cml_synthetic.yaml
  python main.py test                       # Run the unit tests
        """
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    for name in HARNESS_COMMANDS:
        subparsers.add_parser(name, help=f"Harness stage '{name}' (see --config)")
    subparsers.add_parser("test", help="Run the unit tests")
    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        return

    try:
        if args.command == "test":
            print("Running unit tests...")
            sys.exit(run_tests())
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        sys.exit(1)


if __name__ == "__main__":
    main()
