#!/usr/bin/env python3
"""
GP Benchmark Script

Runs every registered posterior sampler on the 1-D interval-observation benchmark
(50-point grid on [-5, 5], RBF prior with lengthscale 0.6) and compares each
ensemble with exact draws from the closed-form posterior.

Usage:
    python scripts/run_gp_benchmark.py
    python scripts/run_gp_benchmark.py --methods TDS DAPS --n-samples 200
"""

import argparse
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.diffusion import GaussianDenoiser
from cmlrain.forward import LinearGaussianLikelihood
from cmlrain.gp1d import build_gp1d_problem, oracle_draws
from cmlrain.metrics import ensemble_metrics
from cmlrain.samplers import (SamplerConfig, draw_ensemble, load_sampler_config, sampler_registry,
                              sampler_schedule)

SIGMA_MIN = 2e-3
SIGMA_MAX = 100.0


def run_benchmark(methods, n_samples: int = 500, seed: int = 0, sampler_dir: str = "configs/samplers",
                  sigma: float = 0.1) -> pd.DataFrame:
    """Return one row of sliced-Wasserstein / mean / quantile errors per sampler."""
    problem = build_gp1d_problem(sigma=sigma, seed=seed)
    oracle = problem.oracle()
    reference = oracle_draws(oracle, n_samples, seed + 1)
    denoiser = GaussianDenoiser(np.zeros(problem.grid.size), problem.prior_covariance())
    likelihood = LinearGaussianLikelihood(problem.operator, problem.y, sigma)

    rows = []
    for tag in methods:
        path = os.path.join(sampler_dir, f"{tag.lower()}.yaml")
        cfg = load_sampler_config(path, "gp") if os.path.exists(path) else SamplerConfig(tag)
        sampler = cfg.build()
        schedule = sampler_schedule(cfg, SIGMA_MIN, SIGMA_MAX)
        t0 = time.perf_counter()
        try:
            ens = draw_ensemble(sampler, schedule, denoiser, likelihood, n_samples, seed)
        except Exception as e:
            print(f"[FAIL] {cfg.algorithm}: {e}")
            continue
        elapsed = time.perf_counter() - t0
        metrics = ensemble_metrics(ens.samples, oracle, reference, rng=seed)
        rows.append({"method": cfg.algorithm, **metrics.to_dict(), "seconds": elapsed})
        print(f"[OK] {cfg.algorithm:8s} SW={metrics.sliced_wasserstein:.3f} ({elapsed:.1f}s)")
    return pd.DataFrame(rows)


def main():
    parser = argparse.ArgumentParser(description="1-D GP posterior sampling benchmark")
    parser.add_argument("--methods", nargs="+", default=list(sampler_registry()))
    parser.add_argument("--n-samples", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sigma", type=float, default=0.1, help="Observation noise level")
    parser.add_argument("--sampler-dir", default="configs/samplers")
    parser.add_argument("--out", default="gp_benchmark.csv")
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args()
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))

    print("=== GP benchmark ===")
    df = run_benchmark(args.methods, args.n_samples, args.seed, args.sampler_dir, args.sigma)
    if df.empty:
        print("[FAIL] no sampler completed")
        return 1
    print()
    print(df.round(3).to_string(index=False))
    df.to_csv(args.out, index=False)
    print(f"\nSaved results to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
