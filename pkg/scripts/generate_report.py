#!/usr/bin/env python3
"""
Report Generator for Reconstruction Experiments

This script:
1. Finds the metrics.csv files written by `cmlrain evaluate`
2. Aggregates them per (experiment, method) with 95% confidence intervals
3. Saves a comparison table as CSV and Markdown
"""

import argparse
import glob
import os
import sys
from datetime import datetime

import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.metrics import metrics_table

DISPLAY_METRICS = ["rmse", "pcc", "cum_rain_diff", "sliced_wasserstein", "mean_l2", "q05_l2", "q95_l2"]


class ReportGenerator:
    def __init__(self, results_dir: str = "runs", output_dir: str = "reports"):
        self.results_dir = results_dir
        self.output_dir = output_dir
        self.csv_files = []
        self.all_data = pd.DataFrame()

    def find_csv_files(self):
        """Find every metrics.csv below the results directory"""
        pattern = os.path.join(self.results_dir, "**", "metrics.csv")
        self.csv_files = sorted(glob.glob(pattern, recursive=True))
        print(f"Found {len(self.csv_files)} metrics files:")
        for file in self.csv_files:
            print(f"  - {file}")

    def load_all_data(self):
        frames = []
        for file in self.csv_files:
            df = pd.read_csv(file)
            df["experiment"] = os.path.basename(os.path.dirname(file))
            frames.append(df)
        if frames:
            self.all_data = pd.concat(frames, ignore_index=True)
            print(f"Loaded {len(self.all_data)} per-field rows")
        else:
            print("No metrics files found!")

    def create_summary_table(self) -> pd.DataFrame:
        """One row per (experiment, method): metric means and CI half-widths"""
        if self.all_data.empty:
            return pd.DataFrame()
        tables = []
        for experiment, group in self.all_data.groupby("experiment", sort=True):
            cols = ["method", "field"] + [c for c in DISPLAY_METRICS if c in group.columns]
            table = metrics_table(group[cols].to_dict(orient="records"))
            table.insert(0, "experiment", experiment)
            tables.append(table.reset_index())
        return pd.concat(tables, ignore_index=True)

    @staticmethod
    def to_markdown(table: pd.DataFrame) -> str:
        header = "| " + " | ".join(table.columns) + " |"
        rule = "|" + "|".join("---" for _ in table.columns) + "|"
        lines = [header, rule]
        for _, row in table.iterrows():
            cells = [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def run(self):
        self.find_csv_files()
        self.load_all_data()
        summary = self.create_summary_table()
        if summary.empty:
            print("No data to generate report!")
            return None
        os.makedirs(self.output_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        csv_path = os.path.join(self.output_dir, f"comparison_{timestamp}.csv")
        md_path = os.path.join(self.output_dir, f"comparison_{timestamp}.md")
        summary.to_csv(csv_path, index=False)
        with open(md_path, "w") as fh:
            fh.write("# Reconstruction comparison\n\n")
            fh.write("Values are means over fields; `_ci95` columns are normal-approximation 95% half-widths.\n\n")
            fh.write(self.to_markdown(summary))
            fh.write("\n")
        print(summary.round(4).to_string(index=False))
        print(f"\nSaved {csv_path} and {md_path}")
        return summary


def main():
    parser = argparse.ArgumentParser(description="Aggregate metrics.csv files into a comparison table")
    parser.add_argument("--results-dir", default="runs")
    parser.add_argument("--output-dir", default="reports")
    args = parser.parse_args()
    ReportGenerator(args.results_dir, args.output_dir).run()


if __name__ == "__main__":
    main()
