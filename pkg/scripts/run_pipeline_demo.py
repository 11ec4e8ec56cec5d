#!/usr/bin/env python3
"""End-to-end demo on synthetic scenes.

Simulates a forest-to-water site and a forest-to-cropland site, fits the
harmonic models over the rolling windows, trains per-site univariate
thresholds, applies the shipped multivariate rule, and prints the skill
summary for each stage. Everything is driven through the CLI entry point,
so this doubles as a smoke test of the command wiring.

Usage: python scripts/run_pipeline_demo.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from cmfda.cli import main


def run(*args):
    code = main([str(a) for a in args])
    if code != 0:
        raise SystemExit(f"command failed ({code}): {' '.join(map(str, args))}")


def demo(workdir: Path) -> None:
    for scenario in ("sonora-like", "yucatan-like"):
        base = workdir / scenario
        print(f"\n=== {scenario} ===")
        run("simulate", "--scenario", scenario, "--out", base, "--seed", 17,
            "--n-events", 18, "--noise-sd", "0.02")
        run("fit", "--series", base / "series.csv", "--out", base / "models",
            "--windows", "2003:5", "--bands", "nir,ndvi")
        run("train", "--series", base / "series.csv",
            "--labels", base / "labels.csv", "--out", base / "report.csv",
            "--rule", "univariate",
            "--band", "nir" if scenario == "sonora-like" else "ndvi",
            "--windows", "2003:5", "--cv-folds", "3", "--seed", 1)
        run("detect", "--series", base / "series.csv",
            "--models", base / "models", "--out", base / "detections.csv")
        print("-- shipped multivariate rule vs labels --")
        run("report", "--detections", base / "detections.csv",
            "--labels", base / "labels.csv")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        demo(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            demo(Path(tmp))
