#!/usr/bin/env python3
"""Compare the default seasonal model against the inter-annual variant.

Fits both model orders to a synthetic pixel whose reflectance carries a
two-year cycle on top of the annual one, then reports training and
hold-out RMSE for three prediction variants: the 5-coefficient default,
the 7-coefficient model with the two-year pair zeroed at prediction, and
the 7-coefficient model with the pair retained.
"""
import numpy as np

from cmfda.harmonic import (
    fit_arrays,
    fit_interannual,
    predict_interannual,
    predict_many,
)
from cmfda.core import Band


def rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def main():
    rng = np.random.default_rng(3)
    days = np.arange(0, 1100, 16).astype(float)  # ~3 years of composites
    w = 2 * np.pi * days / 366.0
    signal = (
        0.42
        + 0.05 * np.cos(w)
        + 0.03 * np.sin(w)
        + 0.08 * np.cos(w / 2.0)     # strong two-year component
        + 0.01 * np.cos(2 * w)
    )
    noisy = signal + rng.normal(0, 0.01, size=days.size)

    # training on 1.7 years leaves the two-year regressor correlated with
    # the annual terms, the regime where zeroing it hurts most
    train = days < 620
    doys = (days % 366) + 1

    annual = fit_arrays(doys[train], noisy[train], band=Band.NIR)
    inter = fit_interannual(days[train], noisy[train])

    rows = [
        (
            "annual + semi-annual (default)",
            predict_many(annual.coeff_array(), doys[train]),
            predict_many(annual.coeff_array(), doys[~train]),
        ),
        (
            "inter-annual fitted, zeroed at prediction",
            predict_interannual(inter, days[train], keep_interannual=False),
            predict_interannual(inter, days[~train], keep_interannual=False),
        ),
        (
            "inter-annual fitted and retained",
            predict_interannual(inter, days[train], keep_interannual=True),
            predict_interannual(inter, days[~train], keep_interannual=True),
        ),
    ]
    print(f"{'variant':<45}{'train rmse':>12}{'holdout rmse':>14}")
    for name, fit_pred, holdout_pred in rows:
        print(
            f"{name:<45}{rmse(fit_pred, noisy[train]):>12.4f}"
            f"{rmse(holdout_pred, noisy[~train]):>14.4f}"
        )
    print(
        "\nZeroing a fitted two-year pair distorts predictions; the default "
        "5-coefficient model avoids that failure mode."
    )


if __name__ == "__main__":
    main()
