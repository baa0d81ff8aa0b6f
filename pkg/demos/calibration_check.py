"""Does the fitter's posterior mean what it says?  A small SBC run.

Simulation-based calibration: draw hyperparameters and latents from
the prior, simulate data, refit, and record where the true functional
value lands within its own posterior sample.  If the fitted posteriors
are honest, those normalised ranks are uniform on (0, 1).

The model is the exponential-prior Poisson rate:

    lambda ~ Exp(0.5),   y_i ~ Poisson(lambda),  i = 1..40

K = 60 replicates with J = 300 posterior draws each keeps this quick
(a few seconds); the release checks run K = 200, J = 1000.

Run:  python3 demos/calibration_check.py
"""

import numpy as np

from iterlace import (
    Component,
    ExponentialQuantile,
    IidModel,
    IndexMapper,
    MarginalMapper,
    Model,
    ObsBlock,
    PoissonFamily,
    parse_expr,
    sbc_run,
)
from iterlace.latents import _precision_hyper

n = 40
model = Model(
    [Component("lam", IidModel(1, _precision_hyper(initial=1.0, fixed=True)),
               mapper=MarginalMapper(ExponentialQuantile(0.5),
                                     inner=IndexMapper(1)))],
    [ObsBlock(PoissonFamily(), np.zeros(n), parse_expr("log(lam)"),
              {"lam": np.ones(n, dtype=int)})],
)

result = sbc_run(model, K=60, J=300, seed=5)
print(f"replicates: {result.K}   draws per replicate: {result.J}"
      f"   failures: {result.failures}")
print(f"KS distance of ranks from uniform: {result.ks_statistic:.4f}"
      f"   (p = {result.ks_pvalue:.3f})\n")

counts, edges = np.histogram(result.w_values, bins=10, range=(0.0, 1.0))
peak = counts.max()
print("rank histogram (uniform is flat):")
for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
    bar = "#" * int(round(40 * c / peak))
    print(f"  [{lo:.1f}, {hi:.1f})  {c:>3}  {bar}")

verdict = "consistent with" if result.ks_pvalue > 0.05 else "in tension with"
print(f"\np = {result.ks_pvalue:.3f}: the ranks are {verdict} uniformity.")
