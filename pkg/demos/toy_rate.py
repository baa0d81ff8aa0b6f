"""Poisson counts with an exponential prior on the rate.

The model is

    lambda ~ Exp(gamma),   y_i | lambda ~ Poisson(lambda),

which has the closed-form posterior Ga(1 + sum(y), gamma + n) -- a
useful yardstick.  The rate is represented by one standard-normal
latent pushed through the exponential quantile transform, so the
predictor log(lambda(v)) is non-linear and the fit has to iterate.

Run:  python3 demos/toy_rate.py
"""

import numpy as np
from scipy import stats

from iterlace import (
    Component,
    ExponentialQuantile,
    IidModel,
    IndexMapper,
    MarginalMapper,
    Model,
    ObsBlock,
    PoissonFamily,
    fit,
    generate,
    parse_expr,
)
from iterlace.latents import _precision_hyper

gamma = 0.5
n = 100
rng = np.random.default_rng(4)

# prior-predictive data: one rate draw, then counts
lam_true = rng.exponential(1.0 / gamma)
y = rng.poisson(lam_true, size=n).astype(float)
print(f"true rate {lam_true:.3f}, observed mean {y.mean():.3f}")

comp = Component(
    "lam",
    IidModel(1, _precision_hyper(initial=1.0, fixed=True)),
    mapper=MarginalMapper(ExponentialQuantile(gamma), inner=IndexMapper(1)),
)
obs = ObsBlock(
    PoissonFamily(),
    y,
    parse_expr("log(lam)"),
    {"lam": np.ones(n, dtype=int)},
)
model = Model([comp], [obs], options={"bru_verbose": 1})

# bru_verbose=1 prints one block per linearisation step
result = fit(model)
print(f"\nconverged: {result.converged} after {result.records[-1].iter} steps")

# sample the rate and compare with the conjugate answer
draws = generate(result, parse_expr("lam"), 20000, np.random.default_rng(10),
                 inputs={"lam": np.ones(1, dtype=int)})
lam_samples = draws[:, 0]

a, b = 1.0 + y.sum(), gamma + n
exact = stats.gamma(a, scale=1.0 / b)
ks = stats.kstest(lam_samples, exact.cdf).statistic

print(f"\nposterior mean  : sampled {lam_samples.mean():.4f}   exact {a / b:.4f}")
print(f"posterior sd    : sampled {lam_samples.std(ddof=1):.4f}   exact {exact.std():.4f}")
print(f"KS distance to the exact Ga({a:.0f}, {b:.1f}) posterior: {ks:.4f}")
