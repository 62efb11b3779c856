"""MCMC-informed neural emulation toolkit.

Pipeline pieces, in dependency order:

* odes: forward simulators (six-species kinetics, reservoir climate
  box model) on fixed RK4 grids.
* mcmc: delayed-rejection adaptive Metropolis sampling of simulator
  parameters against noisy observations.
* datasets: posterior-informed training data for the emulators.
* autodiff / nn: a small reverse-mode engine and the layer/loss
  vocabulary both emulators share.
* quantile: interval emulator predicting (q05, q95) of the posterior
  predictive law.
* aeode: trajectory emulator mapping (initial state, parameters) to a
  full time grid in one pass.
* measures / metrics: empirical-measure transport machinery, risk-shift
  bound verification, and shared evaluation metrics.
* cli: `mine` command wiring the stages together with provenance
  hashes and deterministic seeds.
"""

from . import (  # noqa: F401
    aeode,
    autodiff,
    datasets,
    errors,
    mcmc,
    measures,
    metrics,
    nn,
    odes,
    quantile,
    rng,
)

__version__ = "0.1.0"
