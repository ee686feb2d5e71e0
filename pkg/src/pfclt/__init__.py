"""Bootstrap particle filter with multinomial resampling, exact HMM oracles,
and a replication harness for the asymptotic normality of its error."""

from .exact import exact_diagnostics, exact_sigma, forward_filter, theoretical_estimator
from .filter import FilterRun, ParticleCloud, WeightCollapse, run_filter
from .models import (
    DiscreteHMMModel,
    LinearUniformModel,
    StochVolModel,
    default_oracle_hmm,
    simulate_trajectory,
)
from .stats import jarque_bera

__version__ = "0.1.0"
