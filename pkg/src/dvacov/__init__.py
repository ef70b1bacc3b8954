"""Covariance estimation with directional variance adjustment of factor models.

The package covers synthetic factor-model markets, covariance estimators (sample,
shrinkage, factor analysis by EM, exogenous factors), the Monte-Carlo directional
bias correction of fitted factor models, minimum-variance portfolio solvers and a
rolling-window backtest harness.
"""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.1.0"

from .backtest import *  # noqa: E402,F401,F403
from .core import (  # noqa: E402,F401
    CovarianceEstimate,
    EstimatorTag,
    FactorModelParams,
    ReturnsPanel,
    make_rng,
)
from .dva import *  # noqa: E402,F401,F403
from .errors import *  # noqa: E402,F401,F403
from .estimators import *  # noqa: E402,F401,F403
from .portfolio import *  # noqa: E402,F401,F403
from .synthgen import *  # noqa: E402,F401,F403
