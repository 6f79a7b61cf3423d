"""Mean curvature flow in constant-curvature ambients: flows, harmonic map
gauges, monotonicity densities and pseudolocality audits."""

from . import ambient, cli, errors, flows, immersion, pseudolocality
from .ambient import AmbientModel
from .flows import FlowConfig, run_flow
from .immersion import ImmersionField, ParameterGrid, induced_geometry, shapes

__all__ = [
    "ambient",
    "cli",
    "errors",
    "flows",
    "immersion",
    "pseudolocality",
    "AmbientModel",
    "FlowConfig",
    "ImmersionField",
    "ParameterGrid",
    "induced_geometry",
    "run_flow",
    "shapes",
]

__version__ = "0.1.0"
