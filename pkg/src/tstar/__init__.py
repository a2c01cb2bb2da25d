"""Video-token compression: selective-scan mixers, gated query aggregation, frame subsampling."""
from .pipeline import (
    MambaMiaConfig,
    init_mambamia,
    mambamia_compress,
    secondary_sample,
    token_budget,
)
from .ssm import SelectiveSsmParams, discretize_zoh, selective_scan_backward, selective_scan_forward
from .tensorcore import Rng

__version__ = "0.1.0"

__all__ = [
    "MambaMiaConfig",
    "Rng",
    "SelectiveSsmParams",
    "discretize_zoh",
    "init_mambamia",
    "mambamia_compress",
    "secondary_sample",
    "selective_scan_backward",
    "selective_scan_forward",
    "token_budget",
]
