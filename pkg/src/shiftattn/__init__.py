"""Shifted cross-chunk and shifted dilated sparse attention, with a dense oracle,
receptive-field analysis and a toy language model to train them in."""
from .kernels import (
    AttnGrads,
    AttnOutput,
    attention,
    backward,
    chunked_attention,
    full_attention,
    mixed_attention,
    s2_baseline,
    scca_fixed,
    scca_flow,
    sda,
)
from .patterns import (
    AttnConfig,
    Full,
    HeadPlan,
    Local,
    LongMixed,
    S2,
    SccaFixed,
    SccaFlow,
    Sda,
    build_head_plans,
    build_mask,
    make_pattern,
)
from .tensor import ConfigError, NumericError, ShapeError

__version__ = "0.1.0"
