"""attnkit: a verification kit for latent-attention decoding.

Reference forwards for mha/mqa/gqa/mfa/tpa/gta and the latent family
(mla, grouped latents, branch-summed low-rank attention), exact-equivalence
checks between naive and absorbed decoding, exact-rational cost tables, a
Monte Carlo variance lab, and a simulated tensor-parallel decoder whose
per-device traffic ledger reproduces the closed-form loading numbers.
"""

from .cache import KvCache, PrefillOutput, kv_cache_elements, stream_layout
from .config import AttnConfig, LATENT_VARIANTS, VARIANTS, ZOO_VARIANTS, table_context, trained_config
from .costs import (
    HardwareModel,
    Placement,
    arithmetic_intensity,
    ai_asymptotic,
    cost_report,
    decode_time,
    kv_cache_per_token,
    param_count,
    per_device_load,
    placement,
    roofline_decode_time,
)
from .decode import (
    absorb_query,
    absorbed_decode_step,
    decode_step,
    naive_decode_step,
    new_cache,
)
from .errors import (
    AttnKitError,
    ConfigError,
    IntegrityError,
    NumericError,
    RoutingError,
    ShapeMismatchError,
)
from .latent import (
    ScaleFactors,
    block_reconstruct,
    calib_factors,
    calib_factors_squared,
    group_map,
    latent_prefill,
)
from .rope import RopeParams, rope_apply, rope_rotate
from .tensors import Rng, gaussian_init, matmul, rmsnorm, softmax_rows
from .tpsim import DeviceShard, ShardSet, TrafficLedger, make_shards, sim_decode
from .variance import VarianceReport, estimate_variances, verify_calibration
from .weights import WeightSet, build_weights, weight_shapes
from .zoo import block_forward, gated_output, prefill


def forward(cfg, w, hidden, pos_offset: int = 0):
    """Prefill dispatcher: routes to the zoo or the latent family."""
    if cfg.variant in LATENT_VARIANTS:
        return latent_prefill(cfg, w, hidden, pos_offset)
    return prefill(cfg, w, hidden, pos_offset)


__all__ = [name for name in dir() if not name.startswith("_")]
