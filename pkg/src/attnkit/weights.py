"""Weight construction for every mechanism variant.

Weight names follow the projection they implement:

* ``w_q/w_k/w_v/w_kv``  -- direct projections (mha, mqa, gqa, gta)
* ``w_dq/w_dkv``        -- down-projections to the query / KV latents
* ``w_uq/w_uk/w_uv``    -- up-projections from a latent to per-head tensors
* ``w_qr/w_kr``         -- partial rotary projections
* ``w_aq/w_ak/w_av``    -- tpa per-head coefficient projections
* ``w_cq/w_ck/w_cv``    -- tpa (or mfa query) component projections
* ``w_g``               -- optional output gate
* ``w_o``               -- attention output projection back to d

Grouped-latent variants (gla, and mlra with two branches) carry one latent
per group, named ``w_dkv_0``, ``w_uk_0``, ... per group index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import AttnConfig
from .errors import ConfigError
from .tensors import Array, Rng, gaussian_init


@dataclass
class WeightSet:
    variant: str
    tensors: dict[str, Array] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Array:
        try:
            return self.tensors[name]
        except KeyError:
            raise ConfigError(f"weight set for {self.variant!r} has no tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def element_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def weight_shapes(cfg: AttnConfig) -> dict[str, tuple[int, int]]:
    """Shape of every matrix the variant needs, keyed by weight name."""
    h, d, d_h = cfg.h, cfg.d, cfg.d_h
    v = cfg.variant
    shapes: dict[str, tuple[int, int]]
    if v == "mha":
        shapes = {"w_q": (d, h * d_h), "w_k": (d, h * d_h), "w_v": (d, h * d_h)}
    elif v in ("mqa", "gqa"):
        shapes = {"w_q": (d, h * d_h), "w_k": (d, cfg.g * d_h), "w_v": (d, cfg.g * d_h)}
    elif v == "mfa":
        shapes = {
            "w_cq": (d, cfg.d_cq),
            "w_uq": (cfg.d_cq, h * 2 * d_h),
            "w_k": (d, 2 * d_h),
            "w_v": (d, 2 * d_h),
        }
    elif v == "tpa":
        shapes = {
            "w_aq": (d, cfg.beta_q * h),
            "w_cq": (d, cfg.beta_q * d_h),
            "w_ak": (d, cfg.beta_kv * h),
            "w_ck": (d, cfg.beta_kv * d_h),
            "w_av": (d, cfg.beta_kv * h),
            "w_cv": (d, cfg.beta_kv * d_h),
        }
    elif v == "gta":
        shapes = {
            "w_q": (d, h * d_h),
            "w_kv": (d, cfg.g * d_h),
            "w_kr": (d, cfg.d_h_rope),
        }
    elif v in ("mla", "gla", "mlra"):
        shapes = {
            "w_dq": (d, cfg.d_cq),
            "w_uq": (cfg.d_cq, h * d_h),
            "w_qr": (cfg.d_cq, h * cfg.d_h_rope),
            "w_kr": (d, cfg.d_h_rope),
        }
        if grouped_latents(cfg):
            r = h // cfg.g
            dg = cfg.group_latent_dim
            for j in range(cfg.g):
                shapes[f"w_dkv_{j}"] = (d, dg)
                shapes[f"w_uk_{j}"] = (dg, r * d_h)
                shapes[f"w_uv_{j}"] = (dg, r * d_h)
        else:
            shapes["w_dkv"] = (d, cfg.d_c)
            shapes["w_uk"] = (cfg.d_c, h * d_h)
            shapes["w_uv"] = (cfg.d_c, h * d_h)
    else:  # pragma: no cover - config validation rejects unknown variants
        raise ConfigError(f"no weight table for variant {v!r}")
    if cfg.gated:
        shapes["w_g"] = (d, cfg.out_flat_dim)
    shapes["w_o"] = (cfg.out_flat_dim, d)
    return shapes


def grouped_latents(cfg: AttnConfig) -> bool:
    """True when the KV latent is stored as per-group matrices."""
    return cfg.variant == "gla" or (cfg.variant == "mlra" and cfg.branches == 2)


def build_weights(cfg: AttnConfig, sigma: float, rng: Rng, out_sigma: float | None = None) -> WeightSet:
    """Draw all matrices for the variant; ``out_sigma=0`` zero-inits w_o."""
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        s = sigma if name != "w_o" or out_sigma is None else out_sigma
        tensors[name] = gaussian_init(shape, s, rng.split(name))
    return WeightSet(cfg.variant, tensors)


def head_cols(i: int, width: int) -> slice:
    """Column slice of head i in a (latent x h*width) up-projection."""
    return slice(i * width, (i + 1) * width)
