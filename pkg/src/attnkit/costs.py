"""Closed-form decode-cost accounting, in exact rational arithmetic.

Loads and cache sizes are expressed in units of d_h elements per token per
device; parameter counts are exact integers cross-checkable against weight
enumeration; arithmetic intensity is an exact fraction (FLOPs per byte of
cache traffic at two bytes per element) that never depends on the context
length. Floats appear only at the roofline boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .config import AttnConfig, TP_DEGREES
from .errors import ConfigError

CACHE_BYTES_PER_ELEMENT = 2  # bf16 cache traffic, the basis of the intensity table


def _check_phi(phi: int) -> None:
    if phi not in TP_DEGREES:
        raise ConfigError(f"unsupported TP degree {phi}; supported: {TP_DEGREES}")


def param_count(cfg: AttnConfig) -> int:
    """Attention parameters per layer (including the output projection)."""
    h, d, d_h = cfg.h, cfg.d, cfg.d_h
    v = cfg.variant
    if v == "mha":
        total = 4 * d * h * d_h
    elif v in ("mqa", "gqa"):
        total = 2 * d * d_h * (h + cfg.g)
    elif v == "mfa":
        total = cfg.d_cq * (d + h * 2 * d_h) + 2 * d * 2 * d_h + d * h * 2 * d_h
    elif v == "tpa":
        total = d * (cfg.beta_q + 2 * cfg.beta_kv) * (h + d_h) + d * h * d_h
    elif v == "gta":
        total = 2 * d * h * d_h + d * cfg.g * d_h + d * cfg.d_h_rope
    elif v in ("mla", "gla", "mlra"):
        total = cfg.d_cq * (d + h * d_h + h * cfg.d_h_rope) + d * cfg.d_h_rope
        uk_uv_heads = h if (v == "mla" or (v == "mlra" and cfg.branches == 4)) else h // cfg.g
        total += cfg.d_c * d + 2 * cfg.d_c * uk_uv_heads * d_h
        total += d * h * d_h
    else:  # pragma: no cover
        raise ConfigError(f"no parameter formula for {v!r}")
    if cfg.gated:
        total += d * cfg.out_flat_dim
    return total


def kv_cache_per_token(cfg: AttnConfig) -> Fraction:
    """Cached elements per token, in units of d_h."""
    v = cfg.variant
    if v == "mha":
        elements = 2 * cfg.h * cfg.d_h
    elif v in ("mqa", "gqa"):
        elements = 2 * cfg.g * cfg.d_h
    elif v == "mfa":
        elements = 4 * cfg.d_h
    elif v == "tpa":
        elements = 2 * cfg.beta_kv * (cfg.h + cfg.d_h)
    elif v == "gta":
        elements = cfg.g * cfg.d_h + cfg.d_h_rope
    else:
        elements = cfg.d_c + cfg.d_h_rope
    return Fraction(elements, cfg.d_h)


def per_device_load(cfg: AttnConfig, phi: int) -> Fraction:
    """Cache elements one device reads per past token per step, in d_h units.

    Sharding rules: head-sharded caches divide by phi down to one KV head;
    a single shared head (mqa, mfa) or a single latent (mla) is replicated
    on every device; grouped latents divide until one group per device;
    mlra divides until one block per device (four-way), after which devices
    pair up on blocks and the load plateaus. tpa shards only coefficients,
    so its component tensors are a replicated floor.
    """
    _check_phi(phi)
    d_h = cfg.d_h
    v = cfg.variant
    if v == "mha":
        return Fraction(2 * cfg.h, phi)
    if v == "mqa":
        return Fraction(2)
    if v == "gqa":
        return Fraction(2 * cfg.g, min(phi, cfg.g))
    if v == "mfa":
        return Fraction(4)
    if v == "tpa":
        coeff = Fraction(2 * cfg.beta_kv * cfg.h, phi * d_h)
        return Fraction(2 * cfg.beta_kv) + coeff
    if v == "gta":
        return Fraction(cfg.g, min(phi, cfg.g)) + Fraction(cfg.d_h_rope, d_h)
    if v == "mla":
        return Fraction(cfg.d_c + cfg.d_h_rope, d_h)
    if v == "gla":
        return Fraction(cfg.d_c, min(phi, cfg.g) * d_h) + Fraction(cfg.d_h_rope, d_h)
    if v == "mlra":
        return Fraction(cfg.d_c, min(phi, 4) * d_h) + Fraction(cfg.d_h_rope, d_h)
    raise ConfigError(f"no loading rule for {v!r}")  # pragma: no cover


def decode_flops_per_device(cfg: AttnConfig, phi: int, n: int) -> Fraction:
    """Attention FLOPs one device spends per decode step over an n-token cache.

    Counts the score and the value-mixing products (2 multiply-adds per
    element) over the state the device actually attends to; tpa adds the
    on-the-fly reconstruction of its local keys and values.
    """
    _check_phi(phi)
    v = cfg.variant
    heads = Fraction(cfg.h, phi)
    if v in ("mha", "mqa", "gqa", "gta"):
        return heads * 4 * n * cfg.d_h
    if v == "mfa":
        return heads * 8 * n * cfg.d_h
    if v == "tpa":
        return heads * (4 * n * cfg.beta_kv * cfg.d_h + 4 * n * cfg.d_h)
    if v == "mla":
        return heads * (4 * n * cfg.d_c + 2 * n * cfg.d_h_rope)
    if v == "gla":
        return heads * (4 * n * Fraction(cfg.d_c, cfg.g) + 2 * n * cfg.d_h_rope)
    # mlra: one (head, branch) pair costs what one block-wide attention costs
    pairs = Fraction(cfg.branches * cfg.h, phi)
    return pairs * (4 * n * Fraction(cfg.d_c, 4) + 2 * n * cfg.d_h_rope)


def arithmetic_intensity(cfg: AttnConfig, n: int = 1) -> Fraction:
    """Decode-attention FLOPs per byte of cache traffic (exact; n cancels).

    Evaluated per device at the mechanism's natural sharding: whole state
    for the unshardable mechanisms, one group latent for gla, one block
    branch for mlra. Cache bytes are two per element.
    """
    if n < 1:
        raise ConfigError(f"arithmetic intensity needs n >= 1, got {n}")
    h, d_h, dr = cfg.h, cfg.d_h, cfg.d_h_rope
    v = cfg.variant
    if v == "mha":
        flops, elements = Fraction(4 * n * h * d_h), Fraction(2 * n * h * d_h)
    elif v == "mqa":
        flops, elements = Fraction(4 * n * h * d_h), Fraction(2 * n * d_h)
    elif v == "gqa":
        flops, elements = Fraction(4 * n * h * d_h), Fraction(2 * n * cfg.g * d_h)
    elif v == "mfa":
        flops, elements = Fraction(8 * n * h * d_h), Fraction(4 * n * d_h)
    elif v == "tpa":
        flops = Fraction(4 * n * h * cfg.beta_kv * d_h + 4 * n * h * d_h)
        elements = Fraction(2 * n * cfg.beta_kv * (h + d_h))
    elif v == "gta":
        flops, elements = Fraction(4 * n * h * d_h), Fraction(n * (cfg.g * d_h + dr))
    elif v == "mla":
        flops = Fraction(4 * n * h * cfg.d_c + 2 * n * h * dr)
        elements = Fraction(n * (cfg.d_c + dr))
    elif v == "gla":
        seg = Fraction(cfg.d_c, cfg.g)
        flops = Fraction(h, cfg.g) * (4 * n * seg + 2 * n * dr)
        elements = n * (seg + dr)
    else:  # mlra: one block branch per device; two-branch serves half the heads
        seg = Fraction(cfg.d_c, 4)
        serving = Fraction(h) if cfg.branches == 4 else Fraction(h, 2)
        flops = serving * (4 * n * seg + 2 * n * dr)
        elements = n * (seg + dr)
    return flops / (CACHE_BYTES_PER_ELEMENT * elements)


def ai_asymptotic(cfg: AttnConfig) -> tuple[Fraction, str]:
    """Large-dimension limit of the intensity and its display tag.

    Drops the partial-rotary correction terms; for mechanisms without such
    terms this equals the exact value.
    """
    v = cfg.variant
    h, g = cfg.h, cfg.g
    if v == "mha":
        return Fraction(1), "1"
    if v == "mqa":
        return Fraction(h), "h"
    if v == "gqa":
        return Fraction(h, g), f"h/{g}" if g > 1 else "h"
    if v == "mfa":
        return Fraction(h), "h"
    if v == "tpa":
        value = Fraction((1 + cfg.beta_kv) * h * cfg.d_h, cfg.beta_kv * (h + cfg.d_h))
        return value, "(1+beta_kv)*h*d_h/(beta_kv*(h+d_h))"
    if v == "gta":
        return Fraction(2 * h, g), _h_tag(Fraction(2, g))
    if v == "mla":
        return Fraction(2 * h), "2h"
    if v == "gla":
        return Fraction(2 * h, g), _h_tag(Fraction(2, g))
    # mlra: two-branch halves the score work per block pair, four-branch does not
    coeff = Fraction(2) if cfg.branches == 4 else Fraction(1)
    return coeff * h, _h_tag(coeff)


def _h_tag(coeff: Fraction) -> str:
    if coeff == 1:
        return "h"
    if coeff.denominator == 1:
        return f"{coeff.numerator}h"
    if coeff.numerator == 1:
        return f"h/{coeff.denominator}"
    return f"{coeff.numerator}h/{coeff.denominator}"


# -- roofline ---------------------------------------------------------------------

@dataclass(frozen=True)
class HardwareModel:
    hbm_bandwidth: float  # bytes / s
    peak_flops: float     # flops / s
    bytes_per_element: int = 2

    def __post_init__(self):
        if self.hbm_bandwidth <= 0 or self.peak_flops <= 0 or self.bytes_per_element <= 0:
            raise ConfigError("hardware model values must all be positive")


def roofline_decode_time(bytes_moved: float, flops: float, hw: HardwareModel) -> tuple[float, str]:
    """Bandwidth-ideal step time and the active regime.

    The estimate is the roofline bound max(bytes/bandwidth, flops/peak);
    measured kernels land above it, so ratios derived here are upper bounds
    on achievable speedups, not predictions of measured ones.
    """
    if bytes_moved < 0 or flops < 0 or (bytes_moved == 0 and flops == 0):
        raise ConfigError("roofline needs non-negative bytes/flops, not both zero")
    t_mem = bytes_moved / hw.hbm_bandwidth
    t_cmp = flops / hw.peak_flops
    return max(t_mem, t_cmp), ("memory-bound" if t_mem >= t_cmp else "compute-bound")


def decode_time(cfg: AttnConfig, phi: int, n: int, hw: HardwareModel) -> tuple[float, str]:
    """Roofline time for one decode step at context length n on one device."""
    bytes_moved = float(per_device_load(cfg, phi) * cfg.d_h * n * hw.bytes_per_element)
    flops = float(decode_flops_per_device(cfg, phi, n))
    return roofline_decode_time(bytes_moved, flops, hw)


# -- deployment placement -----------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    tp: int
    dp: int
    load_per_device: Fraction  # d_h units
    weight_copies: int         # attention weights are replicated once per DP rank


def placement(cfg: AttnConfig, total_devices: int) -> Placement:
    """Smallest TP degree that reaches the mechanism's loading floor.

    Sharding beyond the floor buys no traffic reduction, so leftover devices
    serve extra requests as data-parallel replicas instead.
    """
    candidates = [p for p in TP_DEGREES if p <= total_devices and total_devices % p == 0]
    if not candidates:
        raise ConfigError(f"no supported TP degree divides {total_devices} devices")
    floor = per_device_load(cfg, max(candidates))
    tp = next(p for p in candidates if per_device_load(cfg, p) == floor)
    return Placement(tp, total_devices // tp, floor, total_devices // tp)


# -- reports ---------------------------------------------------------------------

@dataclass
class CostReport:
    variant: str
    label: str
    params_per_layer: int
    kv_cache_per_token: Fraction          # d_h units
    per_device_load: dict[int, Fraction]  # phi -> d_h units
    intensity: Fraction
    intensity_asymptotic: Fraction
    intensity_tag: str

    def as_row(self) -> dict[str, str]:
        row = {
            "method": self.label,
            "params_per_layer": str(self.params_per_layer),
            "kv_cache_per_token_dh": fraction_str(self.kv_cache_per_token),
        }
        for phi, load in self.per_device_load.items():
            row[f"load_dh_tp{phi}"] = fraction_str(load)
        row["arithmetic_intensity"] = fraction_str(self.intensity)
        row["intensity_asymptotic"] = f"~{self.intensity_tag}"
        return row


def cost_report(cfg: AttnConfig, label: str | None = None) -> CostReport:
    value, tag = ai_asymptotic(cfg)
    return CostReport(
        variant=cfg.variant,
        label=label or cfg.variant,
        params_per_layer=param_count(cfg),
        kv_cache_per_token=kv_cache_per_token(cfg),
        per_device_load={phi: per_device_load(cfg, phi) for phi in TP_DEGREES},
        intensity=arithmetic_intensity(cfg),
        intensity_asymptotic=value,
        intensity_tag=tag,
    )


def loading_table_rows(cfgs: dict[str, AttnConfig], order) -> list[dict[str, str]]:
    """Parameters, KV cache, and per-device loading; one row per mechanism."""
    rows = []
    for label in order:
        cfg = cfgs[label]
        row = {
            "method": label,
            "params_per_layer": str(param_count(cfg)),
            "kv_cache_per_token_dh": fraction_str(kv_cache_per_token(cfg)),
        }
        for phi in TP_DEGREES:
            row[f"load_per_token_per_device_dh_tp{phi}"] = fraction_str(per_device_load(cfg, phi))
        rows.append(row)
    return rows


def intensity_table_rows(cfgs: dict[str, AttnConfig], order) -> list[dict[str, str]]:
    rows = []
    for label in order:
        cfg = cfgs[label]
        value, tag = ai_asymptotic(cfg)
        rows.append(
            {
                "method": label,
                "intensity_flops_per_byte": fraction_str(arithmetic_intensity(cfg)),
                "intensity_asymptotic_flops_per_byte": fraction_str(value),
                "intensity_asymptotic_form": f"~{tag}",
            }
        )
    return rows


def rows_to_csv(rows: list[dict[str, str]]) -> str:
    """RFC-4180-style CSV text (minimal quoting, comma separated)."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def fraction_str(x: Fraction) -> str:
    """Exact decimal when the denominator is 2^a 5^b, else 'p/q'."""
    den = x.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{x.numerator}/{x.denominator}"
    k = max(twos, fives)
    scaled = x.numerator * 10**k // x.denominator
    if k == 0:
        return str(scaled)
    sign = "-" if scaled < 0 else ""
    digits = str(abs(scaled)).rjust(k + 1, "0")
    whole, frac = digits[:-k], digits[-k:].rstrip("0")
    return f"{sign}{whole}.{frac}" if frac else f"{sign}{whole}"
