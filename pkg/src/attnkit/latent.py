"""Latent-attention mechanisms: mla, grouped latents (gla), and the
branch-summed low-rank family (mlra).

All three share the same query path (down-project, normalize, up-project,
partial rotary encode) and cache a compressed KV state per token. They differ
in how the latent is split and where the softmax sits:

* mla  -- one latent; per-head keys/values are up-projected from all of it.
* gla  -- g independent group latents; each serves h/g heads.
* mlra -- the latent is cut into four blocks and each block runs its own
  softmax ("branch"); branch outputs are summed and rescaled. The
  four-branch form feeds every block to every head; the two-branch form
  keeps gla's head grouping and runs the two blocks of each group latent
  as that group's branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .cache import PrefillOutput, cache_from_streams, latent_stream_name
from .config import AttnConfig, LATENT_VARIANTS
from .errors import ConfigError, RoutingError
from .rope import rope_rotate
from .tensors import Array, rmsnorm, softmax_rows
from .weights import WeightSet, head_cols


# -- variance-calibration scale factors --------------------------------------

@dataclass(frozen=True)
class ScaleFactors:
    alpha_q: float
    alpha_kv: float
    alpha_attn: float


def calib_factors_squared(cfg: AttnConfig) -> tuple[Fraction, Fraction, Fraction]:
    """Exact squares of the calibration factors (all 1 when scaling is off).

    The query latent is rescaled so up-projected queries recover the variance
    a direct d-wide projection would have; the KV latent likewise, measured
    against the width actually feeding each key: d_c for mla, d_c/g for one
    gla group, d_c/4 for one mlra block. Summing b uncorrelated branch
    outputs multiplies variance by b, so mlra outputs carry 1/sqrt(b).
    """
    if not cfg.scaling:
        return Fraction(1), Fraction(1), Fraction(1)
    if cfg.variant == "mla":
        return Fraction(cfg.d, cfg.d_cq), Fraction(cfg.d, cfg.d_c), Fraction(1)
    if cfg.variant == "gla":
        return Fraction(cfg.d, cfg.d_cq), Fraction(cfg.g * cfg.d, cfg.d_c), Fraction(1)
    if cfg.variant == "mlra":
        return (
            Fraction(cfg.d, cfg.d_cq),
            Fraction(4 * cfg.d, cfg.d_c),
            Fraction(1, cfg.branches),
        )
    raise ConfigError(f"no calibration factors for variant {cfg.variant!r}")


def calib_factors(cfg: AttnConfig) -> ScaleFactors:
    if cfg.variant not in LATENT_VARIANTS:
        return ScaleFactors(1.0, 1.0, 1.0)
    q2, kv2, attn2 = calib_factors_squared(cfg)
    return ScaleFactors(float(q2) ** 0.5, float(kv2) ** 0.5, float(attn2) ** 0.5)


# -- head grouping and block identities ---------------------------------------

def group_map(i: int, h: int) -> tuple[int, int]:
    """Two-group head mapping: group id and index within the group."""
    if h % 2 != 0:
        raise ConfigError(f"group_map: head count {h} must be even")
    if not 0 <= i < h:
        raise ConfigError(f"group_map: head index {i} out of range for h={h}")
    grp = 0 if i < h // 2 else 1
    return grp, i - grp * (h // 2)


def block_reconstruct(
    c_latent: Array,
    w_uk: Array,
    w_uv: Array,
    n_blocks: int,
    head: int,
    d_h: int,
) -> tuple[Array, Array]:
    """Rebuild head ``head``'s keys and values as a sum of block products.

    Splitting the latent columns and the up-projection rows into matching
    blocks leaves the product unchanged: sum_b C_(b) W_(b),(i) equals
    C W_(i) up to float reassociation. Blocks are summed in ascending order.
    """
    d_lat = c_latent.shape[1]
    if n_blocks <= 0 or d_lat % n_blocks != 0:
        raise ConfigError(f"block_reconstruct: latent width {d_lat} not divisible into {n_blocks} blocks")
    bs = d_lat // n_blocks
    cols = head_cols(head, d_h)
    k = np.zeros((c_latent.shape[0], d_h))
    v = np.zeros((c_latent.shape[0], d_h))
    for b in range(n_blocks):
        rows = slice(b * bs, (b + 1) * bs)
        c_b = c_latent[:, rows]
        k += c_b @ w_uk[rows, cols]
        v += c_b @ w_uv[rows, cols]
    return k, v


# -- shared projections --------------------------------------------------------

@dataclass
class LatentProjections:
    """Everything the latent family derives from hidden states.

    ``latents`` is keyed by cache stream name at the mechanism's finest
    sharding granularity (whole latent, per group, or per block).
    """

    q_nope: Array          # (n, h, d_h)
    q_rope: Array          # (n, h, d_h_rope)
    k_rope: Array          # (n, d_h_rope)
    latents: dict[str, Array]


def latent_projections(cfg: AttnConfig, w: WeightSet, hidden: Array, positions) -> LatentProjections:
    if cfg.variant not in LATENT_VARIANTS:
        raise RoutingError(f"latent projections requested for zoo variant {cfg.variant!r}")
    n = hidden.shape[0]
    positions = list(positions)
    sf = calib_factors(cfg)
    c_q = sf.alpha_q * rmsnorm(hidden @ w["w_dq"])
    q_nope = (c_q @ w["w_uq"]).reshape(n, cfg.h, cfg.d_h)
    q_rope = rope_rotate(
        (c_q @ w["w_qr"]).reshape(n, cfg.h, cfg.d_h_rope), positions, cfg.d_h_rope
    )
    k_rope = rope_rotate(hidden @ w["w_kr"], positions, cfg.d_h_rope)

    latents: dict[str, Array] = {}
    if cfg.variant == "mla":
        latents["latent"] = sf.alpha_kv * rmsnorm(hidden @ w["w_dkv"])
    elif cfg.variant == "gla":
        for j in range(cfg.g):
            latents[latent_stream_name(j, -1)] = sf.alpha_kv * rmsnorm(hidden @ w[f"w_dkv_{j}"])
    elif cfg.branches == 4:
        c_kv = sf.alpha_kv * rmsnorm(hidden @ w["w_dkv"])
        bs = cfg.block_dim
        for b in range(4):
            latents[latent_stream_name(-1, b)] = c_kv[:, b * bs : (b + 1) * bs]
    else:  # mlra-2: two blocks within each of the two group latents
        bs = cfg.block_dim
        for grp in range(2):
            c_grp = sf.alpha_kv * rmsnorm(hidden @ w[f"w_dkv_{grp}"])
            for b in range(2):
                latents[latent_stream_name(grp, b)] = c_grp[:, b * bs : (b + 1) * bs]
    return LatentProjections(q_nope, q_rope, k_rope, latents)


# -- prefill -------------------------------------------------------------------

def _causal_softmax(logits: Array) -> Array:
    """Softmax over the key axis of (h, n_q, n_k) logits with a causal mask."""
    h, nq, nk = logits.shape
    mask = np.triu(np.ones((nq, nk), dtype=bool), k=1)
    masked = np.where(mask[None, :, :], -np.inf, logits)
    return softmax_rows(masked)


def latent_prefill(cfg: AttnConfig, w: WeightSet, hidden: Array, pos_offset: int = 0) -> PrefillOutput:
    """Causal full-sequence forward pass for mla / gla / mlra."""
    if cfg.variant not in LATENT_VARIANTS:
        raise RoutingError(
            f"variant {cfg.variant!r} belongs to the baseline zoo, not latent_prefill"
        )
    n = hidden.shape[0]
    positions = [pos_offset + t for t in range(n)]
    proj = latent_projections(cfg, w, hidden, positions)
    rope_logits = np.einsum("qhr,kr->hqk", proj.q_rope, proj.k_rope)
    out = np.zeros((n, cfg.h, cfg.d_h))

    if cfg.variant == "mla":
        c_kv = proj.latents["latent"]
        k_nope = (c_kv @ w["w_uk"]).reshape(n, cfg.h, cfg.d_h)
        values = (c_kv @ w["w_uv"]).reshape(n, cfg.h, cfg.d_h)
        logits = cfg.tau * (np.einsum("qhp,khp->hqk", proj.q_nope, k_nope) + rope_logits)
        probs = _causal_softmax(logits)
        out = np.einsum("hqk,khp->qhp", probs, values)
    elif cfg.variant == "gla":
        r = cfg.h // cfg.g
        for j in range(cfg.g):
            heads = slice(j * r, (j + 1) * r)
            c_j = proj.latents[latent_stream_name(j, -1)]
            k_nope = (c_j @ w[f"w_uk_{j}"]).reshape(n, r, cfg.d_h)
            values = (c_j @ w[f"w_uv_{j}"]).reshape(n, r, cfg.d_h)
            logits = cfg.tau * (
                np.einsum("qhp,khp->hqk", proj.q_nope[:, heads], k_nope) + rope_logits[heads]
            )
            out[:, heads] = np.einsum("hqk,khp->qhp", _causal_softmax(logits), values)
    elif cfg.branches == 4:
        bs = cfg.block_dim
        for b in range(4):
            c_b = proj.latents[latent_stream_name(-1, b)]
            rows = slice(b * bs, (b + 1) * bs)
            k_b = (c_b @ w["w_uk"][rows]).reshape(n, cfg.h, cfg.d_h)
            v_b = (c_b @ w["w_uv"][rows]).reshape(n, cfg.h, cfg.d_h)
            logits = cfg.tau * (np.einsum("qhp,khp->hqk", proj.q_nope, k_b) + rope_logits)
            out += np.einsum("hqk,khp->qhp", _causal_softmax(logits), v_b)
        out *= calib_factors(cfg).alpha_attn
    else:  # mlra-2
        bs = cfg.block_dim
        half = cfg.h // 2
        for grp in range(2):
            heads = slice(grp * half, (grp + 1) * half)
            for b in range(2):
                c_gb = proj.latents[latent_stream_name(grp, b)]
                rows = slice(b * bs, (b + 1) * bs)
                k_gb = (c_gb @ w[f"w_uk_{grp}"][rows]).reshape(n, half, cfg.d_h)
                v_gb = (c_gb @ w[f"w_uv_{grp}"][rows]).reshape(n, half, cfg.d_h)
                logits = cfg.tau * (
                    np.einsum("qhp,khp->hqk", proj.q_nope[:, heads], k_gb) + rope_logits[heads]
                )
                out[:, heads] += np.einsum("hqk,khp->qhp", _causal_softmax(logits), v_gb)
        out *= calib_factors(cfg).alpha_attn

    streams = dict(proj.latents)
    streams["rope"] = proj.k_rope
    return PrefillOutput(out, cache_from_streams(cfg, streams, pos_offset))
