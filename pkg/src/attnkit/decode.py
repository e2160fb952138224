"""Single-token decoding over a growing cache, in two interchangeable modes.

``naive`` materializes every per-head key and value from the cached state and
is the correctness oracle. ``absorbed`` folds the key up-projection into the
query and the value up-projection after the attention-weighted sum, so the
softmax runs directly against the shared latent rows; the cached state is
read once per device and never expanded per head. The two must agree to
1e-10 relative for every latent variant.

The same machinery drives the tensor-parallel simulator: an ``Ownership``
describes which heads / KV slots / latent slices a computing unit holds, and
``attend_local`` produces that unit's per-head contributions while the cache
counts every element it reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KvCache, latent_stream_name, stream_layout
from .config import AttnConfig, LATENT_VARIANTS
from .errors import IntegrityError, RoutingError
from .latent import calib_factors, latent_projections
from .tensors import Array, softmax_rows
from .weights import WeightSet
from .zoo import kv_head_count, kv_map, zoo_projections


@dataclass(frozen=True)
class LatentUnit:
    """One latent slice and the heads it serves; -1 means axis not split."""

    group: int
    block: int
    heads: tuple[int, ...]

    @property
    def stream(self) -> str:
        return latent_stream_name(self.group, self.block)


@dataclass(frozen=True)
class Ownership:
    """What one computing unit holds: output heads plus cached-state slices."""

    heads: tuple[int, ...]
    kv_slots: tuple[int, ...] = ()
    units: tuple[LatentUnit, ...] = ()


def full_ownership(cfg: AttnConfig) -> Ownership:
    all_heads = tuple(range(cfg.h))
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa", "tpa", "gta"):
        return Ownership(all_heads, kv_slots=tuple(range(kv_head_count(cfg))))
    if v == "mla":
        return Ownership(all_heads, units=(LatentUnit(-1, -1, all_heads),))
    if v == "gla":
        r = cfg.h // cfg.g
        units = tuple(
            LatentUnit(j, -1, tuple(range(j * r, (j + 1) * r))) for j in range(cfg.g)
        )
        return Ownership(all_heads, units=units)
    # mlra
    if cfg.branches == 4:
        units = tuple(LatentUnit(-1, b, all_heads) for b in range(4))
    else:
        half = cfg.h // 2
        units = tuple(
            LatentUnit(grp, b, tuple(range(grp * half, (grp + 1) * half)))
            for grp in range(2)
            for b in range(2)
        )
    return Ownership(all_heads, units=units)


def owned_stream_layout(cfg: AttnConfig, own: Ownership) -> dict[str, tuple[int, ...]]:
    """Cache layout for a computing unit holding ``own``."""
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa"):
        width = 2 * cfg.d_h if v == "mfa" else cfg.d_h
        return {"k": (len(own.kv_slots), width), "v": (len(own.kv_slots), width)}
    if v == "tpa":
        m = len(own.heads)
        return {
            "ka": (cfg.beta_kv, m),
            "kc": (cfg.beta_kv, cfg.d_h),
            "va": (cfg.beta_kv, m),
            "vc": (cfg.beta_kv, cfg.d_h),
        }
    if v == "gta":
        return {"v": (len(own.kv_slots), cfg.d_h), "rope": (cfg.d_h_rope,)}
    full = stream_layout(cfg)
    layout = {unit.stream: full[unit.stream] for unit in own.units}
    layout["rope"] = full["rope"]
    return layout


def new_cache(cfg: AttnConfig, own: Ownership | None = None, pos_offset: int = 0) -> KvCache:
    own = own or full_ownership(cfg)
    return KvCache(cfg.variant, owned_stream_layout(cfg, own), pos_offset)


# -- per-token state and queries ----------------------------------------------

def token_cache_rows(cfg: AttnConfig, w: WeightSet, h_t: Array, pos: int) -> dict[str, Array]:
    """Full-layout cache rows contributed by the token at absolute position pos."""
    hidden = np.asarray(h_t, dtype=np.float64).reshape(1, cfg.d)
    if cfg.variant in LATENT_VARIANTS:
        proj = latent_projections(cfg, w, hidden, [pos])
        rows = {name: arr[0] for name, arr in proj.latents.items()}
        rows["rope"] = proj.k_rope[0]
        return rows
    proj = zoo_projections(cfg, w, hidden, [pos])
    return {name: arr[0] for name, arr in proj.streams.items()}


def token_queries(cfg: AttnConfig, w: WeightSet, h_t: Array, pos: int) -> dict[str, Array]:
    hidden = np.asarray(h_t, dtype=np.float64).reshape(1, cfg.d)
    if cfg.variant in LATENT_VARIANTS:
        proj = latent_projections(cfg, w, hidden, [pos])
        return {"q_nope": proj.q_nope[0], "q_rope": proj.q_rope[0]}
    proj = zoo_projections(cfg, w, hidden, [pos])
    return {"q": proj.q[0]}


def append_owned(cfg: AttnConfig, own: Ownership, cache: KvCache, rows: dict[str, Array]) -> None:
    """Append this unit's slice of the full-layout token rows."""
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa"):
        sel = list(own.kv_slots)
        cache.append({"k": rows["k"][sel], "v": rows["v"][sel]})
    elif v == "tpa":
        sel = list(own.heads)
        cache.append(
            {
                "ka": rows["ka"][:, sel],
                "kc": rows["kc"],
                "va": rows["va"][:, sel],
                "vc": rows["vc"],
            }
        )
    elif v == "gta":
        cache.append({"v": rows["v"][list(own.kv_slots)], "rope": rows["rope"]})
    else:
        owned = {unit.stream: rows[unit.stream] for unit in own.units}
        owned["rope"] = rows["rope"]
        cache.append(owned)


# -- weight absorption ----------------------------------------------------------

def absorb_query(q_nope: Array, w_uk: Array) -> Array:
    """Fold per-head key up-projections into the queries.

    ``q_nope`` is (m, p) for m heads; ``w_uk`` holds those heads' column
    blocks, either as (latent, m*p) or already head-shaped (latent, m, p).
    Returns (m, latent): row i is q_i @ W_(i)^T, the query expressed in
    latent coordinates.
    """
    q_nope = np.asarray(q_nope, dtype=np.float64)
    m, p = q_nope.shape
    if w_uk.ndim == 2:
        w_uk = w_uk.reshape(w_uk.shape[0], m, p)
    return np.einsum("mp,cmp->mc", q_nope, w_uk)


def _unit_weight_slices(cfg: AttnConfig, w: WeightSet, unit: LatentUnit) -> tuple[Array, Array]:
    """(latent, m, d_h) key/value up-projection slices for one latent unit."""
    heads = list(unit.heads)
    if unit.group < 0:
        w_uk, w_uv = w["w_uk"], w["w_uv"]
        local = heads
    else:
        w_uk, w_uv = w[f"w_uk_{unit.group}"], w[f"w_uv_{unit.group}"]
        r = cfg.h // cfg.g
        local = [i - unit.group * r for i in heads]
    if unit.block >= 0:
        bs = cfg.block_dim
        w_uk = w_uk[unit.block * bs : (unit.block + 1) * bs]
        w_uv = w_uv[unit.block * bs : (unit.block + 1) * bs]
    d_lat = w_uk.shape[0]
    uk = w_uk.reshape(d_lat, -1, cfg.d_h)[:, local]
    uv = w_uv.reshape(d_lat, -1, cfg.d_h)[:, local]
    return uk, uv


def local_weights(cfg: AttnConfig, w: WeightSet, own: Ownership) -> dict[str, Array]:
    """Up-projection slices a computing unit needs for absorbed attention."""
    if cfg.variant not in LATENT_VARIANTS:
        return {}
    slices: dict[str, Array] = {}
    for unit in own.units:
        uk, uv = _unit_weight_slices(cfg, w, unit)
        slices[f"uk:{unit.stream}"] = uk
        slices[f"uv:{unit.stream}"] = uv
    return slices


# -- attention over cached state -------------------------------------------------

def attend_local(
    cfg: AttnConfig,
    local_w: dict[str, Array],
    own: Ownership,
    cache: KvCache,
    queries: dict[str, Array],
) -> list[tuple[int, Array]]:
    """Per-head output contributions of one computing unit for the newest token.

    Each cache stream the unit holds is read exactly once; shared streams are
    never expanded per head. Latent units emit one contribution per
    (head, branch) pair, so branch outputs stay separable for the reducer.
    """
    if cfg.variant in LATENT_VARIANTS:
        q_nope, q_rope = queries["q_nope"], queries["q_rope"]
        rope_hist = cache.read("rope")
        contribs: list[tuple[int, Array]] = []
        for unit in own.units:
            latent_hist = cache.read(unit.stream)
            heads = list(unit.heads)
            q_tilde = absorb_query(q_nope[heads], local_w[f"uk:{unit.stream}"])
            logits = cfg.tau * (q_tilde @ latent_hist.T + q_rope[heads] @ rope_hist.T)
            probs = softmax_rows(logits)
            mixed = probs @ latent_hist
            out = np.einsum("mc,cmp->mp", mixed, local_w[f"uv:{unit.stream}"])
            contribs.extend((head, out[j]) for j, head in enumerate(heads))
        return contribs

    q = queries["q"]
    heads = list(own.heads)
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa"):
        keys, values = cache.read("k"), cache.read("v")
        slot_of = kv_map(cfg)
        local_slot = {slot: i for i, slot in enumerate(own.kv_slots)}
        gather = [local_slot[slot_of[head]] for head in heads]
        k_sel, v_sel = keys[:, gather], values[:, gather]
    elif v == "tpa":
        ka, kc = cache.read("ka"), cache.read("kc")
        va, vc = cache.read("va"), cache.read("vc")
        k_sel = np.einsum("nbm,nbk->nmk", ka, kc) / cfg.beta_kv
        v_sel = np.einsum("nbm,nbk->nmk", va, vc) / cfg.beta_kv
    else:  # gta
        values = cache.read("v")
        rope_hist = cache.read("rope")
        slot_of = kv_map(cfg)
        local_slot = {slot: i for i, slot in enumerate(own.kv_slots)}
        gather = [local_slot[slot_of[head]] for head in heads]
        v_sel = values[:, gather]
        split = cfg.d_h - cfg.d_h_rope
        rope_part = np.broadcast_to(
            rope_hist[:, None, :], (rope_hist.shape[0], len(heads), cfg.d_h_rope)
        )
        k_sel = np.concatenate([v_sel[..., :split], rope_part], axis=-1)
    logits = cfg.tau * np.einsum("mk,nmk->mn", q[heads], k_sel)
    probs = softmax_rows(logits)
    out = np.einsum("mn,nmv->mv", probs, v_sel)
    return [(head, out[j]) for j, head in enumerate(heads)]


def reduce_contributions(
    cfg: AttnConfig, contribs: list[tuple[int, Array]]
) -> tuple[Array, str]:
    """Combine per-head contributions; returns the output and reduction kind.

    ``concat`` means every head was produced by exactly one contribution
    (all-gather shape); ``sum`` means heads accumulate several (all-reduce
    shape, the mlra branch reduction). The mlra output rescale is applied
    once here, after the branch sum.
    """
    out = np.zeros((cfg.h, cfg.head_out_dim))
    counts = np.zeros(cfg.h, dtype=int)
    for head, vec in contribs:
        out[head] += vec
        counts[head] += 1
    if (counts == 0).any():
        missing = np.nonzero(counts == 0)[0].tolist()
        raise IntegrityError(f"no contribution for heads {missing}")
    kind = "concat" if (counts == 1).all() else "sum"
    if cfg.variant == "mlra":
        out *= calib_factors(cfg).alpha_attn
    return out, kind


# -- decode steps -----------------------------------------------------------------

def absorbed_decode_step(
    cfg: AttnConfig, w: WeightSet, cache: KvCache, h_t: Array
) -> tuple[Array, KvCache]:
    """Cache-append plus one attention step without per-head KV expansion.

    For the latent family this is query-side absorption, shared-latent
    attention, then the value up-projection on the mixed latent. Baseline
    variants have nothing to absorb; they decode directly on their cached
    heads.
    """
    pos = cache.pos_offset + cache.n
    own = full_ownership(cfg)
    append_owned(cfg, own, cache, token_cache_rows(cfg, w, h_t, pos))
    queries = token_queries(cfg, w, h_t, pos)
    contribs = attend_local(cfg, local_weights(cfg, w, own), own, cache, queries)
    out, _ = reduce_contributions(cfg, contribs)
    return out, cache


def naive_decode_step(
    cfg: AttnConfig, w: WeightSet, cache: KvCache, h_t: Array
) -> tuple[Array, KvCache]:
    """Reference decode: materialize every per-head key/value over the prefix."""
    if cfg.variant not in LATENT_VARIANTS:
        raise RoutingError(
            f"naive_decode_step covers the latent family; {cfg.variant!r} decodes directly"
        )
    pos = cache.pos_offset + cache.n
    own = full_ownership(cfg)
    append_owned(cfg, own, cache, token_cache_rows(cfg, w, h_t, pos))
    queries = token_queries(cfg, w, h_t, pos)
    q_nope, q_rope = queries["q_nope"], queries["q_rope"]
    rope_hist = cache.read("rope")
    out = np.zeros((cfg.h, cfg.d_h))
    counts = np.zeros(cfg.h, dtype=int)
    for unit in full_ownership(cfg).units:
        latent_hist = cache.read(unit.stream)
        uk, uv = _unit_weight_slices(cfg, w, unit)
        for j, head in enumerate(unit.heads):
            k_head = latent_hist @ uk[:, j]            # (n, d_h) materialized
            v_head = latent_hist @ uv[:, j]
            logits = cfg.tau * (
                q_nope[head] @ k_head.T + q_rope[head] @ rope_hist.T
            )
            out[head] += softmax_rows(logits[None])[0] @ v_head
            counts[head] += 1
    if cfg.variant == "mlra":
        out *= calib_factors(cfg).alpha_attn
    return out, cache


def decode_step(
    cfg: AttnConfig, w: WeightSet, cache: KvCache, h_t: Array, mode: str = "absorbed"
) -> tuple[Array, KvCache]:
    if mode == "absorbed":
        return absorbed_decode_step(cfg, w, cache, h_t)
    if mode == "naive":
        return naive_decode_step(cfg, w, cache, h_t)
    raise RoutingError(f"unknown decode mode {mode!r}")
