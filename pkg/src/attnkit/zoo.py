"""Baseline attention mechanisms: mha, mqa, gqa, mfa, tpa, gta.

Shared K/V heads are broadcast to query heads by index gather rather than
physical replication; the arithmetic is identical either way, which the
tests pin down bitwise. Causal masking is applied as -inf pre-softmax
logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import PrefillOutput, cache_from_streams
from .config import AttnConfig, ZOO_VARIANTS
from .errors import RoutingError
from .rope import rope_rotate
from .tensors import Array, rmsnorm, sigmoid, silu, softmax_rows
from .weights import WeightSet


def kv_head_count(cfg: AttnConfig) -> int:
    if cfg.variant == "mha":
        return cfg.h
    if cfg.variant in ("mfa", "mqa"):
        return 1
    if cfg.variant in ("gqa", "gta"):
        return cfg.g
    if cfg.variant == "tpa":
        return cfg.h  # coefficient column per query head
    raise RoutingError(f"variant {cfg.variant!r} has no shared-KV head layout")


def kv_map(cfg: AttnConfig) -> np.ndarray:
    """Cached KV slot used by each query head (RepeatInterleave layout)."""
    reps = cfg.h // kv_head_count(cfg)
    return np.arange(cfg.h) // reps


@dataclass
class ZooProjections:
    q: Array                    # (n, h, key width)
    streams: dict[str, Array]   # cacheable per-token state


def zoo_projections(cfg: AttnConfig, w: WeightSet, hidden: Array, positions) -> ZooProjections:
    if cfg.variant not in ZOO_VARIANTS:
        raise RoutingError(f"zoo projections requested for latent variant {cfg.variant!r}")
    n = hidden.shape[0]
    positions = list(positions)
    v = cfg.variant
    if v in ("mha", "mqa", "gqa"):
        q = rope_rotate((hidden @ w["w_q"]).reshape(n, cfg.h, cfg.d_h), positions)
        kv_heads = kv_head_count(cfg)
        k = rope_rotate((hidden @ w["w_k"]).reshape(n, kv_heads, cfg.d_h), positions)
        val = (hidden @ w["w_v"]).reshape(n, kv_heads, cfg.d_h)
        return ZooProjections(q, {"k": k, "v": val})
    if v == "mfa":
        c_q = rmsnorm(hidden @ w["w_cq"])
        q = rope_rotate((c_q @ w["w_uq"]).reshape(n, cfg.h, 2 * cfg.d_h), positions)
        k = rope_rotate((hidden @ w["w_k"]).reshape(n, 1, 2 * cfg.d_h), positions)
        val = (hidden @ w["w_v"]).reshape(n, 1, 2 * cfg.d_h)
        return ZooProjections(q, {"k": k, "v": val})
    if v == "tpa":
        qa = (hidden @ w["w_aq"]).reshape(n, cfg.beta_q, cfg.h)
        qc = rope_rotate((hidden @ w["w_cq"]).reshape(n, cfg.beta_q, cfg.d_h), positions)
        q = np.einsum("nbh,nbk->nhk", qa, qc) / cfg.beta_q
        ka = (hidden @ w["w_ak"]).reshape(n, cfg.beta_kv, cfg.h)
        kc = rope_rotate((hidden @ w["w_ck"]).reshape(n, cfg.beta_kv, cfg.d_h), positions)
        va = (hidden @ w["w_av"]).reshape(n, cfg.beta_kv, cfg.h)
        vc = (hidden @ w["w_cv"]).reshape(n, cfg.beta_kv, cfg.d_h)
        return ZooProjections(q, {"ka": ka, "kc": kc, "va": va, "vc": vc})
    if v == "gta":
        split = cfg.d_h - cfg.d_h_rope
        q_full = (hidden @ w["w_q"]).reshape(n, cfg.h, cfg.d_h)
        q = np.concatenate(
            [q_full[..., :split], rope_rotate(q_full[..., split:], positions)], axis=-1
        )
        k_rope = rope_rotate(hidden @ w["w_kr"], positions)
        val = (hidden @ w["w_kv"]).reshape(n, cfg.g, cfg.d_h)
        return ZooProjections(q, {"v": val, "rope": k_rope})
    raise RoutingError(f"no projections for variant {v!r}")  # pragma: no cover


def materialize_kv(cfg: AttnConfig, streams: dict[str, Array]) -> tuple[Array, Array]:
    """Per-KV-slot key and value tensors (n, slots, width) from cached state."""
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa"):
        return streams["k"], streams["v"]
    if v == "tpa":
        k = np.einsum("nbh,nbk->nhk", streams["ka"], streams["kc"]) / cfg.beta_kv
        val = np.einsum("nbh,nbk->nhk", streams["va"], streams["vc"]) / cfg.beta_kv
        return k, val
    if v == "gta":
        val = streams["v"]
        split = cfg.d_h - cfg.d_h_rope
        n, slots = val.shape[0], val.shape[1]
        rope_part = np.broadcast_to(streams["rope"][:, None, :], (n, slots, cfg.d_h_rope))
        k = np.concatenate([val[..., :split], rope_part], axis=-1)
        return k, val
    raise RoutingError(f"variant {v!r} does not materialize shared KV heads")


def prefill(cfg: AttnConfig, w: WeightSet, hidden: Array, pos_offset: int = 0) -> PrefillOutput:
    """Causal full-sequence forward pass for the baseline mechanisms."""
    if cfg.variant not in ZOO_VARIANTS:
        raise RoutingError(
            f"variant {cfg.variant!r} is latent-attention; use latent_prefill"
        )
    n = hidden.shape[0]
    positions = [pos_offset + t for t in range(n)]
    proj = zoo_projections(cfg, w, hidden, positions)
    keys, values = materialize_kv(cfg, proj.streams)
    gather = kv_map(cfg)
    k_sel = keys[:, gather, :]     # (n, h, kd) broadcast by index
    v_sel = values[:, gather, :]
    logits = cfg.tau * np.einsum("qhk,thk->hqt", proj.q, k_sel)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    probs = softmax_rows(np.where(mask[None], -np.inf, logits))
    out = np.einsum("hqt,thv->qhv", probs, v_sel)
    return PrefillOutput(out, cache_from_streams(cfg, proj.streams, pos_offset))


def gated_output(hidden: Array, out_flat: Array, w_g: Array) -> Array:
    """Sigmoid output gate: out_flat element-scaled by sigmoid(hidden @ w_g)."""
    return out_flat * sigmoid(hidden @ w_g)


def block_forward(
    hidden: Array,
    attn_fn,
    w_o_attn: Array,
    w_mlp_1: Array,
    w_mlp_2: Array,
    w_o_mlp: Array,
    w_gate: Array | None = None,
) -> Array:
    """One pre-norm transformer block around an attention callable.

    ``attn_fn`` maps normalized hidden states (n, d) to flat per-token
    attention outputs (n, h * head_out_dim). The optional output gate is
    driven by the un-normalized block input.
    """
    normed = rmsnorm(hidden)
    attn_flat = attn_fn(normed)
    if w_gate is not None:
        attn_flat = gated_output(hidden, attn_flat, w_gate)
    hidden = hidden + attn_flat @ w_o_attn
    normed = rmsnorm(hidden)
    mlp = silu(normed @ w_mlp_1) * (normed @ w_mlp_2)
    return hidden + mlp @ w_o_mlp
