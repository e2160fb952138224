"""Simulated tensor-parallel decoding with an exact traffic ledger.

Devices are logical: each holds the weight and cache slices its sharding rule
assigns, runs the shared decode kernel over its own instrumented cache, and
the reducer combines per-head contributions in device-id order. The claims
under test are (a) the distributed output equals single-device decoding and
(b) each device's element-read counter equals the closed-form per-device
loading -- not wall-clock speed.

Sharding rules per mechanism:

* mha/gqa: KV heads partition; past one KV head per device, query heads
  split and the KV head is replicated.
* mqa/mfa: the single shared KV head is replicated everywhere.
* tpa: per-head coefficient columns partition; component tensors replicate.
* gta: value heads partition like gqa; the shared rotary key replicates.
* mla: query heads partition but the whole latent replicates on every
  device, so loading never drops with the TP degree.
* gla: group latents partition up to one group per device; beyond that the
  group replicates to the devices splitting its heads.
* mlra: latent blocks partition four ways (the four-branch form sends each
  block to a different device; the two-branch form shards group-first so a
  two-way split matches gla). At eight devices, pairs of devices share a
  block and split its heads, so the loading plateaus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .cache import KvCache
from .config import AttnConfig, TP_DEGREES
from .decode import (
    LatentUnit,
    Ownership,
    append_owned,
    attend_local,
    local_weights,
    new_cache,
    reduce_contributions,
    token_cache_rows,
    token_queries,
)
from .errors import ConfigError, IntegrityError
from .tensors import Array
from .weights import WeightSet
from .zoo import kv_head_count


def _ranges(total: int, parts: int, axis: str) -> list[tuple[int, ...]]:
    if parts <= 0 or total % parts != 0:
        raise ConfigError(f"cannot split {axis} of size {total} into {parts} shards")
    size = total // parts
    return [tuple(range(k * size, (k + 1) * size)) for k in range(parts)]


def shard_ownership(cfg: AttnConfig, phi: int, device_id: int) -> Ownership:
    """Holdings of one device under phi-way tensor parallelism."""
    if phi not in TP_DEGREES:
        raise ConfigError(f"unsupported TP degree {phi}; supported: {TP_DEGREES}")
    v, h, k = cfg.variant, cfg.h, device_id
    all_heads = tuple(range(h))
    if v == "mha":
        heads = _ranges(h, phi, "query-head axis")[k]
        return Ownership(heads, kv_slots=heads)
    if v in ("mqa", "mfa"):
        heads = _ranges(h, phi, "query-head axis")[k]
        return Ownership(heads, kv_slots=(0,))
    if v == "tpa":
        heads = _ranges(h, phi, "coefficient-head axis")[k]
        return Ownership(heads, kv_slots=heads)
    if v in ("gqa", "gta"):
        g, r = cfg.g, h // cfg.g
        if phi <= g:
            slots = _ranges(g, phi, "KV-head axis")[k]
            heads = tuple(range(slots[0] * r, (slots[-1] + 1) * r))
            return Ownership(heads, kv_slots=slots)
        per_group = phi // g
        if phi % g != 0 or r % per_group != 0:
            raise ConfigError(
                f"{v}: cannot split {r} heads per KV head across {per_group} devices"
            )
        group = k // per_group
        heads = _ranges(r, per_group, "query-head axis")[k % per_group]
        heads = tuple(i + group * r for i in heads)
        return Ownership(heads, kv_slots=(group,))
    if v == "mla":
        heads = _ranges(h, phi, "query-head axis")[k]
        return Ownership(heads, units=(LatentUnit(-1, -1, heads),))
    if v == "gla":
        g, r = cfg.g, h // cfg.g
        if phi <= g:
            groups = _ranges(g, phi, "latent-group axis")[k]
            units = tuple(
                LatentUnit(j, -1, tuple(range(j * r, (j + 1) * r))) for j in groups
            )
            return Ownership(tuple(i for u in units for i in u.heads), units=units)
        per_group = phi // g
        if phi % g != 0 or r % per_group != 0:
            raise ConfigError(
                f"gla: cannot split {r} heads per group across {per_group} devices"
            )
        group = k // per_group
        heads = _ranges(r, per_group, "query-head axis")[k % per_group]
        heads = tuple(i + group * r for i in heads)
        return Ownership(heads, units=(LatentUnit(group, -1, heads),))
    # mlra: shard on the branch axis (blocks, group-first for two branches)
    if cfg.branches == 4:
        if phi <= 4:
            blocks = _ranges(4, phi, "latent-block axis")[k]
            units = tuple(LatentUnit(-1, b, all_heads) for b in blocks)
            return Ownership(all_heads, units=units)
        block, half = k // 2, k % 2
        heads = _ranges(h, 2, "query-head axis")[half]
        return Ownership(heads, units=(LatentUnit(-1, block, heads),))
    pairs = [(grp, b) for grp in range(2) for b in range(2)]
    half_heads = [tuple(range(grp * (h // 2), (grp + 1) * (h // 2))) for grp in range(2)]
    if phi == 1:
        units = tuple(LatentUnit(grp, b, half_heads[grp]) for grp, b in pairs)
        return Ownership(all_heads, units=units)
    if phi == 2:
        units = tuple(LatentUnit(k, b, half_heads[k]) for b in range(2))
        return Ownership(half_heads[k], units=units)
    if phi == 4:
        grp, b = pairs[k]
        return Ownership(half_heads[grp], units=(LatentUnit(grp, b, half_heads[grp]),))
    grp, b = pairs[k // 2]
    heads = _ranges(h // 2, 2, "query-head axis")[k % 2]
    heads = tuple(i + grp * (h // 2) for i in heads)
    return Ownership(heads, units=(LatentUnit(grp, b, heads),))


def _resource_keys(cfg: AttnConfig, own: Ownership) -> list[str]:
    """Cache resources a device stores, at replication-tracking granularity."""
    v = cfg.variant
    if v in ("mha", "mqa", "gqa", "mfa"):
        return [f"{s}[{slot}]" for s in ("k", "v") for slot in own.kv_slots]
    if v == "tpa":
        keys = [f"{s}[{head}]" for s in ("ka", "va") for head in own.heads]
        return keys + ["kc", "vc"]
    if v == "gta":
        return [f"v[{slot}]" for slot in own.kv_slots] + ["rope"]
    return [unit.stream for unit in own.units] + ["rope"]


@dataclass
class DeviceShard:
    device_id: int
    own: Ownership
    cache: KvCache
    attn_weights: dict[str, Array]

    @property
    def reads(self) -> int:
        return self.cache.reads


@dataclass
class TrafficLedger:
    """Per-device cache reads per token step, plus the replication map."""

    variant: str
    phi: int
    d_h: int
    reads_per_step: list[list[int]] = field(default_factory=list)  # step -> device -> reads
    tokens_per_step: list[int] = field(default_factory=list)
    replicated: dict[str, list[int]] = field(default_factory=dict)
    reduction: str = ""

    def per_token_loads(self, step: int = -1) -> list[Fraction]:
        """Per-device reads divided by cache length, in d_h units."""
        tokens = self.tokens_per_step[step]
        return [Fraction(r, tokens * self.d_h) for r in self.reads_per_step[step]]

    def to_json_dict(self) -> dict:
        from .costs import fraction_str

        return {
            "variant": self.variant,
            "tp": self.phi,
            "reduction": self.reduction,
            "tokens_per_step": list(self.tokens_per_step),
            "reads_per_step": [list(r) for r in self.reads_per_step],
            "per_token_load_dh": [fraction_str(x) for x in self.per_token_loads()],
            "replicated": {k: list(v) for k, v in sorted(self.replicated.items())},
        }


class ShardSet:
    """All device shards of one mechanism instance plus its running ledger."""

    def __init__(self, cfg: AttnConfig, w: WeightSet, phi: int, pos_offset: int = 0):
        self.cfg = cfg
        self.weights = w
        self.phi = phi
        self.pos_offset = pos_offset
        self.shards = []
        for device_id in range(phi):
            own = shard_ownership(cfg, phi, device_id)
            self.shards.append(
                DeviceShard(
                    device_id,
                    own,
                    new_cache(cfg, own, pos_offset),
                    local_weights(cfg, w, own),
                )
            )
        self._check_coverage()
        resources: dict[str, list[int]] = {}
        for shard in self.shards:
            for key in _resource_keys(cfg, shard.own):
                resources.setdefault(key, []).append(shard.device_id)
        self.ledger = TrafficLedger(
            cfg.variant,
            phi,
            cfg.d_h,
            replicated={k: v for k, v in resources.items() if len(v) > 1},
            reduction="sum" if cfg.variant == "mlra" else "concat",
        )

    def _check_coverage(self) -> None:
        produced = sorted(i for s in self.shards for i in s.own.heads)
        expected = list(range(self.cfg.h))
        if self.cfg.variant == "mlra":
            per_head = {}
            for s in self.shards:
                for unit in s.own.units:
                    for i in unit.heads:
                        per_head[i] = per_head.get(i, 0) + 1
            want = self.cfg.branches
            bad = {i: c for i, c in per_head.items() if c != want}
            if sorted(per_head) != expected or bad:
                raise IntegrityError(f"mlra branch coverage wrong for heads {sorted(bad)}")
        elif produced != expected:
            raise IntegrityError("query heads not exactly covered by shards")

    @property
    def n(self) -> int:
        return self.shards[0].cache.n

    def __iter__(self):
        return iter(self.shards)

    def __len__(self):
        return len(self.shards)


def make_shards(cfg: AttnConfig, w: WeightSet, phi: int, pos_offset: int = 0) -> ShardSet:
    return ShardSet(cfg, w, phi, pos_offset)


def sim_decode(shards: ShardSet, h_t: Array, order=None) -> tuple[Array, TrafficLedger]:
    """One distributed decode step; returns the output and cumulative ledger.

    ``order`` permutes device execution (for order-independence checks);
    the reduction always runs in device-id order, and the mlra branch sum is
    asserted to be a sum while every other variant must reduce as a concat.
    """
    cfg, w = shards.cfg, shards.weights
    pos = shards.pos_offset + shards.n
    rows = token_cache_rows(cfg, w, h_t, pos)
    queries = token_queries(cfg, w, h_t, pos)
    exec_order = list(order) if order is not None else list(range(len(shards)))
    if sorted(exec_order) != list(range(len(shards))):
        raise IntegrityError("execution order must visit every device exactly once")
    before = [s.cache.reads for s in shards.shards]
    by_device: dict[int, list] = {}
    for idx in exec_order:
        shard = shards.shards[idx]
        append_owned(cfg, shard.own, shard.cache, rows)
        by_device[shard.device_id] = attend_local(
            cfg, shard.attn_weights, shard.own, shard.cache, queries
        )
    contribs = [c for did in sorted(by_device) for c in by_device[did]]
    out, kind = reduce_contributions(cfg, contribs)
    expected = shards.ledger.reduction
    if kind != expected:
        raise IntegrityError(
            f"{cfg.variant}: observed {kind!r} reduction, mechanism requires {expected!r}"
        )
    shards.ledger.reads_per_step.append(
        [s.cache.reads - b for s, b in zip(shards.shards, before)]
    )
    shards.ledger.tokens_per_step.append(shards.n)
    return out, shards.ledger
