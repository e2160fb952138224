"""Append-only decode caches with element-read instrumentation.

A cache is a set of named streams; each stream stores one fixed-shape row per
token. Rows are frozen on append (the decode loop never rewrites history) and
every ``read`` stacks a stream over all cached tokens while counting the
elements touched. Those counters are the raw material of the per-device
traffic ledger: a device that owns a slice of the KV state holds a cache
containing only that slice, so its counter is exactly the loading a real
device would pay per step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import AttnConfig
from .errors import ConfigError, ShapeMismatchError
from .tensors import Array


class KvCache:
    def __init__(self, variant: str, streams: dict[str, tuple[int, ...]], pos_offset: int = 0):
        self.variant = variant
        self.row_shapes = dict(streams)
        self._rows: dict[str, list[Array]] = {name: [] for name in streams}
        self.reads = 0
        self.pos_offset = int(pos_offset)

    @property
    def n(self) -> int:
        return len(next(iter(self._rows.values()))) if self._rows else 0

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(self.row_shapes)

    def row_elements(self) -> int:
        """Cache elements stored per token across all streams."""
        return sum(int(np.prod(s)) for s in self.row_shapes.values())

    def append(self, rows: dict[str, Array]) -> None:
        if set(rows) != set(self.row_shapes):
            raise ShapeMismatchError(
                f"cache append: got streams {sorted(rows)}, expected {sorted(self.row_shapes)}"
            )
        for name, row in rows.items():
            row = np.ascontiguousarray(row, dtype=np.float64)
            if row.shape != self.row_shapes[name]:
                raise ShapeMismatchError(
                    f"cache append: stream {name!r} row shape {row.shape}, "
                    f"expected {self.row_shapes[name]}"
                )
            row.setflags(write=False)
            self._rows[name].append(row)

    def read(self, name: str) -> Array:
        """Stack one stream over all tokens, charging its elements as reads."""
        rows = self._rows[name]
        if not rows:
            raise ConfigError(f"cache read: stream {name!r} is empty")
        out = np.stack(rows)
        self.reads += out.size
        return out

    def peek(self, name: str) -> Array:
        """Uncounted stacked copy for tests and oracles."""
        return np.stack(self._rows[name])

    def row(self, name: str, t: int) -> Array:
        """The stored (frozen) row of one token; writing to it raises."""
        return self._rows[name][t]

    def fingerprint(self, upto: int | None = None) -> str:
        """Digest of the first ``upto`` rows of every stream (append-only check)."""
        upto = self.n if upto is None else upto
        h = hashlib.sha256()
        for name in sorted(self._rows):
            h.update(name.encode())
            for row in self._rows[name][:upto]:
                h.update(row.tobytes())
        return h.hexdigest()


@dataclass
class PrefillOutput:
    """Per-head outputs for a full sequence plus the mechanism's decode state."""

    out: Array  # (n, h, head_out_dim)
    cache: KvCache


def cache_from_streams(cfg: AttnConfig, streams: dict[str, Array], pos_offset: int = 0) -> KvCache:
    """Build a cache holding per-token rows of the given (n, ...) stream arrays."""
    n = next(iter(streams.values())).shape[0]
    layout = {name: arr.shape[1:] for name, arr in streams.items()}
    cache = KvCache(cfg.variant, layout, pos_offset)
    for t in range(n):
        cache.append({name: arr[t] for name, arr in streams.items()})
    return cache


def stream_layout(cfg: AttnConfig) -> dict[str, tuple[int, ...]]:
    """Full (single-device) cache layout for a variant.

    Latent variants store their latent in the finest-grained slices the
    mechanism can shard (per group and/or per block) plus the shared rotary
    key; the full per-token element count is the mechanism's KV-cache size.
    """
    v = cfg.variant
    if v in ("mha", "mqa", "gqa"):
        kv_heads = cfg.h if v == "mha" else cfg.g
        return {"k": (kv_heads, cfg.d_h), "v": (kv_heads, cfg.d_h)}
    if v == "mfa":
        return {"k": (1, 2 * cfg.d_h), "v": (1, 2 * cfg.d_h)}
    if v == "tpa":
        return {
            "ka": (cfg.beta_kv, cfg.h),
            "kc": (cfg.beta_kv, cfg.d_h),
            "va": (cfg.beta_kv, cfg.h),
            "vc": (cfg.beta_kv, cfg.d_h),
        }
    if v == "gta":
        return {"v": (cfg.g, cfg.d_h), "rope": (cfg.d_h_rope,)}
    if v == "mla":
        return {"latent": (cfg.d_c,), "rope": (cfg.d_h_rope,)}
    if v == "gla":
        layout: dict[str, tuple[int, ...]] = {
            f"latent_{j}": (cfg.group_latent_dim,) for j in range(cfg.g)
        }
        layout["rope"] = (cfg.d_h_rope,)
        return layout
    if v == "mlra":
        if cfg.branches == 4:
            layout = {f"latent_b{b}": (cfg.block_dim,) for b in range(4)}
        else:
            layout = {
                f"latent_{grp}_{b}": (cfg.block_dim,) for grp in range(2) for b in range(2)
            }
        layout["rope"] = (cfg.d_h_rope,)
        return layout
    raise ConfigError(f"no cache layout for variant {v!r}")  # pragma: no cover


def latent_stream_name(group: int, block: int) -> str:
    """Stream key for a latent slice; -1 means 'not split on that axis'."""
    if group < 0 and block < 0:
        return "latent"
    if block < 0:
        return f"latent_{group}"
    if group < 0:
        return f"latent_b{block}"
    return f"latent_{group}_{block}"


def kv_cache_elements(cfg: AttnConfig) -> int:
    """Total cached elements per token (all streams, full layout)."""
    return sum(int(np.prod(s)) for s in stream_layout(cfg).values())
