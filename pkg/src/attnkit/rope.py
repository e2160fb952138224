"""Rotary position embedding over consecutive 2-D blocks.

The rotation pairs channels (2l, 2l+1); the half-split layout used by some
codebases is deliberately not offered, so that queries and keys always agree
on the pairing. Frequencies follow the usual ladder theta_l = base^(-2l/dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensors import Array


@dataclass(frozen=True)
class RopeParams:
    """Rotation setup: even dimension, frequency base, one position per row."""

    dim: int
    base: float = 10000.0
    positions: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ConfigError(f"rope dimension must be a positive even integer, got {self.dim}")
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))

    def freqs(self) -> Array:
        ell = np.arange(self.dim // 2, dtype=np.float64)
        return float(self.base) ** (-2.0 * ell / self.dim)


def rope_apply(x: Array, params: RopeParams) -> Array:
    """Rotate each (2l, 2l+1) channel pair of x by angle position * theta_l.

    ``x`` has shape (n, ..., dim); ``params.positions`` supplies the n token
    positions. Each pair is rotated rigidly, so pair norms (and hence vector
    norms) are preserved exactly up to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise ShapeMismatchError(
            f"rope_apply: last dim {x.shape[-1]} does not match rope dim {params.dim}"
        )
    if len(params.positions) != x.shape[0]:
        raise ShapeMismatchError(
            f"rope_apply: {len(params.positions)} positions for {x.shape[0]} rows"
        )
    pos = np.asarray(params.positions, dtype=np.float64)
    ang = np.multiply.outer(pos, params.freqs())  # (n, dim/2)
    ang = ang.reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (params.dim // 2,))
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x: Array, positions, dim: int | None = None, base: float = 10000.0) -> Array:
    """Convenience wrapper building RopeParams from the array shape."""
    x = np.asarray(x, dtype=np.float64)
    return rope_apply(x, RopeParams(dim if dim is not None else x.shape[-1], base, tuple(positions)))
