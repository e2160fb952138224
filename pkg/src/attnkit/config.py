"""Architecture hyperparameters for every attention mechanism in the kit.

One config class covers all variants; fields that a variant does not use are
ignored by its builders. Latent dimensions left unset fall back to the usual
ratios d_c = 4*d_h and d_h_rope = d_h/2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigError

VARIANTS = ("mha", "mqa", "gqa", "mla", "mfa", "tpa", "gla", "gta", "mlra")

#: variants whose decode state is a latent vector plus a shared rotary key
LATENT_VARIANTS = ("mla", "gla", "mlra")

#: variants handled by the baseline zoo
ZOO_VARIANTS = ("mha", "mqa", "gqa", "mfa", "tpa", "gta")


@dataclass(frozen=True)
class AttnConfig:
    variant: str
    h: int
    d: int
    d_h: int
    d_h_rope: int = -1  # partial rotary width; defaults to d_h // 2 where used
    d_c: int = -1       # latent KV width; defaults to 4 * d_h
    d_cq: int = -1      # latent query width; defaults to 4 * d_h
    g: int = 1          # KV heads (mqa/gqa/gta) or latent groups (gla)
    beta_q: int = 1     # tpa query rank
    beta_kv: int = 1    # tpa key/value rank
    branches: int = 0   # mlra branch count, 2 or 4
    scaling: bool = False
    gated: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_h_rope < 0:
            object.__setattr__(self, "d_h_rope", self.d_h // 2)
        if self.d_c < 0:
            object.__setattr__(self, "d_c", 4 * self.d_h)
        if self.d_cq < 0:
            object.__setattr__(self, "d_cq", 4 * self.d_h)
        if self.variant == "mqa":
            object.__setattr__(self, "g", 1)
        if self.variant == "mlra":
            # two-branch form restricts each branch to one of two head groups
            object.__setattr__(self, "g", 2 if self.branches == 2 else 1)
        self.validate()

    def validate(self) -> None:
        for name in ("h", "d", "d_h"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{self.variant}: field {name!r} must be positive")
        v = self.variant
        if v in ("gqa", "gta", "gla"):
            if self.g <= 0:
                raise ConfigError(f"{v}: missing field 'g' (KV head / group count)")
            if self.h % self.g != 0:
                raise ConfigError(f"{v}: h={self.h} not divisible by g={self.g}")
        if v in LATENT_VARIANTS or v == "gta":
            if self.d_h_rope <= 0:
                raise ConfigError(f"{v}: missing field 'd_h_rope' (partial rotary width)")
            if self.d_h_rope % 2 != 0:
                raise ConfigError(f"{v}: d_h_rope={self.d_h_rope} must be even")
        if v == "gta" and self.d_h_rope >= self.d_h:
            raise ConfigError(f"gta: d_h_rope={self.d_h_rope} must be smaller than d_h={self.d_h}")
        if v in LATENT_VARIANTS:
            if self.d_c <= 0 or self.d_cq <= 0:
                raise ConfigError(f"{v}: missing field 'd_c' or 'd_cq' (latent widths)")
        if v == "gla" and self.d_c % self.g != 0:
            raise ConfigError(f"gla: d_c={self.d_c} not divisible by g={self.g}")
        if v == "mlra":
            if self.branches not in (2, 4):
                raise ConfigError(f"mlra: missing or invalid field 'branches' (got {self.branches})")
            if self.d_c % 4 != 0:
                raise ConfigError(f"mlra: d_c={self.d_c} not divisible by 4 (block count)")
            if self.h % 2 != 0:
                raise ConfigError(f"mlra: h={self.h} must be even")
        if v == "tpa" and (self.beta_q <= 0 or self.beta_kv <= 0):
            raise ConfigError("tpa: missing field 'beta_q' or 'beta_kv' (component ranks)")
        if v in ("mha", "mqa", "gqa") and self.d_h % 2 != 0:
            raise ConfigError(f"{v}: d_h={self.d_h} must be even for full rotary encoding")

    # -- derived quantities -------------------------------------------------

    @property
    def head_out_dim(self) -> int:
        """Per-head output width: doubled for mfa, d_h elsewhere."""
        return 2 * self.d_h if self.variant == "mfa" else self.d_h

    @property
    def out_flat_dim(self) -> int:
        return self.h * self.head_out_dim

    @property
    def tau(self) -> float:
        """Score scale: 1/sqrt(logit width of one head).

        The latent family concatenates a d_h_rope rotary slice onto the d_h
        positional-free slice, so its logit width is d_h + d_h_rope. The key
        width never depends on d_c.
        """
        if self.variant in LATENT_VARIANTS:
            return (self.d_h + self.d_h_rope) ** -0.5
        if self.variant == "mfa":
            return (2 * self.d_h) ** -0.5
        return self.d_h ** -0.5

    @property
    def block_dim(self) -> int:
        """Column width of one latent block (mlra); d_c/4 for both branchings."""
        return self.d_c // 4

    @property
    def group_latent_dim(self) -> int:
        return self.d_c // self.g

    def with_(self, **kw) -> "AttnConfig":
        return replace(self, **kw)


def group_of_head(i: int, h: int, g: int) -> int:
    """Group index of query head i when h heads are split into g groups."""
    return i // (h // g)


# -- reference configurations ----------------------------------------------

def trained_config(name: str) -> AttnConfig:
    """2.9B-scale per-layer attention configs used for the parameter checks."""
    base = dict(h=24, d=3072, d_h=128)
    table = {
        "mha": AttnConfig("mha", **base),
        "mqa": AttnConfig("mqa", g=1, **base),
        "gqa": AttnConfig("gqa", g=6, **base),
        "mla": AttnConfig("mla", d_cq=1536, d_c=512, d_h_rope=64, scaling=True, **base),
        # mfa's per-head width is 2*d_h = 256
        "mfa": AttnConfig("mfa", g=1, d_cq=2048, **base),
        "tpa": AttnConfig("tpa", beta_q=6, beta_kv=2, **base),
        "gla2": AttnConfig("gla", g=2, d_cq=1024, d_c=512, d_h_rope=64, scaling=True, **base),
        "gla4": AttnConfig("gla", g=4, d_cq=1024, d_c=512, d_h_rope=64, scaling=True, **base),
        "gta": AttnConfig("gta", g=6, d_h_rope=64, **base),
        "mlra2": AttnConfig("mlra", branches=2, d_cq=1024, d_c=512, d_h_rope=64, scaling=True, **base),
        "mlra4": AttnConfig("mlra", branches=4, d_cq=1024, d_c=512, d_h_rope=64, scaling=True, **base),
    }
    try:
        return table[name]
    except KeyError:
        raise ConfigError(f"no trained config named {name!r}; choose from {sorted(table)}") from None


TRAINED_NAMES = ("mha", "mqa", "gqa", "mla", "mfa", "tpa", "gla2", "gla4", "gta", "mlra2", "mlra4")


def table_context(name: str = "kimi") -> dict[str, AttnConfig]:
    """Loading-table context: 64 query heads, 8 KV heads, d_h=128, rotary 64.

    These are the published large-model head counts the loading columns are
    quoted for; the hidden width d only matters for parameter counts, not
    for cache traffic.
    """
    if name not in ("kimi", "qwen"):
        raise ConfigError(f"unknown table context {name!r}; choose 'kimi' or 'qwen'")
    base = dict(h=64, d=7168, d_h=128)
    latent = dict(d_cq=1536, d_c=512, d_h_rope=64)
    return {
        "mha": AttnConfig("mha", **base),
        "mqa": AttnConfig("mqa", g=1, **base),
        "gqa": AttnConfig("gqa", g=8, **base),
        "mla": AttnConfig("mla", **latent, **base),
        "mfa": AttnConfig("mfa", g=1, d_cq=2048, **base),
        "tpa": AttnConfig("tpa", beta_q=6, beta_kv=2, **base),
        "gla2": AttnConfig("gla", g=2, **latent, **base),
        "gta": AttnConfig("gta", g=8, d_h_rope=64, **base),
        "mlra2": AttnConfig("mlra", branches=2, **latent, **base),
        "mlra4": AttnConfig("mlra", branches=4, **latent, **base),
    }


TABLE_ROW_ORDER = ("mha", "mqa", "gqa", "mla", "mfa", "tpa", "gla2", "gta", "mlra2", "mlra4")

TP_DEGREES = (1, 2, 4, 8)
