from fractions import Fraction

import numpy as np
import pytest

from attnkit import (
    AttnConfig,
    Rng,
    block_reconstruct,
    build_weights,
    calib_factors,
    calib_factors_squared,
    group_map,
    latent_prefill,
    trained_config,
)
from attnkit.errors import ConfigError
from attnkit.latent import latent_projections
from attnkit.selftest import tiny_config
from attnkit.tensors import rmsnorm, softmax_rows


def test_group_map_examples():
    assert group_map(0, 8) == (0, 0)
    assert group_map(5, 8) == (1, 1)
    for h in (4, 8, 24, 64):
        assert group_map(h // 2, h) == (1, 0)
    with pytest.raises(ConfigError):
        group_map(0, 7)
    with pytest.raises(ConfigError):
        group_map(9, 8)


def test_block_reconstruct_identity_blocks():
    # every block of head 0 is the identity: K_0 reduces to the sum of C blocks
    n, d_h, n_blocks, h = 5, 4, 4, 2
    rng = Rng(0)
    c = rng.split("c").normal((n, n_blocks * d_h))
    w_uk = np.zeros((n_blocks * d_h, h * d_h))
    for b in range(n_blocks):
        w_uk[b * d_h : (b + 1) * d_h, :d_h] = np.eye(d_h)
    k, _ = block_reconstruct(c, w_uk, np.zeros_like(w_uk), n_blocks, head=0, d_h=d_h)
    expected = sum(c[:, b * d_h : (b + 1) * d_h] for b in range(n_blocks))
    np.testing.assert_allclose(k, expected, atol=0)


@pytest.mark.parametrize("n_blocks", (2, 4))
def test_block_reconstruct_matches_full_matmul(n_blocks):
    rng = Rng(1)
    d_h, h, n = 8, 4, 6
    d_lat = n_blocks * d_h
    for trial in range(30):
        r = rng.split(f"{n_blocks}-{trial}")
        c = r.split("c").normal((n, d_lat))
        w_uk = r.split("uk").normal((d_lat, h * d_h))
        w_uv = r.split("uv").normal((d_lat, h * d_h))
        for head in range(h):
            k, v = block_reconstruct(c, w_uk, w_uv, n_blocks, head, d_h)
            cols = slice(head * d_h, (head + 1) * d_h)
            assert np.max(np.abs(k - c @ w_uk[:, cols])) <= 1e-12
            assert np.max(np.abs(v - c @ w_uv[:, cols])) <= 1e-12


def test_block_reconstruct_degenerate_single_block():
    rng = Rng(2)
    c = rng.split("c").normal((4, 8))
    w_uk = rng.split("uk").normal((8, 16))
    w_uv = rng.split("uv").normal((8, 16))
    k, v = block_reconstruct(c, w_uk, w_uv, 1, head=1, d_h=8)
    assert np.array_equal(k, c @ w_uk[:, 8:])
    assert np.array_equal(v, c @ w_uv[:, 8:])


def test_block_reconstruct_indivisible_width_rejected():
    with pytest.raises(ConfigError):
        block_reconstruct(np.zeros((2, 10)), np.zeros((10, 4)), np.zeros((10, 4)), 4, 0, 4)


def test_scale_factors_symbolic_values():
    assert calib_factors_squared(trained_config("mla")) == (Fraction(2), Fraction(6), Fraction(1))
    assert calib_factors_squared(trained_config("gla2")) == (Fraction(3), Fraction(12), Fraction(1))
    assert calib_factors_squared(trained_config("gla4")) == (Fraction(3), Fraction(24), Fraction(1))
    assert calib_factors_squared(trained_config("mlra2")) == (
        Fraction(3),
        Fraction(24),
        Fraction(1, 2),
    )
    assert calib_factors_squared(trained_config("mlra4")) == (
        Fraction(3),
        Fraction(24),
        Fraction(1, 4),
    )
    # the four-branch output rescale is exactly one half
    assert calib_factors(trained_config("mlra4")).alpha_attn == 0.5


def test_scale_factors_disabled_are_unity():
    cfg = trained_config("mla").with_(scaling=False)
    assert calib_factors_squared(cfg) == (Fraction(1), Fraction(1), Fraction(1))
    sf = calib_factors(cfg)
    assert (sf.alpha_q, sf.alpha_kv, sf.alpha_attn) == (1.0, 1.0, 1.0)


def test_tau_ignores_latent_width():
    narrow = AttnConfig("mla", h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    wide = narrow.with_(d_c=64)
    assert narrow.tau == wide.tau == (8 + 4) ** -0.5
    assert AttnConfig("mfa", h=4, d=32, d_h=8, d_cq=16).tau == 16**-0.5
    assert AttnConfig("mha", h=4, d=32, d_h=8).tau == 8**-0.5


def test_mlra4_dead_branches_contribute_exact_zero():
    # zeroing blocks 1..3 of both up-projections leaves only branch 0, and the
    # single-softmax mechanism collapses to the same thing
    cfg_mla = AttnConfig("mla", h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    cfg_mlra = AttnConfig("mlra", branches=4, h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    rng = Rng(3)
    w = build_weights(cfg_mla, 0.3, rng.split("w"))
    w.tensors["w_uk"][8:] = 0.0
    w.tensors["w_uv"][8:] = 0.0
    hidden = rng.split("h").normal((5, 32))
    out_mla = latent_prefill(cfg_mla, w, hidden).out
    out_mlra = latent_prefill(cfg_mlra, w, hidden).out
    np.testing.assert_allclose(out_mlra, out_mla, atol=1e-14)


def test_mlra4_single_token_is_scaled_branch_value_sum():
    cfg = AttnConfig(
        "mlra", branches=4, h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16, scaling=True
    )
    rng = Rng(4)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((1, 32))
    out = latent_prefill(cfg, w, hidden).out
    # one token: every branch softmax is over a single logit, so each branch
    # contributes exactly its value row
    proj = latent_projections(cfg, w, hidden, [0])
    expected = np.zeros((4, 8))
    for b in range(4):
        c_b = proj.latents[f"latent_b{b}"]
        expected += (c_b @ w["w_uv"][b * 8 : (b + 1) * 8]).reshape(4, 8)
    expected *= calib_factors(cfg).alpha_attn
    np.testing.assert_allclose(out[0], expected, atol=1e-13)


def test_mlra_not_a_refactoring_of_single_softmax():
    cfg_mla = AttnConfig("mla", h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    cfg_mlra = AttnConfig("mlra", branches=4, h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    rng = Rng(5)
    w = build_weights(cfg_mla, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((6, 32))
    out_mla = latent_prefill(cfg_mla, w, hidden).out
    out_mlra = latent_prefill(cfg_mlra, w, hidden).out
    assert np.max(np.abs(out_mla - out_mlra)) > 1e-3


@pytest.mark.parametrize("name", ("mlra2", "mlra4"))
def test_branch_decomposition_matches_explicit_sum(name):
    cfg = tiny_config(name, scaling=True)
    rng = Rng(6)
    w = build_weights(cfg, 0.3, rng.split("w"))
    n = 5
    hidden = rng.split("h").normal((n, cfg.d))
    out = latent_prefill(cfg, w, hidden).out

    proj = latent_projections(cfg, w, hidden, range(n))
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    explicit = np.zeros_like(out)
    bs = cfg.block_dim
    for stream, c_b in proj.latents.items():
        if cfg.branches == 4:
            blk = int(stream.removeprefix("latent_b"))
            heads = range(cfg.h)
            w_uk, w_uv = w["w_uk"], w["w_uv"]
            local = list(heads)
        else:
            grp, blk = (int(p) for p in stream.split("_")[1:])
            heads = range(grp * cfg.h // 2, (grp + 1) * cfg.h // 2)
            w_uk, w_uv = w[f"w_uk_{grp}"], w[f"w_uv_{grp}"]
            local = [i - grp * cfg.h // 2 for i in heads]
        rows = slice(blk * bs, (blk + 1) * bs)
        k_b = (c_b @ w_uk[rows]).reshape(n, -1, cfg.d_h)
        v_b = (c_b @ w_uv[rows]).reshape(n, -1, cfg.d_h)
        for j, head in enumerate(heads):
            logits = cfg.tau * (
                proj.q_nope[:, head] @ k_b[:, local[j]].T
                + proj.q_rope[:, head] @ proj.k_rope.T
            )
            probs = softmax_rows(np.where(mask, -np.inf, logits))
            explicit[:, head] += probs @ v_b[:, local[j]]
    explicit *= calib_factors(cfg).alpha_attn
    assert np.max(np.abs(out - explicit)) <= 1e-12


def test_shared_rope_term_makes_branch_softmaxes_identical_when_uk_zero():
    cfg = AttnConfig("mlra", branches=4, h=4, d=32, d_h=8, d_h_rope=4, d_c=32, d_cq=16)
    rng = Rng(7)
    w = build_weights(cfg, 0.3, rng.split("w"))
    w.tensors["w_uk"][:] = 0.0
    n = 5
    hidden = rng.split("h").normal((n, 32))
    proj = latent_projections(cfg, w, hidden, range(n))
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    probs_per_branch = []
    for b in range(4):
        c_b = proj.latents[f"latent_b{b}"]
        k_b = (c_b @ w["w_uk"][b * 8 : (b + 1) * 8]).reshape(n, cfg.h, cfg.d_h)
        logits = cfg.tau * (
            np.einsum("qhp,khp->hqk", proj.q_nope, k_b)
            + np.einsum("qhr,kr->hqk", proj.q_rope, proj.k_rope)
        )
        probs_per_branch.append(softmax_rows(np.where(mask[None], -np.inf, logits)))
    for b in range(1, 4):
        assert np.array_equal(probs_per_branch[0], probs_per_branch[b])


@pytest.mark.parametrize("name", ("mla", "gla2", "mlra2", "mlra4"))
def test_semi_translation_equivariance(name):
    # jointly shifting all positions must not change latent-family outputs:
    # the positional-free term ignores positions and the rotary term is
    # shift-invariant
    cfg = tiny_config(name, scaling=True)
    rng = Rng(8)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((6, cfg.d))
    base = latent_prefill(cfg, w, hidden, pos_offset=0).out
    shifted = latent_prefill(cfg, w, hidden, pos_offset=37).out
    assert np.max(np.abs(base - shifted)) <= 1e-9


def test_latent_prefill_cache_contents():
    cfg = tiny_config("mla", scaling=True)
    rng = Rng(9)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((4, cfg.d))
    cache = latent_prefill(cfg, w, hidden).cache
    assert cache.n == 4
    assert cache.row_elements() == cfg.d_c + cfg.d_h_rope
    sf = calib_factors(cfg)
    np.testing.assert_allclose(
        cache.peek("latent"), sf.alpha_kv * rmsnorm(hidden @ w["w_dkv"]), atol=1e-15
    )
