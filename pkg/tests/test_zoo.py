import numpy as np
import pytest

from attnkit import AttnConfig, Rng, build_weights, gated_output, latent_prefill, prefill
from attnkit.errors import RoutingError
from attnkit.selftest import tiny_config
from attnkit.tensors import sigmoid
from attnkit.zoo import block_forward, kv_map, materialize_kv, zoo_projections

ZOO_NAMES = ("mha", "mqa", "gqa", "mfa", "tpa", "gta")


@pytest.mark.parametrize("name", ZOO_NAMES)
def test_single_token_output_is_own_value_head(name):
    cfg = tiny_config(name)
    rng = Rng(10)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((1, cfg.d))
    result = prefill(cfg, w, hidden)
    _, values = materialize_kv(cfg, zoo_projections(cfg, w, hidden, [0]).streams)
    expected = values[:, kv_map(cfg), :][0]
    np.testing.assert_allclose(result.out[0], expected, atol=1e-15)


def test_gqa_with_tied_groups_equals_mha():
    rng = Rng(11)
    gqa = AttnConfig("gqa", g=2, h=4, d=16, d_h=4)
    w_gqa = build_weights(gqa, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((6, gqa.d))

    mha = AttnConfig("mha", h=4, d=16, d_h=4)
    reps = gqa.h // gqa.g
    tied = {
        "w_q": w_gqa["w_q"],
        "w_k": np.repeat(w_gqa["w_k"].reshape(16, gqa.g, 4), reps, axis=1).reshape(16, 16),
        "w_v": np.repeat(w_gqa["w_v"].reshape(16, gqa.g, 4), reps, axis=1).reshape(16, 16),
        "w_o": w_gqa["w_o"],
    }
    from attnkit.weights import WeightSet

    out_gqa = prefill(gqa, w_gqa, hidden).out
    out_mha = prefill(mha, WeightSet("mha", tied), hidden).out
    assert np.array_equal(out_gqa, out_mha)


def test_tpa_rank_one_all_ones_coefficients_degenerate_to_shared_head():
    cfg = AttnConfig("tpa", beta_q=1, beta_kv=1, h=4, d=16, d_h=4)
    rng = Rng(12)
    w = build_weights(cfg, 0.3, rng.split("w"))
    for name in ("w_aq", "w_ak", "w_av"):
        w.tensors[name] = np.ones_like(w[name])
    hidden = rng.split("h").normal((5, cfg.d))
    out = prefill(cfg, w, hidden).out

    # with unit coefficients every head sees s_t-scaled shared components
    proj = zoo_projections(cfg, w, hidden, range(5))
    for i in range(1, cfg.h):
        assert np.array_equal(out[:, 0], out[:, i])
    scale = hidden.sum(axis=1)
    from attnkit.rope import rope_rotate
    from attnkit.tensors import softmax_rows

    q1 = scale[:, None] * rope_rotate((hidden @ w["w_cq"]).reshape(5, 1, 4), range(5))[:, 0]
    k1 = scale[:, None] * rope_rotate((hidden @ w["w_ck"]).reshape(5, 1, 4), range(5))[:, 0]
    v1 = scale[:, None] * (hidden @ w["w_cv"])
    logits = cfg.tau * (q1 @ k1.T)
    logits[np.triu_indices(5, k=1)] = -np.inf
    oracle = softmax_rows(logits) @ v1
    np.testing.assert_allclose(out[:, 0], oracle, atol=1e-12)


@pytest.mark.parametrize("name", ("mqa", "gqa", "mfa", "gta"))
def test_broadcast_equals_physical_replication(name):
    cfg = tiny_config(name)
    rng = Rng(13)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((5, cfg.d))
    proj = zoo_projections(cfg, w, hidden, range(5))
    keys, values = materialize_kv(cfg, proj.streams)
    gather = kv_map(cfg)
    reps = cfg.h // keys.shape[1]
    assert np.array_equal(keys[:, gather, :], np.repeat(keys, reps, axis=1))
    assert np.array_equal(values[:, gather, :], np.repeat(values, reps, axis=1))

    from attnkit.tensors import softmax_rows

    out = prefill(cfg, w, hidden).out
    k_rep = np.repeat(keys, reps, axis=1)
    v_rep = np.repeat(values, reps, axis=1)
    logits = cfg.tau * np.einsum("qhk,thk->hqt", proj.q, k_rep)
    mask = np.triu(np.ones((5, 5), dtype=bool), k=1)
    replicated = np.einsum(
        "hqt,thv->qhv", softmax_rows(np.where(mask[None], -np.inf, logits)), v_rep
    )
    assert np.array_equal(out, replicated)


@pytest.mark.parametrize("name", ZOO_NAMES + ("mla", "mlra4"))
def test_causality(name):
    cfg = tiny_config(name)
    rng = Rng(14)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((6, cfg.d))
    perturbed = hidden.copy()
    perturbed[4] += rng.split("bump").normal((cfg.d,))
    run = latent_prefill if cfg.variant in ("mla", "mlra") else prefill
    base = run(cfg, w, hidden).out
    after = run(cfg, w, perturbed).out
    assert np.array_equal(base[:4], after[:4])
    assert not np.array_equal(base[4:], after[4:])


def test_gta_keys_are_tied_to_values():
    cfg = tiny_config("gta")
    rng = Rng(15)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((4, cfg.d))
    result = prefill(cfg, w, hidden)
    cached_values = result.cache.peek("v")
    independent = (hidden @ w["w_kv"]).reshape(4, cfg.g, cfg.d_h)
    np.testing.assert_allclose(cached_values, independent, atol=1e-15)

    streams = {"v": cached_values, "rope": result.cache.peek("rope")}
    keys, values = materialize_kv(cfg, streams)
    split = cfg.d_h - cfg.d_h_rope
    assert np.array_equal(keys[..., :split], values[..., :split])


def test_tpa_score_decomposes_into_component_double_sum():
    cfg = AttnConfig("tpa", beta_q=3, beta_kv=2, h=4, d=16, d_h=4)
    rng = Rng(16)
    w = build_weights(cfg, 0.3, rng.split("w"))
    hidden = rng.split("h").normal((5, cfg.d))
    proj = zoo_projections(cfg, w, hidden, range(5))
    keys, _ = materialize_kv(cfg, proj.streams)

    qa = (hidden @ w["w_aq"]).reshape(5, cfg.beta_q, cfg.h)
    ka = proj.streams["ka"]
    from attnkit.rope import rope_rotate

    qc = rope_rotate((hidden @ w["w_cq"]).reshape(5, cfg.beta_q, cfg.d_h), range(5))
    kc = proj.streams["kc"]
    for t_q, head, t_k in [(3, 0, 1), (4, 2, 4), (2, 3, 0)]:
        contracted = proj.q[t_q, head] @ keys[t_k, head]
        expanded = sum(
            qa[t_q, bq, head] * ka[t_k, bk, head] * (qc[t_q, bq] @ kc[t_k, bk])
            for bq in range(cfg.beta_q)
            for bk in range(cfg.beta_kv)
        ) / (cfg.beta_q * cfg.beta_kv)
        assert abs(contracted - expanded) <= 1e-12


def test_gated_output_zero_gate_halves():
    rng = Rng(17)
    hidden = rng.split("h").normal((3, 8))
    flat = rng.split("o").normal((3, 12))
    np.testing.assert_allclose(gated_output(hidden, flat, np.zeros((8, 12))), 0.5 * flat, atol=0)


def test_gated_output_saturates():
    hidden = np.ones((2, 4))
    flat = np.ones((2, 6))
    gate = 100.0 * np.ones((4, 6))
    np.testing.assert_allclose(gated_output(hidden, flat, gate), flat, atol=1e-12)


def test_gated_output_matches_elementwise_oracle():
    rng = Rng(18)
    hidden = rng.split("h").normal((4, 8))
    flat = rng.split("o").normal((4, 10))
    gate = rng.split("g").normal((8, 10))
    oracle = flat * (1.0 / (1.0 + np.exp(-(hidden @ gate))))
    np.testing.assert_allclose(gated_output(hidden, flat, gate), oracle, atol=1e-14)


def test_block_forward_shapes_and_gating():
    cfg = tiny_config("mla")
    rng = Rng(19)
    w = build_weights(cfg.with_(gated=True), 0.2, rng.split("w"))
    hidden = rng.split("h").normal((5, cfg.d))
    d_f = 24
    w1 = rng.split("w1").normal((cfg.d, d_f), 0.2)
    w2 = rng.split("w2").normal((cfg.d, d_f), 0.2)
    w_out = rng.split("wo").normal((d_f, cfg.d), 0.2)

    def attn_fn(normed):
        out = latent_prefill(cfg, w, normed).out
        return out.reshape(normed.shape[0], cfg.out_flat_dim)

    plain = block_forward(hidden, attn_fn, w["w_o"], w1, w2, w_out)
    gated = block_forward(hidden, attn_fn, w["w_o"], w1, w2, w_out, w_gate=w["w_g"])
    assert plain.shape == hidden.shape
    assert gated.shape == hidden.shape
    assert not np.array_equal(plain, gated)

    # gate driven by the un-normalized block input
    from attnkit.tensors import rmsnorm, silu

    attn_flat = attn_fn(rmsnorm(hidden))
    gate = sigmoid(hidden @ w["w_g"])
    mid = hidden + (attn_flat * gate) @ w["w_o"]
    manual = mid + (silu(rmsnorm(mid) @ w1) * (rmsnorm(mid) @ w2)) @ w_out
    np.testing.assert_allclose(gated, manual, atol=1e-12)


def test_prefill_routing_errors():
    rng = Rng(20)
    mla = tiny_config("mla")
    with pytest.raises(RoutingError):
        prefill(mla, build_weights(mla, 0.1, rng), rng.split("h").normal((2, mla.d)))
    mha = tiny_config("mha")
    with pytest.raises(RoutingError):
        latent_prefill(mha, build_weights(mha, 0.1, rng), rng.split("h").normal((2, mha.d)))
