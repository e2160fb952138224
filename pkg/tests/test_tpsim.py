from fractions import Fraction

import numpy as np
import pytest

from attnkit import (
    Rng,
    absorbed_decode_step,
    build_weights,
    make_shards,
    new_cache,
    per_device_load,
    sim_decode,
    table_context,
)
from attnkit.config import TABLE_ROW_ORDER, TP_DEGREES
from attnkit.errors import ConfigError
from attnkit.selftest import max_rel_err, tiny_config

ALL_NAMES = ("mha", "mqa", "gqa", "mfa", "tpa", "gta", "mla", "gla2", "gla4", "mlra2", "mlra4")


def test_single_shard_owns_everything():
    cfg = tiny_config("mla")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(0)), 1)
    assert len(shards) == 1
    assert shards.shards[0].own.heads == tuple(range(cfg.h))
    assert shards.shards[0].cache.row_elements() == cfg.d_c + cfg.d_h_rope


def test_mlra4_four_way_shards_own_one_block_each():
    cfg = tiny_config("mlra4")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(1)), 4)
    for b, shard in enumerate(shards):
        assert shard.own.units[0].block == b
        # one block slice plus the replicated rotary key
        assert shard.cache.row_elements() == cfg.d_c // 4 + cfg.d_h_rope
    assert "rope" in shards.ledger.replicated
    assert shards.ledger.replicated["rope"] == [0, 1, 2, 3]


def test_mla_shards_replicate_full_latent():
    cfg = tiny_config("mla")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(2)), 4)
    for shard in shards:
        assert shard.cache.row_elements() == cfg.d_c + cfg.d_h_rope
    assert shards.ledger.replicated["latent"] == [0, 1, 2, 3]


def test_mlra2_two_way_shards_by_group():
    cfg = tiny_config("mlra2")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(3)), 2)
    for grp, shard in enumerate(shards):
        assert all(unit.group == grp for unit in shard.own.units)
        assert shard.cache.row_elements() == cfg.d_c // 2 + cfg.d_h_rope


def test_mqa_replicates_single_kv_head():
    cfg = tiny_config("mqa")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(4)), 4)
    assert shards.ledger.replicated["k[0]"] == [0, 1, 2, 3]
    for shard in shards:
        assert shard.cache.row_elements() == 2 * cfg.d_h


def test_tpa_components_replicated_coefficients_sharded():
    cfg = tiny_config("tpa")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(5)), 2)
    assert shards.ledger.replicated["kc"] == [0, 1]
    assert shards.ledger.replicated["vc"] == [0, 1]
    assert not any(key.startswith("ka[") for key in shards.ledger.replicated)


@pytest.mark.parametrize("name", ALL_NAMES)
@pytest.mark.parametrize("phi", TP_DEGREES)
def test_distributed_equals_single_device(name, phi):
    # 5 random weight/input draws per (variant, tp) pair: 220 trials total
    cfg = tiny_config(name)
    for trial in range(5):
        rng = Rng(100 + trial)
        w = build_weights(cfg, 0.25, rng.split(f"w{name}"))
        hidden = rng.split(f"h{name}").normal((3, cfg.d))
        reference_cache = new_cache(cfg)
        shards = make_shards(cfg, w, phi)
        for t in range(3):
            o_ref, _ = absorbed_decode_step(cfg, w, reference_cache, hidden[t])
            o_dist, _ = sim_decode(shards, hidden[t])
            assert max_rel_err(o_ref, o_dist) <= 1e-10


@pytest.mark.parametrize("label", TABLE_ROW_ORDER)
@pytest.mark.parametrize("phi", TP_DEGREES)
def test_ledger_matches_cost_model_exactly(label, phi):
    # published-context head counts; hidden width shrunk (it does not affect traffic)
    cfg = table_context()[label].with_(d=64, d_cq=64)
    rng = Rng(6)
    w = build_weights(cfg, 0.1, rng.split(f"w{label}"))
    shards = make_shards(cfg, w, phi)
    ledger = None
    for t in range(2):
        _, ledger = sim_decode(shards, rng.split(f"h{label}{t}").normal((cfg.d,)))
    want = per_device_load(cfg, phi) * cfg.d_h
    assert want.denominator == 1  # whole elements at d_h = 128
    for tokens, reads in zip(ledger.tokens_per_step, ledger.reads_per_step):
        for device_reads in reads:
            assert Fraction(device_reads) == want * tokens
    assert ledger.per_token_loads() == [per_device_load(cfg, phi)] * phi


def test_reduction_kinds():
    for name in ("mla", "gla2", "mha", "tpa"):
        cfg = tiny_config(name)
        shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(7)), 4)
        assert shards.ledger.reduction == "concat"
    for name in ("mlra2", "mlra4"):
        cfg = tiny_config(name)
        shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(7)), 4)
        assert shards.ledger.reduction == "sum"


def test_execution_order_does_not_change_output():
    cfg = tiny_config("mlra4")
    rng = Rng(8)
    w = build_weights(cfg, 0.25, rng.split("w"))
    hidden = rng.split("h").normal((2, cfg.d))
    a = make_shards(cfg, w, 4)
    b = make_shards(cfg, w, 4)
    for t in range(2):
        o_fwd, _ = sim_decode(a, hidden[t])
        o_shuffled, _ = sim_decode(b, hidden[t], order=[3, 1, 0, 2])
        assert np.array_equal(o_fwd, o_shuffled)


def test_invalid_execution_order_rejected():
    from attnkit.errors import IntegrityError

    cfg = tiny_config("mla")
    shards = make_shards(cfg, build_weights(cfg, 0.2, Rng(9)), 2)
    with pytest.raises(IntegrityError):
        sim_decode(shards, Rng(9).split("h").normal((cfg.d,)), order=[0, 0])


def test_unsupported_tp_degree():
    cfg = tiny_config("mla")
    w = build_weights(cfg, 0.2, Rng(10))
    with pytest.raises(ConfigError) as err:
        make_shards(cfg, w, 16)
    assert "TP degree" in str(err.value)


def test_incompatible_axis_named_in_error():
    cfg = tiny_config("mha").with_(h=4)  # 4 heads cannot split 8 ways
    w = build_weights(cfg, 0.2, Rng(11))
    with pytest.raises(ConfigError) as err:
        make_shards(cfg, w, 8)
    assert "query-head axis" in str(err.value)


def test_mlra4_per_branch_read_accounting():
    # a device holding one block reads n * (d_c/4 + d_h_rope) elements per step
    cfg = tiny_config("mlra4")
    rng = Rng(12)
    w = build_weights(cfg, 0.25, rng.split("w"))
    shards = make_shards(cfg, w, 4)
    for t in range(3):
        _, ledger = sim_decode(shards, rng.split(f"h{t}").normal((cfg.d,)))
    per_token = cfg.d_c // 4 + cfg.d_h_rope
    for tokens, reads in zip(ledger.tokens_per_step, ledger.reads_per_step):
        assert reads == [tokens * per_token] * 4


def test_gla2_beyond_group_count_replicates_group_latent():
    cfg = tiny_config("gla2")
    rng = Rng(13)
    w = build_weights(cfg, 0.25, rng.split("w"))
    shards = make_shards(cfg, w, 4)
    assert shards.ledger.replicated["latent_0"] == [0, 1]
    assert shards.ledger.replicated["latent_1"] == [2, 3]
    for t in range(2):
        _, ledger = sim_decode(shards, rng.split(f"h{t}").normal((cfg.d,)))
    per_token = cfg.d_c // 2 + cfg.d_h_rope
    assert ledger.reads_per_step[-1] == [2 * per_token] * 4


def test_shard_weight_slices_reconstruct_full_matrices():
    # the up-projection slices held across devices tile the full matrices
    cfg = tiny_config("mla")
    w = build_weights(cfg, 0.2, Rng(15))
    shards = make_shards(cfg, w, 4)
    full = w["w_uk"].reshape(cfg.d_c, cfg.h, cfg.d_h)
    stacked = np.concatenate([s.attn_weights["uk:latent"] for s in shards], axis=1)
    assert np.array_equal(stacked, full)

    cfg4 = tiny_config("mlra4")
    w4 = build_weights(cfg4, 0.2, Rng(16))
    shards4 = make_shards(cfg4, w4, 4)
    bs = cfg4.block_dim
    rebuilt = np.concatenate(
        [shards4.shards[b].attn_weights[f"uv:latent_b{b}"] for b in range(4)], axis=0
    )
    assert np.array_equal(rebuilt, w4["w_uv"].reshape(cfg4.d_c, cfg4.h, cfg4.d_h))
    assert rebuilt.shape[0] == 4 * bs


def test_ledger_json_roundtrip():
    import json

    cfg = tiny_config("mlra4")
    rng = Rng(14)
    w = build_weights(cfg, 0.25, rng.split("w"))
    shards = make_shards(cfg, w, 4)
    _, ledger = sim_decode(shards, rng.split("h").normal((cfg.d,)))
    payload = json.loads(json.dumps(ledger.to_json_dict()))
    assert payload["tp"] == 4
    assert payload["reduction"] == "sum"
    assert payload["per_token_load_dh"] == ["1.5"] * 4
