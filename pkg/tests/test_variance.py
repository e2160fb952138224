import numpy as np
import pytest

from attnkit import AttnConfig, Rng, estimate_variances, verify_calibration
from attnkit.errors import ConfigError

RAW_CFG = AttnConfig("mla", h=4, d=256, d_h=16, d_c=64, d_cq=128, d_h_rope=8)
MLRA_CFG = AttnConfig(
    "mlra", branches=4, h=4, d=64, d_h=8, d_c=32, d_cq=32, d_h_rope=4, scaling=True
)


def test_sigma_zero_gives_zero_variances():
    report = estimate_variances(RAW_CFG, 0.0, 10_000, Rng(0))
    for stat in report.components.values():
        assert stat.sample == 0.0


def test_rotary_key_variance_prediction():
    report = estimate_variances(RAW_CFG, 0.02, 100_000, Rng(1))
    stat = report.components["k_rope"]
    assert stat.predicted == pytest.approx(256 * 0.02**2)
    assert stat.rel_dev <= 0.03
    assert report.components["k_nope"].rel_dev <= 0.03
    assert report.components["q_nope"].rel_dev <= 0.03


def test_mismatch_ratio_matches_width_ratio():
    report = estimate_variances(RAW_CFG, 0.02, 100_000, Rng(2))
    ratio = report.ratios["k_rope_over_k_nope"]
    want = RAW_CFG.d / RAW_CFG.d_c
    assert abs(ratio - want) / want <= 0.05


def test_calibration_restores_parity():
    report = verify_calibration(RAW_CFG.with_(scaling=True), 0.02, 100_000, Rng(3))
    assert abs(report.ratios["q_nope_over_k_rope"] - 1.0) <= 0.05
    assert abs(report.ratios["k_nope_over_k_rope"] - 1.0) <= 0.05


def test_disabled_scaling_reproduces_mismatch():
    # same machinery, alphas forced to 1: the ratio returns to d/d_c
    report = estimate_variances(RAW_CFG, 0.02, 50_000, Rng(4))
    assert report.ratios["k_rope_over_k_nope"] == pytest.approx(4.0, rel=0.05)


def test_branch_sum_parity_under_constructed_independence():
    report = verify_calibration(MLRA_CFG, 0.05, 20_000, Rng(5))
    assert abs(report.ratios["branch_sum_over_single"] - 4.0) <= 0.4
    assert abs(report.ratios["branch_sum_scaled_over_single"] - 1.0) <= 0.1


def test_grouped_variant_calibration():
    cfg = AttnConfig("gla", g=2, h=4, d=256, d_h=16, d_c=64, d_cq=128, d_h_rope=8, scaling=True)
    report = verify_calibration(cfg, 0.02, 50_000, Rng(6))
    assert abs(report.ratios["k_nope_over_k_rope"] - 1.0) <= 0.05


def test_trial_floor_enforced():
    with pytest.raises(ConfigError):
        estimate_variances(RAW_CFG, 0.02, 9_999, Rng(0))
    with pytest.raises(ConfigError):
        verify_calibration(RAW_CFG.with_(scaling=True), 0.02, 100, Rng(0))


def test_calibration_requires_scaling_enabled():
    with pytest.raises(ConfigError):
        verify_calibration(RAW_CFG, 0.02, 10_000, Rng(0))


def test_zoo_variant_rejected():
    cfg = AttnConfig("gqa", g=2, h=4, d=64, d_h=8)
    with pytest.raises(ConfigError):
        estimate_variances(cfg, 0.02, 10_000, Rng(0))


def test_reports_are_deterministic():
    a = estimate_variances(RAW_CFG, 0.02, 10_000, Rng(7)).to_json_dict()
    b = estimate_variances(RAW_CFG, 0.02, 10_000, Rng(7)).to_json_dict()
    assert a == b


def test_report_json_structure():
    report = estimate_variances(RAW_CFG, 0.02, 10_000, Rng(8))
    payload = report.to_json_dict()
    assert set(payload["components"]) == {"k_rope", "k_nope", "v", "q_nope", "q_rope"}
    for entry in payload["components"].values():
        assert entry["count"] >= 10_000
        assert entry["predicted_variance"] > 0
