import pytest

from dpcache.engine import EngineCost
from dpcache.errors import InvalidInput
from dpcache.harness import calibration_closure, fp_overhead_expectation
from dpcache.simclock import (
    HIGH_END,
    LOW_END,
    REFERENCE_BREAKDOWNS,
    REFERENCE_TTFT_TTLT,
    DeviceProfile,
    TransferModel,
    VirtualClock,
    calibrate_profile,
    partial_match_cost,
    resolve_profile,
)


def test_transfer_model_affine():
    t = TransferModel(fixed_rtt_ms=3, bytes_per_ms=1000)
    assert t.transfer_ms(0) == 3
    assert t.transfer_ms(5000) == 8


@pytest.mark.parametrize("kw", [{"fixed_rtt_ms": -1}, {"bytes_per_ms": 0}, {"fixed_rtt_ms": float("inf")}])
def test_transfer_model_rejects(kw):
    with pytest.raises(InvalidInput):
        TransferModel(**kw)


def test_low_end_constants():
    c = LOW_END.engine_cost
    assert c.prefill_ms_per_token == pytest.approx(12580.85 / 404)
    assert LOW_END.reference_state_bytes == pytest.approx(2.25e6)
    assert LOW_END.transfer.transfer_ms(LOW_END.reference_state_bytes) == pytest.approx(861.92)
    assert LOW_END.bloom_probe_ms == pytest.approx(0.10)
    assert c.response_ms_per_token == pytest.approx((11061.04 + 10904.67) / 2)


def test_high_end_state_size():
    assert HIGH_END.reference_state_bytes == pytest.approx(9.94e6)
    assert HIGH_END.transfer.transfer_ms(HIGH_END.reference_state_bytes) == pytest.approx(2887.04)


def test_calibration_reproduces_rows_at_reference_length():
    for name, prof in (("low-end", LOW_END), ("high-end", HIGH_END)):
        miss = REFERENCE_BREAKDOWNS[name]["miss"]
        n = prof.reference_tokens
        assert prof.engine_cost.prefill_cost(0, n) == pytest.approx(miss.p_decode)


@pytest.mark.parametrize("name", ["low-end", "high-end"])
def test_reference_rows_close_on_reported_ratios(name):
    got = calibration_closure(name)
    ref = REFERENCE_TTFT_TTLT[name]
    assert got["ttft_ratio_pct"] == pytest.approx(ref["ttft"][2], abs=0.5)
    assert got["ttlt_ratio_pct"] == pytest.approx(ref["ttlt"][2], abs=0.5)


def test_calibrate_rejects_bad_inputs():
    with pytest.raises(InvalidInput):
        calibrate_profile("low-end", 0)
    with pytest.raises(InvalidInput):
        calibrate_profile("low-end", 100, state_base_bytes=3e6)


def test_profile_toml_round_trip(tmp_path):
    prof = LOW_END.with_engine_cost(prefill_schedule=partial_match_cost().prefill_schedule)
    path = tmp_path / "p.toml"
    path.write_text(prof.to_toml())
    assert DeviceProfile.load(path) == prof
    assert resolve_profile(str(path)) == prof


def test_profile_missing_section(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('name = "x"\nstate_bytes_per_token = 1.0\n')
    with pytest.raises(InvalidInput):
        DeviceProfile.load(path)


def test_resolve_unknown():
    assert resolve_profile("high-end") is HIGH_END
    with pytest.raises(InvalidInput):
        resolve_profile("no-such-profile")


def test_fp_expectation_linear():
    assert fp_overhead_expectation(LOW_END, 0.0) == 0
    assert fp_overhead_expectation(LOW_END, 0.01) == pytest.approx(8.6192)
    assert fp_overhead_expectation(LOW_END, 0.02) == pytest.approx(2 * 8.6192)
    with pytest.raises(ValueError):
        fp_overhead_expectation(LOW_END, 1.0)


def test_partial_schedule_hits_reference_points():
    cost = partial_match_cost()
    full = cost.prefill_cost(0, 405)
    assert full - cost.prefill_cost(10, 395) == pytest.approx(915.73)
    assert full - cost.prefill_cost(405, 0) == pytest.approx(15983.01)
    assert isinstance(cost, EngineCost)


def test_virtual_clock():
    clk = VirtualClock()
    clk.charge("a", 1.5)
    clk.charge("b", 2)
    assert clk.now_ms == 3.5 and [label for label, _ in clk.log] == ["a", "b"]
    with pytest.raises(InvalidInput):
        clk.charge("neg", -1)
