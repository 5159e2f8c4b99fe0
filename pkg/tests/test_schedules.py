import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdsm.schedules import PRETRAIN, SEQUENCE, ScheduleConfig, pretrain_schedule, sequence_schedule


def test_pretrain_endpoints_exact():
    first, last = pretrain_schedule(0, 60), pretrain_schedule(59, 60)
    assert (first.lambda_z, first.lambda_s) == (30.0, 0.1)
    assert (last.lambda_z, last.lambda_s) == (1.0, 1.0)
    assert first.tau_s == 1.0 and last.tau_s == 10.0
    assert first.stage == PRETRAIN and first.lambda_d == 1.0


def test_sequence_endpoints_and_midpoint():
    assert sequence_schedule(0, 40).lambda_z == 0.1
    assert sequence_schedule(39, 40).lambda_z == 1.0
    # u = 1/2 exactly on an odd-length schedule
    assert sequence_schedule(5, 11).lambda_z == pytest.approx(0.1 + 0.9 * 0.25, abs=1e-15)
    st_ = sequence_schedule(17, 40)
    assert (st_.lambda_s, st_.lambda_d, st_.tau_s, st_.stage) == (1.0, 1.0, 10.0, SEQUENCE)


@given(st.integers(2, 300))
def test_pretrain_monotone_and_in_range(total):
    prev = None
    for e in range(total):
        a = pretrain_schedule(e, total)
        assert 1.0 <= a.lambda_z <= 30.0 and 0.1 <= a.lambda_s <= 1.0 and 1.0 <= a.tau_s <= 10.0
        if prev is not None:
            assert a.lambda_z <= prev.lambda_z and a.lambda_s >= prev.lambda_s and a.tau_s >= prev.tau_s
        prev = a
    assert pretrain_schedule(total - 1, total).lambda_z == 1.0


@given(st.integers(2, 300))
def test_sequence_rises(total):
    vals = [sequence_schedule(e, total).lambda_z for e in range(total)]
    assert vals == sorted(vals) and vals[0] == 0.1 and vals[-1] == 1.0


def test_single_epoch_stage_uses_end_values():
    assert pretrain_schedule(0, 1).lambda_z == 1.0
    assert sequence_schedule(0, 1).lambda_z == 1.0


@pytest.mark.parametrize("fn", [pretrain_schedule, sequence_schedule])
@pytest.mark.parametrize("epoch, total", [(-1, 5), (5, 5), (0, 0)])
def test_out_of_range(fn, epoch, total):
    with pytest.raises(ValueError):
        fn(epoch, total)


def test_pure_and_configurable():
    cfg = ScheduleConfig(tau_max=4.0, seq_lambda_z_start=0.2)
    assert pretrain_schedule(3, 9, cfg) == pretrain_schedule(3, 9, cfg)
    assert sequence_schedule(0, 9, cfg).lambda_z == 0.2 and sequence_schedule(0, 9, cfg).tau_s == 4.0
    assert pretrain_schedule(2, 5).to_dict()["epoch"] == 2
