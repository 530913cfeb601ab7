import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epibatch.budget import (
    BudgetWarning,
    CalibratedSchedule,
    EarlyStopState,
    FixedPlan,
    ScheduleSpec,
    calibrate,
    early_stop_update,
    fixed_budget,
    iterations_per_epoch,
    lr_at,
)


# ---------------------------------------------------- iterations per epoch

def test_ipe_reference_figures():
    # the two published slice counts that pin the rounding rule
    assert iterations_per_epoch(8369, batch_size=16) == 523
    assert iterations_per_epoch(684, batch_size=16) == 43


def test_ipe_episodic_constant():
    assert iterations_per_epoch(8369, episodes_per_epoch=500) == 500
    assert iterations_per_epoch(1, episodes_per_epoch=500) == 500


def test_ipe_round_half_up_boundary():
    assert iterations_per_epoch(24, batch_size=16) == 2  # 1.5 rounds up
    assert iterations_per_epoch(23, batch_size=16) == 1  # 1.4375 rounds down
    assert iterations_per_epoch(8, batch_size=16) == 1  # floor of 1


def test_ipe_argument_validation():
    with pytest.raises(ValueError, match="exactly one"):
        iterations_per_epoch(10)
    with pytest.raises(ValueError, match="exactly one"):
        iterations_per_epoch(10, batch_size=4, episodes_per_epoch=5)
    with pytest.raises(ValueError):
        iterations_per_epoch(0, batch_size=4)
    with pytest.raises(ValueError):
        iterations_per_epoch(10, batch_size=0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 10**6), b=st.integers(1, 10**4))
def test_ipe_matches_decimal_round_half_up(n, b):
    exact = n / b
    expected = max(1, math.floor(exact + 0.5))
    assert iterations_per_epoch(n, batch_size=b) == expected


# ---------------------------------------------------------------- schedule

def test_schedule_spec_validation():
    with pytest.raises(ValueError):
        ScheduleSpec(base_lr=0.0)
    with pytest.raises(ValueError):
        ScheduleSpec(gamma=1.0)
    with pytest.raises(ValueError):
        ScheduleSpec(milestones=(45, 30))
    with pytest.raises(ValueError):
        ScheduleSpec(milestones=(0, 10))
    with pytest.raises(ValueError):
        ScheduleSpec(patience_epochs=0)
    ScheduleSpec(milestones=())  # no decay is legal


def test_lr_at_epoch_unit():
    spec = ScheduleSpec(base_lr=1e-4, milestones=(30, 45), gamma=0.1)
    assert lr_at(spec, 0) == pytest.approx(1e-4)
    assert lr_at(spec, 29) == pytest.approx(1e-4)
    assert lr_at(spec, 30) == pytest.approx(1e-5)
    assert lr_at(spec, 44) == pytest.approx(1e-5)
    assert lr_at(spec, 45) == pytest.approx(1e-6)
    assert lr_at(spec, 199) == pytest.approx(1e-6)


def test_lr_at_iteration_unit():
    spec = ScheduleSpec(base_lr=1e-4, milestones=(30, 45), gamma=0.1, iters_per_epoch=500)
    assert lr_at(spec, 14_999, unit="iteration") == pytest.approx(1e-4)
    assert lr_at(spec, 15_000, unit="iteration") == pytest.approx(1e-5)
    assert lr_at(spec, 22_499, unit="iteration") == pytest.approx(1e-5)
    assert lr_at(spec, 22_500, unit="iteration") == pytest.approx(1e-6)


def test_lr_at_rejects_bad_unit():
    spec = ScheduleSpec()
    with pytest.raises(ValueError):
        lr_at(spec, 0, unit="minute")


# --------------------------------------------------------------- calibrate

def test_calibrate_reference_numbers():
    spec = ScheduleSpec(milestones=(30, 45), patience_epochs=20, max_epochs=200)
    with pytest.warns(BudgetWarning):
        cal = calibrate(spec, reference_ipe=500, target_ipe=43)
    assert cal.milestone_iters == (15_000, 22_500)
    assert cal.milestone_epochs == (349, 523)
    assert cal.patience_iters == 10_000
    assert cal.patience_epochs == 233
    assert cal.max_iters == 100_000


def test_calibrate_keeps_computed_cap_and_warns():
    spec = ScheduleSpec(milestones=(30, 45), patience_epochs=20, max_epochs=200)
    with pytest.warns(BudgetWarning, match="2500"):
        cal = calibrate(spec, reference_ipe=500, target_ipe=43)
    # round-half-up(100000/43) = 2326; the previously reported 2500 is noted,
    # never silently adopted
    assert cal.max_epochs == 2326
    assert any("2500" in n for n in cal.notes)
    assert any("2326" in n for n in cal.notes)


def test_calibrate_no_warning_off_the_reported_case():
    spec = ScheduleSpec(milestones=(30, 45), patience_epochs=20, max_epochs=200)
    import warnings as w

    with w.catch_warnings():
        w.simplefilter("error")
        cal = calibrate(spec, reference_ipe=500, target_ipe=523)
    assert cal.max_epochs == 191  # round_half_up(100000/523)
    assert cal.notes == ()


def test_calibrate_identity_when_ipes_match():
    spec = ScheduleSpec(milestones=(30, 45), patience_epochs=20, max_epochs=200)
    cal = calibrate(spec, reference_ipe=500, target_ipe=500)
    assert cal.milestone_epochs == (30, 45)
    assert cal.patience_epochs == 20
    assert cal.max_epochs == 200


def test_calibrate_roundtrip_to_schedule_spec():
    spec = ScheduleSpec(base_lr=3e-4, milestones=(30, 45), gamma=0.2)
    with pytest.warns(BudgetWarning):
        cal = calibrate(spec, reference_ipe=500, target_ipe=43)
    back = cal.to_schedule_spec()
    assert back.base_lr == spec.base_lr
    assert back.gamma == spec.gamma
    assert back.milestones == cal.milestone_epochs
    assert back.iters_per_epoch == 43


def test_calibrate_json_is_serializable():
    import json

    spec = ScheduleSpec()
    cal = calibrate(spec, reference_ipe=500, target_ipe=500)
    blob = json.dumps(cal.to_json())
    assert json.loads(blob)["max_epochs"] == 200


@settings(max_examples=60, deadline=None)
@given(
    milestones=st.lists(st.integers(1, 300), unique=True, max_size=4).map(
        lambda xs: tuple(sorted(xs))
    ),
    ref=st.integers(1, 600),
    tgt=st.integers(1, 600),
)
def test_calibrate_preserves_iteration_totals(milestones, ref, tgt):
    spec = ScheduleSpec(milestones=milestones)
    import warnings as w

    with w.catch_warnings():
        w.simplefilter("ignore")
        cal = calibrate(spec, reference_ipe=ref, target_ipe=tgt)
    # iteration-space values are exact; epoch view is the rounded quotient
    assert cal.milestone_iters == tuple(m * ref for m in milestones)
    for it, ep in zip(cal.milestone_iters, cal.milestone_epochs):
        assert ep == (2 * it + tgt) // (2 * tgt)
        assert abs(ep * tgt - it) <= tgt / 2 + 1


# ------------------------------------------------------------ early stop

def test_early_stop_plateau_counts_from_best():
    st_ = EarlyStopState(patience=2)
    st_ = early_stop_update(st_, 1, 0.7)
    assert not st_.stopped and st_.best_step == 1
    st_ = early_stop_update(st_, 2, 0.7)  # equal is not an improvement
    assert not st_.stopped and st_.steps_since_improve == 1
    st_ = early_stop_update(st_, 3, 0.7)
    assert st_.stopped and st_.best_step == 1


def test_early_stop_improvement_resets():
    st_ = EarlyStopState(patience=2)
    for step, m in ((1, 0.5), (2, 0.4), (3, 0.6)):
        st_ = early_stop_update(st_, step, m)
    assert not st_.stopped and st_.best_step == 3 and st_.steps_since_improve == 0


def test_early_stop_rejects_nan_and_inf():
    st_ = EarlyStopState(patience=2)
    with pytest.raises(ValueError, match="non-finite"):
        early_stop_update(st_, 1, float("nan"))
    with pytest.raises(ValueError, match="non-finite"):
        early_stop_update(st_, 1, float("inf"))


def test_early_stop_rejects_non_increasing_steps():
    st_ = EarlyStopState(patience=2)
    st_ = early_stop_update(st_, 5, 0.1)
    with pytest.raises(ValueError, match="increasing"):
        early_stop_update(st_, 5, 0.2)


def _brute_force_stop(metrics, patience):
    """First index at which (step - argmax-so-far) >= patience, else None.

    Steps are 1..len(metrics); best is the earliest strict maximum so far.
    """
    best, best_step = -math.inf, -1
    for i, m in enumerate(metrics, start=1):
        if m > best:
            best, best_step = m, i
        elif i - best_step >= patience:
            return i
    return None


@settings(max_examples=120, deadline=None)
@given(
    metrics=st.lists(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=50
    ),
    patience=st.integers(1, 10),
)
def test_early_stop_matches_brute_force(metrics, patience):
    st_ = EarlyStopState(patience=patience)
    stopped_at = None
    for i, m in enumerate(metrics, start=1):
        st_ = early_stop_update(st_, i, m)
        if st_.stopped:
            stopped_at = i
            break
    assert stopped_at == _brute_force_stop(metrics, patience)


# ------------------------------------------------------------ fixed plan

def test_fixed_budget_plan():
    plan = fixed_budget(3000, base_lr=1e-3, eval_every=100)
    assert plan.iterations == 3000
    assert plan.base_lr == 1e-3
    assert plan.eval_every == 100


def test_fixed_budget_validation():
    with pytest.raises(ValueError):
        fixed_budget(0)
    with pytest.raises(ValueError):
        fixed_budget(100, eval_every=0)


def test_fixed_plan_json_roundtrip():
    plan = fixed_budget(3000, base_lr=2e-4, eval_every=50)
    assert FixedPlan.from_json(plan.to_json()) == plan
