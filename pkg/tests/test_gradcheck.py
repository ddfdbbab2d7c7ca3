import pytest

from src.gradcheck import LOSS_NAMES, TOLERANCE, TinySetup, check_loss, run_gradcheck


def test_every_loss_passes_for_one_seed():
    report = run_gradcheck(0)
    assert report["passed"], report
    assert set(report["losses"]) == set(LOSS_NAMES)
    assert report["max_relative_error"] <= TOLERANCE


def test_correction_losses_only_touch_psi():
    setup = TinySetup(1)
    assert setup.groups_for("cor") == ["psi"]
    assert "psi" not in setup.groups_for("stage1")
    report = check_loss("cor", 1)
    assert set(report.errors) == {"psi"}


def test_unknown_loss_is_rejected():
    with pytest.raises(KeyError):
        TinySetup(0).loss("meteor")


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_over_many_seeds(seed):
    assert run_gradcheck(seed)["passed"]
