import pytest

from pod_scaling.models import EquivalenceRow, MetricsRecord


def test_equivalence_row_passes_within_tolerance():
    assert EquivalenceRow(check="conv", case="k3", max_deviation=0.0).passed
    assert EquivalenceRow(check="bn", case="4", max_deviation=5e-7, tolerance=1e-6).passed
    assert not EquivalenceRow(check="conv", case="k3", max_deviation=1e-9).passed


def test_metrics_record_rejects_metric_outside_unit_interval():
    with pytest.raises(ValueError):
        MetricsRecord(epoch=1, train_loss=0.5, eval_metric=1.5, wall_steps=4)


def test_metrics_record_to_dict():
    record = MetricsRecord(epoch=2, train_loss=0.25, eval_metric=0.75, wall_steps=8)
    assert record.to_dict() == {"epoch": 2, "train_loss": 0.25, "eval_metric": 0.75, "wall_steps": 8}
