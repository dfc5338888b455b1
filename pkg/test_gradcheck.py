import pytest
import torch
from torch import nn

from src.neural.fields import DisplacementField
from src.services.gradcheck_service import (
    FIRST_ORDER_TOLERANCE,
    SECOND_ORDER_TOLERANCE,
    GradcheckService,
    check_gradient,
)
from src.utils.exceptions import UsageError


def test_every_loss_term_matches_finite_differences():
    report = GradcheckService().run()
    assert report.passed
    orders = {term.name: term.order for term in report.terms}
    assert orders == {
        "color": 2,
        "deformation": 1,
        "deformation_gradient": 2,
        "eikonal": 2,
        "displacement": 1,
        "displacement_tv": 2,
        "code": 1,
    }
    assert report.first_order_max_rel_error < FIRST_ORDER_TOLERANCE
    assert report.second_order_max_rel_error < SECOND_ORDER_TOLERANCE
    assert all(term.checked > 0 and not term.unreached for term in report.terms)


def test_check_gradient_samples_every_tensor():
    a = nn.Parameter(torch.tensor([0.5, -1.5, 2.0]))
    b = nn.Parameter(torch.tensor([[1.0, 2.0], [3.0, -4.0]]))
    outcome = check_gradient(lambda: (a ** 3).sum() + (b ** 2).sum(), [("a", a), ("b", b)],
                             torch.Generator().manual_seed(0), samples=0)
    assert outcome.checked == 2
    assert outcome.max_rel_error < 1e-8
    assert outcome.unreached == []


def test_check_gradient_flags_a_detached_parameter():
    a = nn.Parameter(torch.tensor([0.5, -1.5, 2.0]))
    b = nn.Parameter(torch.tensor([1.0, 2.0, 3.0]))
    outcome = check_gradient(lambda: (a ** 2).sum() + (b.detach() ** 2).sum(), [("a", a), ("b", b)],
                             torch.Generator().manual_seed(0), samples=4)
    assert outcome.unreached == ["b"]
    assert outcome.max_rel_error == pytest.approx(1.0)


def test_detached_displacement_fails_the_color_term(monkeypatch):
    original = DisplacementField.forward

    def detached(self, x, f_tem, f_def):
        delta, features = original(self, x, f_tem, f_def)
        return delta.detach(), features.detach()

    monkeypatch.setattr(DisplacementField, "forward", detached)
    report = GradcheckService().run(terms=["color"])
    assert not report.passed
    (color,) = report.terms
    assert color.unreached
    assert all(".displacement." in name for name in color.unreached)


def test_unknown_term_is_a_usage_error():
    with pytest.raises(UsageError):
        GradcheckService().run(terms=["smoothness"])
