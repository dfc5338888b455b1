import pytest
import torch

from conftest import small_model_config
from src.neural.fields import CodeBook, ComposedSdf, assemble_features, normalize_gradient
from src.neural.model import HeadModel
from src.utils.exceptions import CapabilityError, ContractError, IdentityLookupError


def test_codebook_lookup_and_unknown_identity():
    book = CodeBook(["a", "b"], code_dim=4)
    assert book.index("b") == 1
    assert "a" in book and "c" not in book
    with pytest.raises(IdentityLookupError, match="c"):
        book.index("c")


def test_codebook_rejects_duplicate_ids():
    with pytest.raises(ContractError):
        CodeBook(["a", "a"], code_dim=4)


def test_new_identity_gets_zero_codes():
    book = CodeBook(["a"], code_dim=3, init_std=0.5)
    index = book.add_identity("new")
    assert index == 1
    assert torch.equal(book.shape_code("new").detach(), torch.zeros(3))
    assert torch.equal(book.color_code("new").detach(), torch.zeros(3))
    with pytest.raises(ContractError):
        book.add_identity("new")


def test_fresh_deformation_is_zero_and_sdf_is_the_template(toy_model_config):
    torch.manual_seed(0)
    sdf = ComposedSdf(toy_model_config, ["a", "b"])
    x = torch.rand(10, 3) * 2 - 1
    z = sdf.codebook.shape_codes[torch.zeros(10, dtype=torch.long)]
    sample = sdf.evaluate(x, z, stage=1)
    template, _ = sdf.template_sdf(x)
    assert torch.equal(sample.d, torch.zeros_like(x))
    assert torch.allclose(sample.s, template)
    assert sample.f_def.shape == (10, toy_model_config.deformation_feature_dim)
    assert sample.f_tem.shape == (10, toy_model_config.template_feature_dim)


def test_refined_sdf_needs_a_displacement_network(toy_model_config):
    sdf = ComposedSdf(toy_model_config, ["a"])
    x = torch.zeros(2, 3)
    with pytest.raises(CapabilityError):
        sdf.evaluate(x, sdf.codebook.shape_codes[[0, 0]], stage=2)


def test_fresh_displacement_leaves_the_surface_unchanged(toy_model_config):
    torch.manual_seed(0)
    sdf = ComposedSdf(toy_model_config, ["a"])
    x = torch.rand(6, 3)
    z = sdf.codebook.shape_codes[torch.zeros(6, dtype=torch.long)]
    before = sdf.sdf(x, z, stage=1)
    sdf.attach_displacement()
    sample = sdf.evaluate(x, z, stage=2)
    assert torch.equal(sample.delta, torch.zeros(6))
    assert torch.allclose(sample.s_hat, before)
    assert sample.stage == 2


def test_assemble_features_by_stage(toy_model_config):
    sdf = ComposedSdf(toy_model_config, ["a"], stage=2)
    x = torch.rand(3, 3)
    z = sdf.codebook.shape_codes[torch.zeros(3, dtype=torch.long)]
    c = toy_model_config
    assert assemble_features(sdf.evaluate(x, z, 1), 1).shape[-1] == c.deformation_feature_dim + c.template_feature_dim
    assert assemble_features(sdf.evaluate(x, z, 2), 2).shape[-1] == (
        c.deformation_feature_dim + c.template_feature_dim + c.displacement_feature_dim
    )
    with pytest.raises(ContractError):
        assemble_features(sdf.evaluate(x, z, 1), 2)


def test_gradient_of_composed_sdf_flows_through_the_deformation():
    config = small_model_config(softplus_beta=10.0)
    torch.manual_seed(1)
    sdf = ComposedSdf(config, ["a"])
    with torch.no_grad():
        for p in sdf.deformation.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.rand(4, 3)
    z = sdf.codebook.shape_codes[torch.zeros(4, dtype=torch.long)]
    sample = sdf.evaluate_with_gradient(x, z, stage=1)

    h = 1e-6
    numeric = torch.empty(4, 3)
    with torch.no_grad():
        for k in range(3):
            step = torch.zeros(3)
            step[k] = h
            numeric[:, k] = (sdf.sdf(x + step, z, 1) - sdf.sdf(x - step, z, 1)) / (2 * h)
    assert torch.allclose(sample.grad, numeric, atol=1e-7)


def test_normalize_gradient_flags_degenerate_points():
    grad = torch.tensor([[3.0, 0.0, 4.0], [0.0, 0.0, 0.0]])
    normals, degenerate = normalize_gradient(grad)
    assert torch.allclose(normals[0], torch.tensor([0.6, 0.0, 0.8]))
    assert degenerate.tolist() == [False, True]


def perturbed_model(config, ids=("a", "b")):
    torch.manual_seed(2)
    model = HeadModel(config, list(ids))
    with torch.no_grad():
        model.codebook.shape_codes.normal_(0.0, 1.0)
        model.geometry.deformation.mlp.layers[-1].weight.normal_(0.0, 0.1)
    return model


def test_swapping_shape_codes_swaps_the_base_sdf(toy_model_config):
    model = perturbed_model(toy_model_config)
    points = torch.rand(2, 50, 3) * 2 - 1
    index = torch.tensor([0, 1])
    before = model.sdf_at(points, index, 1)
    assert not torch.equal(before[0], model.sdf_at(points, torch.tensor([1, 0]), 1)[0])
    with torch.no_grad():
        model.codebook.shape_codes.copy_(model.codebook.shape_codes[[1, 0]].clone())
    after = model.sdf_at(points, torch.tensor([1, 0]), 1)
    assert torch.equal(after, before)


def test_promotion_keeps_the_base_sdf_bitwise(toy_model_config):
    model = perturbed_model(toy_model_config)
    points = torch.rand(2, 500, 3) * 2 - 1
    index = torch.tensor([0, 1])
    base = model.sdf_at(points, index, 1)
    model.promote()
    assert torch.equal(model.sdf_at(points, index, 1), base)
    assert torch.equal(model.sdf_at(points, index, 2), base)
