import math

import numpy as np
import pytest
import torch

from src.models.config import ModelConfig
from src.neural.model import HeadModel
from src.neural.renderer import (
    BOUNDING_RADIUS,
    MISS_INTERVAL,
    Camera,
    DensityParams,
    RadianceField,
    composite,
    generate_rays,
    RayBundle,
    laplace_cdf,
    render_pixel,
    render_rays,
    s_density,
    sample_along_ray,
    sample_pdf,
    separate_ties,
    stratified_samples,
)
from src.services.synthetic_service import look_at
from src.utils.exceptions import ContractError, DataError


def frontal_camera(size: int = 9, focal: float = 12.0) -> Camera:
    k = [[focal, 0.0, size / 2.0], [0.0, focal, size / 2.0], [0.0, 0.0, 1.0]]
    return Camera(k, look_at(np.array([0.0, 0.0, 3.0])), size, size)


def test_center_pixel_looks_at_the_origin():
    rays = generate_rays(frontal_camera(), [[4, 4]])
    assert torch.allclose(rays.origins[0], torch.tensor([0.0, 0.0, 3.0]))
    assert torch.allclose(rays.directions[0], torch.tensor([0.0, 0.0, -1.0]))
    assert float(rays.near[0]) == pytest.approx(3.0 - BOUNDING_RADIUS)
    assert float(rays.far[0]) == pytest.approx(3.0 + BOUNDING_RADIUS)
    assert bool(rays.hit[0])


def test_image_axes_follow_opencv_convention():
    rays = generate_rays(frontal_camera(), [[8, 4], [4, 8]])
    # camera at +z looking toward -z with up = +y: image right is -x, image down is -y
    assert float(rays.directions[0, 0]) < 0
    assert float(rays.directions[1, 1]) < 0


def test_pixel_outside_image_is_rejected():
    with pytest.raises(DataError):
        generate_rays(frontal_camera(), [[9, 0]])


def test_ray_missing_the_bounding_sphere_gets_a_tiny_interval():
    camera = Camera([[10.0, 0.0, 5.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]],
                    look_at(np.array([0.0, 0.0, 3.0]), target=np.array([0.0, 0.0, 6.0])), 10, 10)
    rays = generate_rays(camera, [[5, 5]])
    assert not bool(rays.hit[0])
    assert float(rays.far[0] - rays.near[0]) == pytest.approx(MISS_INTERVAL)


def test_camera_validation():
    k = [[10.0, 0.0, 5.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]]
    reflected = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(DataError):
        Camera(k, reflected, 10, 10)
    with pytest.raises(DataError):
        Camera([[-1.0, 0.0, 5.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]], np.eye(4), 10, 10)
    with pytest.raises(DataError):
        Camera(k, np.eye(4), 0, 10)


def test_all_pixels_row_major():
    pixels = Camera([[4.0, 0.0, 1.5], [0.0, 4.0, 1.0], [0.0, 0.0, 1.0]], np.eye(4), 3, 2).all_pixels()
    assert pixels.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]


def test_laplace_cdf_and_density():
    beta = 0.1
    assert float(laplace_cdf(torch.tensor(0.0), beta)) == pytest.approx(0.5)
    assert float(laplace_cdf(torch.tensor(-0.2), beta)) == pytest.approx(0.5 * math.exp(-2.0))
    assert float(laplace_cdf(torch.tensor(0.2), beta)) == pytest.approx(1 - 0.5 * math.exp(-2.0))
    assert float(s_density(torch.tensor(-10.0), 10.0, beta)) == pytest.approx(10.0)
    assert float(s_density(torch.tensor(0.0), 10.0, beta)) == pytest.approx(5.0)


def test_density_params_defaults():
    density = DensityParams(0.1)
    assert float(density.beta) == pytest.approx(0.1)
    assert float(density.alpha) == pytest.approx(10.0)


def test_stratified_samples_are_sorted_and_inside_the_interval():
    rays = generate_rays(frontal_camera(), [[4, 4], [0, 0]])
    t = stratified_samples(rays, 16, torch.Generator().manual_seed(0), perturb=True)
    assert bool((t[:, 1:] >= t[:, :-1]).all())
    assert bool((t >= rays.near[:, None]).all()) and bool((t <= rays.far[:, None]).all())
    with pytest.raises(ContractError):
        stratified_samples(rays, 1)


def test_sample_pdf_concentrates_on_heavy_bins():
    bins = torch.linspace(0.0, 1.0, 11).expand(2, 11)
    weights = torch.zeros(2, 10)
    weights[:, 3] = 1.0
    samples = sample_pdf(bins, weights, 32, deterministic=True)
    inside = ((samples >= 0.3) & (samples <= 0.4)).double().mean()
    assert float(inside) > 0.9


def test_composite_constant_density():
    sigma = torch.full((1, 4), 2.0)
    t = torch.tensor([[0.0, 0.5, 1.0, 1.5]])
    rgb = torch.ones(1, 4, 3) * torch.tensor([0.2, 0.4, 0.6])
    out = composite(sigma, rgb, t, far=torch.tensor([2.0]))
    expected_opacity = 1.0 - math.exp(-2.0 * 2.0)
    assert float(out.transmittance[0, 0]) == 1.0
    assert float(out.opacity[0]) == pytest.approx(expected_opacity)
    assert torch.allclose(out.color[0], torch.tensor([0.2, 0.4, 0.6]) * expected_opacity)
    assert float(out.weights[0, 0]) == pytest.approx(1.0 - math.exp(-1.0))


def test_composite_background_fills_transparency():
    out = composite(torch.zeros(1, 3), torch.zeros(1, 3, 3), torch.tensor([[0.0, 1.0, 2.0]]),
                    far=torch.tensor([3.0]), background=torch.tensor([1.0, 1.0, 1.0]))
    assert torch.allclose(out.color, torch.ones(1, 3))


def test_composite_rejects_unsorted_depths():
    with pytest.raises(DataError):
        composite(torch.ones(1, 3), torch.zeros(1, 3, 3), torch.tensor([[0.0, 2.0, 1.0]]), far=torch.tensor([3.0]))


def test_rendering_input_width_per_stage():
    config = ModelConfig()
    assert RadianceField(config, 1).input_dim == 453
    assert RadianceField(config, 2).input_dim == 541


def test_grown_rendering_network_reproduces_stage_one(toy_model_config):
    torch.manual_seed(0)
    field = RadianceField(toy_model_config, 1)
    grown = field.grown()
    c = toy_model_config
    n = 12
    z_c, x, v, n_vec = torch.randn(n, c.code_dim), torch.rand(n, 3), torch.randn(n, 3), torch.randn(n, 3)
    features = torch.randn(n, field.feature_dim)
    f_dis = torch.randn(n, c.displacement_feature_dim)
    before = field(z_c, x, v, features, n_vec)
    after = grown(z_c, x, v, torch.cat([features, f_dis], dim=-1), n_vec)
    assert torch.allclose(before, after, atol=1e-12)
    with pytest.raises(ContractError):
        grown(z_c, x, v, features, n_vec)


def test_promotion_preserves_rendered_pixels(toy_model_config):
    torch.manual_seed(0)
    model = HeadModel(toy_model_config, ["a", "b"])
    with torch.no_grad():
        model.geometry.deformation.mlp.layers[-1].weight.normal_(0.0, 0.05)
    rays = generate_rays(frontal_camera(), [[4, 4], [2, 6], [7, 1]])
    index = torch.tensor([0, 1, 0])
    kwargs = dict(n_coarse=8, n_fine=4, perturb=False, background=[1.0, 1.0, 1.0], create_graph=False)
    before = render_rays(model, rays, index, 1, **kwargs).output
    model.promote()
    after = render_rays(model, rays, index, 2, **kwargs).output
    assert torch.allclose(before.color, after.color, atol=1e-10)
    assert torch.allclose(before.opacity, after.opacity, atol=1e-10)


def test_render_stage_must_match_the_model(toy_model_config):
    model = HeadModel(toy_model_config, ["a"])
    with pytest.raises(ContractError):
        render_pixel(frontal_camera(), (4, 4), model, 0, stage=2, n_coarse=4, n_fine=0, perturb=False)


def test_render_pixel_outputs_valid_color(toy_model_config):
    torch.manual_seed(0)
    model = HeadModel(toy_model_config, ["a"])
    color, out = render_pixel(frontal_camera(), (4, 4), model, 0, stage=1, n_coarse=16, n_fine=8, perturb=False)
    assert color.shape == (3,)
    assert bool(((color >= 0) & (color <= 1)).all())
    assert 0.0 <= float(out.opacity[0]) <= 1.0 + 1e-12
    assert out.normal_map.shape == (1, 3)


def test_back_projection_of_the_corner_pixel():
    rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = [0.0, 0.0, -3.0]
    k = np.array([[2.0, 0.0, 1.0], [0.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
    rays = generate_rays(Camera(k, pose, 2, 2), [[0, 0]])
    expected = rotation @ np.linalg.solve(k, [0.5, 0.5, 1.0])
    expected /= np.linalg.norm(expected)
    assert np.allclose(rays.directions[0].numpy(), expected, atol=1e-12)
    assert np.allclose(expected, np.array([0.25, -0.25, 1.0]) / math.sqrt(1.125))
    assert torch.equal(rays.origins[0], torch.tensor([0.0, 0.0, -3.0]))


def test_ray_directions_are_unit_length():
    pixels = frontal_camera().all_pixels()
    rays = generate_rays(frontal_camera(), pixels)
    assert torch.allclose(torch.linalg.norm(rays.directions, dim=-1), torch.ones(len(pixels)), atol=1e-12)


def test_density_matches_the_laplace_closed_form():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1.0, 1.0, 10_000)
    alpha, beta = 7.0, 0.05
    expected = alpha * np.where(s >= 0, 0.5 * np.exp(-s / beta), 1.0 - 0.5 * np.exp(s / beta))
    sigma = s_density(torch.from_numpy(s), alpha, beta).numpy()
    assert np.allclose(sigma, expected, rtol=1e-12, atol=0.0)
    doubled = s_density(torch.from_numpy(s), 2 * alpha, beta).numpy()
    assert np.allclose(doubled, 2 * sigma, rtol=1e-14, atol=0.0)
    order = np.argsort(s)
    assert np.all(np.diff(sigma[order]) <= 0)


def test_density_worked_example():
    assert float(s_density(torch.tensor(0.1), 1.0, 0.1)) == pytest.approx(0.5 * math.exp(-1.0), abs=1e-5)
    assert float(s_density(torch.tensor(0.1), 1.0, 0.1)) == pytest.approx(0.18394, abs=1e-5)


def test_composite_weights_form_a_partition_of_opacity():
    generator = torch.Generator().manual_seed(0)
    sigma = torch.rand(64, 24, generator=generator) * 40.0
    sigma[:, ::5] = 0.0
    t, _ = torch.sort(torch.rand(64, 24, generator=generator) * 2.0, dim=-1)
    rgb = torch.rand(64, 24, 3, generator=generator)
    out = composite(sigma, rgb, t, far=torch.full((64,), 2.5))
    assert bool((out.weights >= 0).all()) and bool((out.weights <= 1).all())
    assert bool((out.weights.sum(-1) <= 1 + 1e-6).all())
    assert bool((out.transmittance[:, 1:] <= out.transmittance[:, :-1]).all())
    assert torch.equal(out.transmittance[:, 0], torch.ones(64))


def test_composite_of_constant_radiance_scales_by_opacity():
    generator = torch.Generator().manual_seed(1)
    sigma = torch.rand(16, 10, generator=generator) * 5.0
    t, _ = torch.sort(torch.rand(16, 10, generator=generator), dim=-1)
    c = torch.tensor([0.3, 0.6, 0.9])
    out = composite(sigma, c.expand(16, 10, 3), t, far=torch.full((16,), 1.5))
    assert torch.allclose(out.color, out.opacity[:, None] * c, atol=1e-12, rtol=0.0)


def test_composite_two_sample_worked_example():
    sigma = torch.tensor([[math.log(2.0), 20.0]])
    rgb = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    out = composite(sigma, rgb, torch.tensor([[0.0, 1.0]]), far=torch.tensor([2.0]))
    assert float(out.weights[0, 0]) == pytest.approx(0.5, abs=1e-12)
    assert float(out.weights[0, 1]) == pytest.approx(0.5 * (1.0 - math.exp(-20.0)), abs=1e-12)
    assert torch.allclose(out.color[0], torch.tensor([0.5, 0.5, 0.0]), atol=1e-8)


def test_composite_single_sample_half_opacity():
    out = composite(torch.tensor([[math.log(2.0)]]), torch.ones(1, 1, 3), torch.tensor([[0.0]]),
                    far=torch.tensor([1.0]))
    assert float(out.weights[0, 0]) == pytest.approx(0.5, abs=1e-12)


def test_opacity_grows_with_density():
    t = torch.tensor([[0.0, 0.4, 0.9, 1.3]])
    sigma = torch.tensor([[0.5, 1.0, 0.2, 3.0]])
    base = composite(sigma, torch.zeros(1, 4, 3), t, far=torch.tensor([2.0])).opacity
    for i in range(4):
        denser = sigma.clone()
        denser[0, i] += 1.0
        assert float(composite(denser, torch.zeros(1, 4, 3), t, far=torch.tensor([2.0])).opacity) > float(base)


def test_importance_samples_gather_at_the_sphere_surface():
    camera = frontal_camera()
    rays = generate_rays(camera, [[4, 4], [5, 4], [4, 3]])
    radius, alpha, beta = 0.5, 10.0, 0.1
    along = (rays.origins * rays.directions).sum(-1)
    crossing = -along - torch.sqrt(along ** 2 - ((rays.origins ** 2).sum(-1) - radius ** 2))

    def weights_fn(t):
        sdf = torch.linalg.norm(rays.at(t), dim=-1) - radius
        return composite(s_density(sdf, alpha, beta), torch.zeros(*t.shape, 3), t, rays.far).weights

    merged = sample_along_ray(rays, 64, 64, None, weights_fn, perturb=False)
    coarse = stratified_samples(rays, 64, perturb=False)

    def near_surface(t):
        return ((t - crossing[:, None]).abs() <= 2 * beta).sum(-1)

    fine_near_surface = near_surface(merged) - near_surface(coarse)
    assert bool((fine_near_surface >= 0.6 * 64).all())


def test_merged_samples_are_strictly_increasing_when_fine_samples_pile_up():
    rays = generate_rays(frontal_camera(), [[4, 4], [0, 8]])

    def last_bin_only(t):
        weights = torch.zeros_like(t)
        weights[:, -1] = 1.0
        return weights

    t = sample_along_ray(rays, 2, 6, None, last_bin_only, perturb=False)
    assert t.shape == (2, 8)
    assert bool((t[:, 1:] > t[:, :-1]).all())
    assert bool((t >= rays.near[:, None]).all()) and bool((t <= rays.far[:, None]).all())
    assert torch.equal(t[:, 0], rays.near)
    assert torch.allclose(t[:, -1], rays.far, rtol=1e-12, atol=0.0)


def test_random_merged_samples_are_strictly_increasing():
    rays = generate_rays(frontal_camera(), frontal_camera().all_pixels())
    t = sample_along_ray(rays, 16, 16, torch.Generator().manual_seed(3), torch.ones_like, perturb=True)
    assert bool((t[:, 1:] > t[:, :-1]).all())
    assert bool((t >= rays.near[:, None]).all()) and bool((t <= rays.far[:, None]).all())


def test_separate_ties_leaves_distinct_rows_alone():
    t = torch.tensor([[0.0, 0.5, 1.0], [0.0, 0.5, 0.5]])
    out = separate_ties(t, torch.zeros(2), torch.ones(2))
    assert torch.equal(out[0], t[0])
    assert bool((out[1, 1:] > out[1, :-1]).all())
    assert torch.allclose(out[1], t[1], atol=1e-8)
