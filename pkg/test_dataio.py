import json
import shutil

import numpy as np
import pytest
import torch

from src.models.manifest import IdentityRecord, IdentityShape, SceneSpec, ViewRecord
from src.neural.renderer import Camera, generate_rays
from src.services.dataset_service import (
    TrainingSet,
    load_dataset,
    load_view,
    normalize_pose,
    split_views,
    write_manifest,
)
from src.services.mesh_service import read_obj
from src.services.synthetic_service import (
    AnalyticHead,
    frontal_arc_poses,
    generate_synthetic,
    intrinsics_for,
    look_at,
    render_analytic,
    sphere_trace,
)
from src.models.config import TrainConfig
from src.utils.exceptions import DataError, IdentityLookupError
from src.utils.image_utils import load_png


def unit_sphere(p: torch.Tensor) -> torch.Tensor:
    return torch.linalg.norm(p, dim=-1) - 1.0


def test_sphere_trace_hits_the_unit_sphere():
    hit, t, points = sphere_trace(unit_sphere, torch.tensor([[0.0, 0.0, 3.0]]), torch.tensor([[0.0, 0.0, -1.0]]))
    assert bool(hit[0])
    assert float(t[0]) == pytest.approx(2.0, abs=1e-6)
    assert torch.allclose(points[0], torch.tensor([0.0, 0.0, 1.0]), atol=1e-6)


def test_sphere_trace_reports_a_miss():
    hit, _, _ = sphere_trace(unit_sphere, torch.tensor([[0.0, 2.0, 3.0]]), torch.tensor([[0.0, 0.0, -1.0]]), far=10.0)
    assert not bool(hit[0])


def test_sphere_trace_residual_on_random_rays():
    scene = SceneSpec(identities=[IdentityShape(id="a", bump_phase=(0.3, 1.1, 2.0))])
    head = AnalyticHead(scene, scene.identities[0])
    gen = torch.Generator().manual_seed(0)
    n = 10_000
    origins = torch.nn.functional.normalize(torch.randn(n, 3, generator=gen), dim=-1) * 3.0
    targets = (torch.rand(n, 3, generator=gen) - 0.5) * 0.8
    directions = torch.nn.functional.normalize(targets - origins, dim=-1)
    hit, _, points = sphere_trace(head.sdf, origins, directions, 0.0, 6.0, eps=1e-6)
    assert int(hit.sum()) > n // 2
    assert float(head.sdf(points[hit]).abs().max()) < 1e-6


def test_analytic_render_agrees_with_ray_generation():
    """Sphere-traced silhouette of the unit sphere matches the analytic ray-sphere test"""
    size = 32
    camera = Camera([[40.0, 0.0, 16.0], [0.0, 40.0, 16.0], [0.0, 0.0, 1.0]], look_at(np.array([0.5, 0.4, 4.0])), size, size)
    rays = generate_rays(camera, camera.all_pixels(), radius=3.0)
    hit, _, _ = sphere_trace(unit_sphere, rays.origins, rays.directions, rays.near, rays.far)
    b = (rays.origins * rays.directions).sum(-1)
    c = (rays.origins ** 2).sum(-1) - 1.0
    analytic = b * b - c > 0
    assert float((hit == analytic).double().mean()) > 0.98


def test_bump_amplitude_is_bounded():
    with pytest.raises(ValueError):
        SceneSpec(identities=[IdentityShape(id="a", bump_amplitude=0.2)])


def test_frontal_arc_cameras_face_the_origin():
    scene = SceneSpec()
    for pose in frontal_arc_poses(scene, 5, np.random.default_rng(0)):
        assert pose[2, 3] > 0
        forward = pose[:3, 2]
        assert np.allclose(forward, -pose[:3, 3] / np.linalg.norm(pose[:3, 3]))
        assert np.linalg.det(pose[:3, :3]) == pytest.approx(1.0)


def test_render_analytic_mask_and_background():
    scene = SceneSpec(identities=[IdentityShape(id="a")])
    head = AnalyticHead(scene, scene.identities[0])
    camera = Camera(intrinsics_for(scene, 16), look_at(np.array([0.0, 0.0, 3.0])), 16, 16)
    image, mask = render_analytic(head, camera, [1.0, 1.0, 1.0])
    assert image.shape == (16, 16, 3) and mask.shape == (16, 16)
    assert mask[8, 8] and not mask[0, 0]
    assert np.allclose(image[~mask], 1.0)


def test_generate_synthetic_counts(tmp_path):
    manifest = generate_synthetic(tmp_path, n_identities=3, n_views=8, image_size=16, seed=0, mesh_resolution=24)
    assert len(list((tmp_path / "images").rglob("*.png"))) == 24
    assert len(list((tmp_path / "masks").rglob("*.png"))) == 24
    assert len(list((tmp_path / "meshes").glob("*.obj"))) == 3
    assert (tmp_path / "manifest.json").is_file()
    assert manifest.identity_ids == ["id00", "id01", "id02"]


def test_generate_synthetic_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(a, n_identities=2, n_views=2, image_size=10, seed=7, mesh_resolution=16)
    generate_synthetic(b, n_identities=2, n_views=2, image_size=10, seed=7, mesh_resolution=16)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for relative in files:
        assert (a / relative).read_bytes() == (b / relative).read_bytes()


def test_ground_truth_mesh_matches_the_analytic_field(desk_dataset):
    scene = SceneSpec.model_validate_json((desk_dataset.root / "scene.json").read_text())
    for shape in scene.identities:
        mesh = read_obj(desk_dataset.resolve(desk_dataset.identity(shape.id).gt_mesh))
        head = AnalyticHead(scene, shape)
        residual = head.sdf(torch.as_tensor(mesh.vertices)).abs().max()
        voxel = 2 * 1.2 / 23
        assert float(residual) < voxel


def test_synthetic_dataset_loads(desk_dataset):
    manifest = load_dataset(desk_dataset.root)
    assert manifest.identity_ids == desk_dataset.identity_ids
    assert manifest.training_identity_ids == ["id00", "id01"]
    assert [r.held_out for r in manifest.identities] == [False, False, True]
    view = load_view(manifest, manifest.identity("id00"), 0)
    assert view.image.shape == (12, 12, 3)
    assert view.mask.shape == (12, 12)
    with pytest.raises(IdentityLookupError):
        manifest.identity("nobody")


def copy_dataset(desk_dataset, tmp_path):
    target = tmp_path / "dataset"
    shutil.copytree(desk_dataset.root, target)
    return target, json.loads((target / "manifest.json").read_text())


def test_reflected_camera_is_rejected(desk_dataset, tmp_path):
    root, raw = copy_dataset(desk_dataset, tmp_path)
    pose = np.asarray(raw["identities"][0]["views"][1]["cam_to_world"])
    pose[:3, 0] *= -1
    raw["identities"][0]["views"][1]["cam_to_world"] = pose.tolist()
    (root / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(DataError, match="det"):
        load_dataset(root)


def test_missing_image_error_names_the_path(desk_dataset, tmp_path):
    root, raw = copy_dataset(desk_dataset, tmp_path)
    raw["identities"][1]["views"][0]["image"] = "images/missing.png"
    (root / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(DataError, match="missing.png"):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="Manifest not found"):
        load_dataset(tmp_path)


def test_manifest_round_trip(desk_dataset, tmp_path):
    write_manifest(desk_dataset, tmp_path / "copy")
    reloaded = json.loads((tmp_path / "copy" / "manifest.json").read_text())
    assert reloaded == json.loads(desk_dataset.model_dump_json())


def test_normalize_pose_reorthonormalizes_small_errors():
    pose = np.eye(4)
    pose[0, 1] = 1e-10
    fixed = np.asarray(normalize_pose(pose.tolist(), "view"))
    assert np.allclose(fixed[:3, :3].T @ fixed[:3, :3], np.eye(3), atol=1e-14)
    pose[0, 1] = 1e-3
    with pytest.raises(DataError, match="orthonormal"):
        normalize_pose(pose.tolist(), "view")


def test_split_views_holds_out_the_last_views():
    record = IdentityRecord(id="a", views=[ViewRecord(image=f"{i}.png", intrinsics=np.eye(3).tolist(),
                                                      cam_to_world=np.eye(4).tolist()) for i in range(6)])
    split = split_views(record, held_out_views=2, views_per_identity=None, seed=0)
    assert split == {"train": [0, 1, 2, 3], "held_out": [4, 5]}
    subset = split_views(record, held_out_views=2, views_per_identity=2, seed=0)
    assert len(subset["train"]) == 2 and set(subset["train"]) <= {0, 1, 2, 3}
    assert subset == split_views(record, held_out_views=2, views_per_identity=2, seed=0)
    single = IdentityRecord(id="b", views=record.views[:1])
    assert split_views(single, held_out_views=1, views_per_identity=None, seed=0)["train"] == [0]


def test_training_set_splits_views(desk_dataset):
    dataset = TrainingSet(desk_dataset, ["id00"], TrainConfig(held_out_views=1))
    assert len(dataset.views["id00"]) == 2
    assert len(dataset.held_out["id00"]) == 1
    with pytest.raises(DataError):
        TrainingSet(desk_dataset, [], TrainConfig())


@pytest.fixture
def array_dataset(tmp_path):
    generate_synthetic(tmp_path / "arrays", n_identities=1, n_views=2, image_size=10, seed=0,
                       mesh_resolution=16, write_arrays=True)
    return tmp_path / "arrays"


def test_views_prefer_the_float_arrays(array_dataset):
    manifest = load_dataset(array_dataset)
    record = manifest.identity("id00")
    assert all(view.array for view in record.views)
    view = load_view(manifest, record, 1)
    stored = np.load(manifest.resolve(record.views[1].array)).astype(np.float64)
    assert np.array_equal(view.image.numpy(), stored)
    quantized = load_png(manifest.resolve(record.views[1].image))
    assert np.abs(view.image.numpy() - quantized).max() <= 0.5 / 255 + 1e-6


def test_missing_image_array_is_a_data_error(array_dataset):
    (array_dataset / load_dataset(array_dataset).identity("id00").views[0].array).unlink()
    with pytest.raises(DataError, match="image array not found"):
        load_dataset(array_dataset)


def test_image_array_must_match_its_png(array_dataset):
    manifest = load_dataset(array_dataset)
    record = manifest.identity("id00")
    np.save(manifest.resolve(record.views[0].array), np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(DataError, match="its PNG is 10x10"):
        load_view(manifest, record, 0)
