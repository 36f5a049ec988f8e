import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graspshot import scenes
from graspshot.errors import (ConfigurationError, CorruptFileError,
                              PlacementError)
from graspshot.scenes import (GraspLabel, ObjectPose, SceneConfig,
                              grasp_labels_for, render_scene, sample_dataset,
                              shape_mask, wrap_half_pi)


def shoelace_area(verts):
    x = np.array([v[0] for v in verts])
    y = np.array([v[1] for v in verts])
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


class TestWrap:
    @given(st.floats(-50, 50))
    def test_range_and_angle_doubling(self, theta):
        w = wrap_half_pi(theta)
        assert -np.pi / 2 <= w < np.pi / 2
        assert np.isclose(np.sin(2 * w), np.sin(2 * theta), atol=1e-9)
        assert np.isclose(np.cos(2 * w), np.cos(2 * theta), atol=1e-9)

    def test_boundary_maps_to_low_end(self):
        assert wrap_half_pi(np.pi / 2) == pytest.approx(-np.pi / 2)


class TestRender:
    def test_empty_scene_is_black(self):
        img = render_scene([], 64)
        assert img.shape == (1, 64, 64)
        assert np.all(img == 0)

    def test_disk_pixel_count_near_analytic_area(self):
        pose = ObjectPose("Cylinder", 32.2, 31.7, 0.3, 10.0)
        img = render_scene([pose], 64)
        count = int((img > 0).sum())
        assert abs(count - np.pi * 100) < 0.05 * np.pi * 100

    def test_ring_pixel_count_near_annulus_area(self):
        pose = ObjectPose("Ring", 32.4, 31.6, 1.1, 11.0)
        area = np.pi * (1 - 0.55 ** 2) * 11.0 ** 2
        count = int((render_scene([pose], 64) > 0).sum())
        assert abs(count - area) < 0.07 * area

    @pytest.mark.parametrize("kind", ["LShape", "TShape", "Star"])
    def test_polygon_pixel_count_near_shoelace_area(self, kind):
        pose = ObjectPose(kind, 32.3, 31.8, 0.7, 12.0)
        verts = scenes._SHAPES[kind]["poly"]
        area = shoelace_area(verts) * 12.0 ** 2
        count = int((render_scene([pose], 64) > 0).sum())
        assert abs(count - area) < 0.08 * area

    def test_values_are_binary_without_noise(self):
        pose = ObjectPose("TShape", 30.0, 30.0, 1.0, 9.0)
        img = render_scene([pose], 64)
        assert set(np.unique(img)) <= {0.0, 1.0}

    def test_deterministic(self):
        pose = ObjectPose("Star", 25.0, 40.0, 2.0, 9.0)
        a = render_scene([pose], 64)
        b = render_scene([pose], 64)
        assert a.tobytes() == b.tobytes()

    def test_out_of_bounds_pose_names_index(self):
        ok = ObjectPose("Cylinder", 32, 32, 0, 8)
        bad = ObjectPose("Cylinder", 2, 32, 0, 8)
        with pytest.raises(ConfigurationError, match="pose 1"):
            render_scene([ok, bad], 64)

    def test_noise_needs_rng_and_stays_in_range(self):
        pose = ObjectPose("Cylinder", 32, 32, 0, 8)
        with pytest.raises(ConfigurationError):
            render_scene([pose], 64, noise_sigma=0.1)
        img = render_scene([pose], 64, noise_sigma=0.2,
                           rng=np.random.default_rng(0))
        assert img.min() >= 0 and img.max() <= 1

    def test_float32_cast_round_trips(self):
        pose = ObjectPose("LShape", 30, 30, 0.5, 10)
        img = render_scene([pose], 64)
        again = img.astype("<f4").astype(np.float64)
        assert img.tobytes() == again.tobytes()


class TestGraspTemplates:
    @pytest.mark.parametrize("rotation", [0.0, 0.9, 2.0, 4.5])
    def test_cylinder_grasps_stay_centered(self, rotation):
        pose = ObjectPose("Cylinder", 33.0, 29.0, rotation, 9.0)
        for g in grasp_labels_for(pose):
            assert g.cx == pytest.approx(33.0)
            assert g.cy == pytest.approx(29.0)

    def test_rotation_shifts_theta_then_wraps(self):
        base = ObjectPose("TShape", 32, 32, 0.0, 9.0)
        rot = ObjectPose("TShape", 32, 32, np.pi / 4, 9.0)
        for g0, g1 in zip(grasp_labels_for(base), grasp_labels_for(rot)):
            assert g1.theta == pytest.approx(wrap_half_pi(g0.theta + np.pi / 4))

    def test_scale_multiplies_extents(self):
        small = grasp_labels_for(ObjectPose("LShape", 32, 32, 0.3, 6.0))
        big = grasp_labels_for(ObjectPose("LShape", 32, 32, 0.3, 12.0))
        for gs, gb in zip(small, big):
            assert gb.h == pytest.approx(2 * gs.h)
            assert gb.w == pytest.approx(2 * gs.w)

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from(scenes.SHAPE_KINDS),
           st.floats(0, 2 * np.pi - 1e-9), st.floats(6, 11))
    def test_centers_inside_rendered_bbox_dilated_2px(self, kind, rot, scale):
        pose = ObjectPose(kind, 32.0, 32.0, rot, scale)
        mask = shape_mask(pose, 64)
        ys, xs = np.nonzero(mask)
        x0, x1 = xs.min() - 2, xs.max() + 1 + 2
        y0, y1 = ys.min() - 2, ys.max() + 1 + 2
        for g in grasp_labels_for(pose):
            assert x0 <= g.cx <= x1 and y0 <= g.cy <= y1

    def test_object_index_recorded(self):
        pose = ObjectPose("Star", 32, 32, 0, 8)
        for g in grasp_labels_for(pose, object_index=3):
            assert g.object_index == 3
            assert g.shape == "Star"


class TestSampleDataset:
    def test_single_scene_single_cylinder(self):
        cfg = SceneConfig(num_scenes=1, allowed_kinds=("Cylinder",), seed=7)
        ds = sample_dataset(cfg)
        assert len(ds) == 1
        assert len(ds[0].poses) == 1
        assert ds[0].poses[0].kind == "Cylinder"
        assert len(ds[0].grasps) == 2

    def test_mixed_four_objects_one_of_each_kind(self):
        cfg = SceneConfig(num_scenes=50, objects_per_scene=4, mixed=True,
                          scale_range=(5.0, 7.0), seed=11)
        for scene in sample_dataset(cfg):
            kinds = sorted(p.kind for p in scene.poses)
            assert kinds == sorted(scenes.TRAINED_KINDS)

    def test_required_kind_appears_exactly_once(self):
        cfg = SceneConfig(num_scenes=30, objects_per_scene=3, mixed=True,
                          required_kinds=("Ring",), scale_range=(5.0, 7.0),
                          seed=13)
        for scene in sample_dataset(cfg):
            kinds = [p.kind for p in scene.poses]
            assert kinds.count("Ring") == 1

    def test_deterministic_across_calls(self):
        cfg = SceneConfig(num_scenes=5, objects_per_scene=2, mixed=True,
                          scale_range=(5.0, 8.0), seed=3)
        a = sample_dataset(cfg)
        b = sample_dataset(cfg)
        for sa, sb in zip(a, b):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert sa.poses == sb.poses
            assert sa.grasps == sb.grasps

    def test_unmixed_scenes_share_one_kind_and_stay_balanced(self):
        m = 400
        cfg = SceneConfig(num_scenes=m, objects_per_scene=2,
                          scale_range=(5.0, 8.0), seed=5)
        counts = {}
        for scene in sample_dataset(cfg):
            kinds = {p.kind for p in scene.poses}
            assert len(kinds) == 1
            k = kinds.pop()
            counts[k] = counts.get(k, 0) + 1
        for kind in scenes.TRAINED_KINDS:
            assert abs(counts.get(kind, 0) - m / 4) < 4 * np.sqrt(m)

    def test_no_ring_without_explicit_request(self):
        cfg = SceneConfig(num_scenes=200, objects_per_scene=2, mixed=True,
                          scale_range=(5.0, 8.0), seed=17)
        for scene in sample_dataset(cfg):
            assert all(p.kind != "Ring" for p in scene.poses)

    def test_impossible_packing_raises(self):
        cfg = SceneConfig(num_scenes=1, objects_per_scene=9,
                          scale_range=(12.0, 14.0), seed=0)
        with pytest.raises(PlacementError, match="fewer or smaller"):
            sample_dataset(cfg)

    def test_silhouettes_disjoint_and_in_bounds(self):
        cfg = SceneConfig(num_scenes=40, objects_per_scene=4, mixed=True,
                          scale_range=(5.0, 7.0), seed=23)
        for scene in sample_dataset(cfg):
            boxes = [scenes.silhouette_aabb(p) for p in scene.poses]
            for x0, y0, x1, y1 in boxes:
                assert x0 >= 0 and y0 >= 0 and x1 <= 64 and y1 <= 64
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    assert (a[2] <= b[0] or b[2] <= a[0]
                            or a[3] <= b[1] or b[3] <= a[1])


def _validate_label(g: GraspLabel, poses):
    assert g.h > 0 and g.w > 0
    assert -np.pi / 2 <= g.theta < np.pi / 2
    pose = poses[g.object_index]
    x0, y0, x1, y1 = scenes.silhouette_aabb(pose)
    assert x0 - 2 <= g.cx <= x1 + 2
    assert y0 - 2 <= g.cy <= y1 + 2
    assert g.shape == pose.kind


def test_label_validity_over_many_sampled_scenes():
    # bulk sweep across the compositions the experiments actually use
    configs = [
        SceneConfig(num_scenes=7000, objects_per_scene=1,
                    scale_range=(8.0, 12.0), seed=101),
        SceneConfig(num_scenes=2000, objects_per_scene=4, mixed=True,
                    scale_range=(5.0, 7.0), seed=102),
        SceneConfig(num_scenes=1000, objects_per_scene=3, mixed=True,
                    required_kinds=("Ring",), scale_range=(5.0, 7.0),
                    seed=103),
    ]
    total = 0
    for cfg in configs:
        for scene in sample_dataset(cfg):
            total += 1
            assert len(scene.grasps) == 2 * len(scene.poses)
            for g in scene.grasps:
                _validate_label(g, scene.poses)
    assert total == 10000


class TestDatasetRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        cfg = SceneConfig(num_scenes=4, objects_per_scene=2, mixed=True,
                          scale_range=(5.0, 8.0), seed=31)
        ds = sample_dataset(cfg)
        scenes.save_dataset(ds, tmp_path / "ds")
        back = scenes.load_dataset(tmp_path / "ds")
        assert len(back) == len(ds)
        for a, b in zip(ds, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.poses == b.poses
            assert a.grasps == b.grasps
            assert a.scene_id == b.scene_id and a.seed == b.seed

    def test_truncated_image_payload_detected(self, tmp_path):
        ds = sample_dataset(SceneConfig(num_scenes=1, seed=1))
        scenes.save_dataset(ds, tmp_path / "ds")
        img = tmp_path / "ds" / "images" / "scene_00000.f32"
        img.write_bytes(img.read_bytes()[:-8])
        with pytest.raises(CorruptFileError, match="bytes"):
            scenes.load_dataset(tmp_path / "ds")

    def test_non_dataset_directory_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{\"format\": \"other\"}")
        with pytest.raises(CorruptFileError):
            scenes.load_dataset(tmp_path)
