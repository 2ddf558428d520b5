import math

import numpy as np
import pytest

from lanefuse.double_edge import interpret_path, lanes_to_arrays, validate
from lanefuse.geometry import OrientedBox, polyline_length, resample_polyline
from lanefuse.scene_synth import (
    GenerationError,
    PointCloud,
    Scene,
    SceneSpec,
    generate_scene,
    load_point_cloud,
    occupancy_flags,
    rasterize_semantic_views,
    render_lidar,
    save_point_cloud,
    scene_from_json,
    scene_to_json,
    synth_view_features,
)


def in_box_oracle(px, py, box: OrientedBox) -> bool:
    """Brute-force point-in-rotated-box check, scalar math only."""
    dx = px - box.center[0]
    dy = py - box.center[1]
    u = math.cos(box.yaw) * dx + math.sin(box.yaw) * dy
    v = -math.sin(box.yaw) * dx + math.cos(box.yaw) * dy
    return abs(u) <= box.extent[0] / 2.0 and abs(v) <= box.extent[1] / 2.0


class TestGenerateScene:
    def test_straight_unoccupied_road(self):
        spec = SceneSpec(seed=42, lane_count=1, geometry="straight", route_length=100.0)
        scene = generate_scene(spec, n_p=20)
        arrs = lanes_to_arrays(scene.ground_truth)
        assert np.all(arrs["occ"] == 0)
        assert np.all(arrs["plan"][scene.route_lane] == 1)

    def test_determinism_bit_identical(self):
        spec = SceneSpec(seed=1234, lane_count=3, geometry="intersection",
                         agent_count=2, clutter_density=1.0, traffic_signal="green")
        a = scene_to_json(generate_scene(spec, n_p=20))
        b = scene_to_json(generate_scene(spec, n_p=20))
        assert a == b

    def test_occ_flags_match_point_in_box_oracle(self):
        spec = SceneSpec(seed=77, lane_count=2, geometry="straight", agent_count=3,
                         route_length=80.0)
        scene = generate_scene(spec, n_p=20)
        arrs = lanes_to_arrays(scene.ground_truth)
        half = scene.ground_truth.n_p // 2
        for i in range(scene.ground_truth.n_d):
            mids = (arrs["points"][i, :half] + arrs["points"][i, half:]) / 2.0
            for j, m in enumerate(mids):
                expected = int(any(in_box_oracle(m[0], m[1], b) for b in scene.agents))
                assert arrs["occ"][i, j] == expected
                assert arrs["occ"][i, half + j] == expected

    def test_occupancy_flags_helper_against_oracle(self):
        rng = np.random.default_rng(5)
        boxes = tuple(
            OrientedBox(center=(rng.uniform(-10, 10), rng.uniform(-10, 10), 1.0),
                        yaw=rng.uniform(0, 2 * math.pi),
                        extent=(rng.uniform(1, 6), rng.uniform(1, 6), 2.0))
            for _ in range(4)
        )
        pts = rng.uniform(-12, 12, (200, 3))
        flags = occupancy_flags(pts, boxes)
        for p, f in zip(pts, flags):
            assert f == int(any(in_box_oracle(p[0], p[1], b) for b in boxes))

    def test_ground_truth_validates_across_random_specs(self):
        rng = np.random.default_rng(0)
        geoms = ["straight", "arc", "intersection"]
        for k in range(25):
            geom = geoms[k % 3]
            spec = SceneSpec(
                seed=int(rng.integers(0, 2**32)),
                lane_count=int(rng.integers(1, 5)),
                geometry=geom,
                radius=float(rng.uniform(50, 100)) if geom == "arc" else None,
                lane_width=float(rng.uniform(2.5, 4.5)),
                route_length=float(rng.uniform(60, 130)),
                agent_count=int(rng.integers(0, 4)),
                clutter_density=float(rng.uniform(0, 1.5)),
                traffic_signal=("none", "green", "red")[k % 3],
            )
            scene = generate_scene(spec, n_p=20)
            assert validate(scene.ground_truth) == []
            # plan flags form one contiguous run per lane
            arrs = lanes_to_arrays(scene.ground_truth)
            half = scene.ground_truth.n_p // 2
            for i in range(scene.ground_truth.n_d):
                for sl in (slice(0, half), slice(half, None)):
                    run = np.flatnonzero(arrs["plan"][i, sl])
                    if run.size:
                        assert np.array_equal(run, np.arange(run[0], run[-1] + 1))

    def test_target_on_route_centerline(self):
        spec = SceneSpec(seed=9, lane_count=2, geometry="arc", radius=70.0,
                         route_length=90.0)
        scene = generate_scene(spec, n_p=20)
        d = np.linalg.norm(scene.route_polyline[:, :2]
                           - np.array(scene.route_target[:2]), axis=1)
        assert d.min() < 1e-9

    def test_agents_clear_of_ego_start(self):
        spec = SceneSpec(seed=3, lane_count=2, geometry="straight", agent_count=4)
        scene = generate_scene(spec, n_p=20)
        for box in scene.agents:
            assert math.hypot(box.center[0], box.center[1]) >= 8.0

    def test_edges_ordered_ego_outward(self):
        spec = SceneSpec(seed=15, lane_count=3, geometry="intersection")
        scene = generate_scene(spec, n_p=20)
        arrs = lanes_to_arrays(scene.ground_truth)
        half = scene.ground_truth.n_p // 2
        for i in range(scene.ground_truth.n_d):
            mids = (arrs["points"][i, :half] + arrs["points"][i, half:]) / 2.0
            d = np.linalg.norm(mids[:, :2], axis=1)
            assert d[0] <= d[-1]

    def test_invalid_specs_raise_naming_field(self):
        with pytest.raises(GenerationError, match="lane_width"):
            generate_scene(SceneSpec(seed=0, lane_width=-1.0))
        with pytest.raises(GenerationError, match="radius"):
            generate_scene(SceneSpec(seed=0, geometry="arc", radius=1.0))
        with pytest.raises(GenerationError, match="route_length"):
            generate_scene(SceneSpec(seed=0, route_length=0.0))

    def test_unroutable_arc_raises(self):
        spec = SceneSpec(seed=0, geometry="arc", radius=10.0, route_length=100.0)
        with pytest.raises(GenerationError, match="unreachable"):
            generate_scene(spec, n_p=20)


class TestRenderLidar:
    def test_zero_noise_road_only_points_on_surface(self):
        spec = SceneSpec(seed=42, lane_count=1, geometry="straight")
        scene = generate_scene(spec, n_p=20)
        cloud = render_lidar(scene, density=4.0, noise_sigma=0.0, seed=42)
        assert len(cloud) > 0
        assert np.all(cloud.points[:, 2] == 0.0)

    def test_density_doubling_doubles_count_within_one_percent(self):
        spec = SceneSpec(seed=8, lane_count=2, geometry="straight", route_length=100.0)
        scene = generate_scene(spec, n_p=20)
        base = len(render_lidar(scene, density=4.0, noise_sigma=0.0, seed=1))
        doubled = len(render_lidar(scene, density=8.0, noise_sigma=0.0, seed=1))
        assert abs(doubled - 2 * base) <= 0.01 * 2 * base

    def test_empty_scene_yields_empty_cloud(self):
        spec = SceneSpec(seed=0)
        donor = generate_scene(spec, n_p=20)
        empty = Scene(spec=spec, centerlines=(), lane_widths=(), agents=(), clutter=(),
                      route_start=(0.0, 0.0, 0.0), route_target=(1.0, 0.0, 0.0),
                      route_lane=0, signal_state="none", signal_line_s=None,
                      ground_truth=donor.ground_truth, gt_speed=8.0)
        assert len(render_lidar(empty, density=5.0, noise_sigma=0.1, seed=3)) == 0

    def test_deterministic_in_seed(self):
        scene = generate_scene(SceneSpec(seed=2, agent_count=1, lane_count=2), n_p=20)
        a = render_lidar(scene, 3.0, 0.05, seed=11)
        b = render_lidar(scene, 3.0, 0.05, seed=11)
        c = render_lidar(scene, 3.0, 0.05, seed=12)
        assert np.array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)

    def test_box_surfaces_sampled(self):
        spec = SceneSpec(seed=21, lane_count=1, agent_count=1)
        scene = generate_scene(spec, n_p=20)
        cloud = render_lidar(scene, density=6.0, noise_sigma=0.0, seed=5)
        assert np.any(cloud.points[:, 2] > 0.5)


class TestViewFeatures:
    def test_agent_channel_zero_without_agents(self):
        scene = generate_scene(SceneSpec(seed=42, lane_count=2), n_p=20)
        sem = rasterize_semantic_views(scene, 8, 8)
        assert np.all(sem[:, 1] == 0.0)
        assert np.any(sem[:, 0] != 0.0)

    def test_identical_scenes_identical_grids(self):
        spec = SceneSpec(seed=6, lane_count=2, agent_count=1)
        a = synth_view_features(generate_scene(spec, n_p=20), 16, 8, 8, seed=7)
        b = synth_view_features(generate_scene(spec, n_p=20), 16, 8, 8, seed=7)
        assert np.array_equal(a.views, b.views)
        assert a.views.shape == (4, 16, 8, 8)

    def test_green_vs_red_differ_in_signal_projection(self):
        green = generate_scene(SceneSpec(seed=4, traffic_signal="green"), n_p=20)
        red = generate_scene(SceneSpec(seed=4, traffic_signal="red"), n_p=20)
        sem_g = rasterize_semantic_views(green, 8, 8)
        sem_r = rasterize_semantic_views(red, 8, 8)
        assert not np.array_equal(sem_g[0, 2], sem_r[0, 2])
        fg = synth_view_features(green, 16, 8, 8, seed=7)
        fr = synth_view_features(red, 16, 8, 8, seed=7)
        assert not np.array_equal(fg.views, fr.views)


class TestPersistence:
    def test_scene_json_round_trip(self):
        spec = SceneSpec(seed=13, lane_count=3, geometry="intersection", agent_count=2,
                         clutter_density=0.5, traffic_signal="red")
        scene = generate_scene(spec, n_p=20)
        again = scene_from_json(scene_to_json(scene))
        assert scene_to_json(again) == scene_to_json(scene)
        assert again.ground_truth == scene.ground_truth

    def test_point_cloud_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).uniform(-50, 50, (137, 3)).astype(np.float32)
        cloud = PointCloud(points=pts.astype(float))
        path = tmp_path / "cloud.lfpc"
        save_point_cloud(path, cloud)
        loaded = load_point_cloud(path)
        assert np.array_equal(loaded.points, cloud.points)

    def test_point_cloud_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lfpc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_point_cloud(path)

    def test_point_cloud_truncated(self, tmp_path):
        scene = generate_scene(SceneSpec(seed=1), n_p=20)
        cloud = render_lidar(scene, 1.0, 0.0, seed=1)
        path = tmp_path / "trunc.lfpc"
        save_point_cloud(path, cloud)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(ValueError, match="payload"):
            load_point_cloud(path)


def test_route_plan_path_follows_centerline():
    scene = generate_scene(SceneSpec(seed=42, lane_count=1, geometry="straight"), n_p=20)
    path = interpret_path(scene.ground_truth, scene.gt_speed)
    wp = np.array(path.waypoints)
    dense = resample_polyline(scene.route_polyline, 10)
    assert np.allclose(wp[:, :2], dense[:, :2], atol=1e-9)
    assert polyline_length(scene.route_polyline) == pytest.approx(100.0)
