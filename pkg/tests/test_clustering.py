import numpy as np
import pytest

from mvdu import scenes
from mvdu.clustering import (InstanceCluster, ViewInstance, build_instance_graph,
                             chamfer_distance, cluster_graph,
                             extract_view_instances, mark_background)
from mvdu.errors import EmptyCloudError
from mvdu.oracles import brute_force_chamfer


def make_instance(view_id, label, cloud):
    cloud = np.asarray(cloud, dtype=np.float64)
    px = np.zeros((max(1, cloud.shape[0]), 2), dtype=np.int64)
    cpx = np.zeros((cloud.shape[0], 2), dtype=np.int64)
    return ViewInstance(view_id, label, px, cloud, cpx)


def test_chamfer_identical_sets(rng):
    pts = rng.normal(size=(50, 3))
    assert chamfer_distance(pts, pts) == pytest.approx(0.0, abs=1e-12)


def test_chamfer_single_point_pair():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer_distance(a, b) == pytest.approx(1.0)


def test_chamfer_matches_brute_force(rng):
    a = rng.normal(size=(100, 3))
    b = rng.normal(size=(100, 3)) + 0.5
    assert chamfer_distance(a, b) == pytest.approx(brute_force_chamfer(a, b),
                                                   abs=1e-9)


def test_chamfer_symmetry(rng):
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(40, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a),
                                                   abs=1e-12)


def test_chamfer_empty_set_rejected():
    with pytest.raises(EmptyCloudError):
        chamfer_distance(np.zeros((0, 3)), np.ones((3, 3)))


def test_graph_edge_for_same_geometry(rng):
    sphere = rng.normal(size=(500, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    a = make_instance(0, 1, sphere[:250])
    b = make_instance(1, 1, sphere[250:])
    edges = build_instance_graph([a, b], threshold=0.2)
    assert edges == [(0, 1)]


def test_no_edge_for_disjoint_objects(rng):
    a = make_instance(0, 1, rng.normal(size=(100, 3)) * 0.01)
    b = make_instance(1, 1, rng.normal(size=(100, 3)) * 0.01 + [1.0, 0, 0])
    assert build_instance_graph([a, b], threshold=0.1) == []


def test_no_edges_within_same_view(rng):
    pts = rng.normal(size=(50, 3)) * 0.01
    a = make_instance(0, 1, pts)
    b = make_instance(0, 2, pts)
    assert build_instance_graph([a, b], threshold=1.0) == []


def test_graph_matches_exhaustive_pairwise_oracle(rng):
    instances = []
    for vid in range(4):
        for obj in range(3):
            center = np.array([obj * 1.5, 0.0, 0.0])
            instances.append(make_instance(vid, obj + 1,
                                           center + 0.02 * rng.normal(size=(80, 3))))
    threshold = 0.15
    edges = set(build_instance_graph(instances, threshold))
    expected = set()
    for i in range(len(instances)):
        for j in range(i + 1, len(instances)):
            if instances[i].view_id == instances[j].view_id:
                continue
            if brute_force_chamfer(instances[i].cloud,
                                   instances[j].cloud) < threshold:
                expected.add((i, j))
    assert edges == expected


def test_cluster_graph_no_edges_gives_singletons(rng):
    instances = [make_instance(v, 1, rng.normal(size=(10, 3))) for v in range(4)]
    clusters = cluster_graph([], instances)
    assert len(clusters) == 4
    assert all(len(c.members) == 1 for c in clusters)


def test_cluster_graph_complete_graph_single_cluster(rng):
    instances = [make_instance(v, 1, rng.normal(size=(10, 3))) for v in range(4)]
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    clusters = cluster_graph(edges, instances)
    assert len(clusters) == 1
    assert len(clusters[0].members) == 4


def test_partition_property(rng):
    instances = [make_instance(v, l, rng.normal(size=(10, 3)))
                 for v in range(3) for l in (1, 2)]
    clusters = cluster_graph([(0, 2), (3, 5)], instances)
    seen = [m.key for c in clusters for m in c.members]
    assert sorted(seen) == sorted(i.key for i in instances)
    assert len(seen) == len(set(seen))


def test_cluster_ids_invariant_to_input_order(rng):
    pts = {obj: np.array([obj * 2.0, 0, 0]) + 0.01 * rng.normal(size=(60, 3))
           for obj in range(3)}
    instances = [make_instance(v, o + 1, pts[o] + 1e-4 * v)
                 for v in range(3) for o in range(3)]
    c1 = cluster_graph(build_instance_graph(instances, 0.1), instances)
    perm = [instances[i] for i in np.random.default_rng(3).permutation(len(instances))]
    c2 = cluster_graph(build_instance_graph(perm, 0.1), perm)
    part1 = {c.cluster_id: sorted(m.key for m in c.members) for c in c1}
    part2 = {c.cluster_id: sorted(m.key for m in c.members) for c in c2}
    assert part1 == part2


def test_threshold_monotonicity(rng):
    instances = [make_instance(v, o + 1,
                               np.array([o * 0.8, 0, 0]) + 0.05 * rng.normal(size=(60, 3)))
                 for v in range(3) for o in range(2)]
    big = cluster_graph(build_instance_graph(instances, 0.5), instances)
    small = cluster_graph(build_instance_graph(instances, 0.05), instances)
    assert len(small) >= len(big)
    # every small-threshold cluster is contained in one big-threshold cluster
    big_of = {m.key: c.cluster_id for c in big for m in c.members}
    for c in small:
        owners = {big_of[m.key] for m in c.members}
        assert len(owners) == 1


def test_mark_background():
    a = make_instance(0, 1, np.zeros((1, 3)))
    b = make_instance(0, 9, np.zeros((1, 3)))
    clusters = [InstanceCluster(0, (a,)), InstanceCluster(1, (b,))]
    out = mark_background(clusters, set())
    assert not any(c.is_background for c in out)
    out = mark_background(clusters, {9})
    assert [c.is_background for c in out] == [False, True]
    out = mark_background(clusters, {0: {9}})
    assert [c.is_background for c in out] == [False, True]


def _scene_instances(n_objects=3, n_views=8, seed=11):
    prims = [scenes.Sphere(i + 1, (0.9 * np.cos(2 * np.pi * i / n_objects),
                                   0.9 * np.sin(2 * np.pi * i / n_objects), 0.25),
                           0.22, (0.8, 0.3, 0.3)) for i in range(n_objects)]
    prims.append(scenes.Box(50, (-3, -3, -0.3), (3, 3, 2.5),
                            (0.6, 0.6, 0.6), background=True))
    intr = scenes.fov_intrinsics(80, 80, 62)
    cams = scenes.camera_ring(n_views, 2.0, 1.1, (0, 0, 0.25), intr)
    spec = scenes.SceneSpec(tuple(prims), tuple(cams))
    rendered = scenes.render_ground_truth(spec)
    views = [type(c)(c.view_id, c.intrinsics, c.pose, mask=rendered[i]["mask"],
                     rgb=rendered[i]["rgb"]) for i, c in enumerate(spec.cameras)]
    depths = {i: rendered[i]["depth"] for i in range(n_views)}
    return spec, views, depths


def adjusted_rand_index(labels_a, labels_b):
    """Pair-counting ARI, written out directly."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    n = labels_a.size
    classes_a = np.unique(labels_a)
    classes_b = np.unique(labels_b)
    table = np.array([[np.sum((labels_a == a) & (labels_b == b))
                       for b in classes_b] for a in classes_a])

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


def test_synthetic_scene_recovers_identities_exactly():
    # Identity recovery is judged on foreground instances; background wall
    # patches see different geometry per view and are filtered by label.
    spec, views, depths = _scene_instances()
    instances = extract_view_instances(views, depths)
    edges = build_instance_graph(instances, threshold=0.05, seed=3)
    clusters = mark_background(cluster_graph(edges, instances),
                               spec.background_ids)
    key_to_cluster = {m.key: c.cluster_id for c in clusters for m in c.members}
    fg = [inst for inst in instances if inst.mask_label != 50]
    truth = [inst.mask_label for inst in fg]
    predicted = [key_to_cluster[inst.key] for inst in fg]
    assert adjusted_rand_index(truth, predicted) == pytest.approx(1.0)
    bg = [c for c in clusters if c.is_background]
    assert all(m.mask_label == 50 for c in bg for m in c.members)
    assert all(any(m.mask_label == 50 for m in c.members) == c.is_background
               for c in clusters)
