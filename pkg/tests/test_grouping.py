import math

import numpy as np
import pytest

from openvoxel.grouping import (GroupDictionary, GroupField, GroupingConfig, GroupingError,
                                assign_voxel_ids, compute_instance_centroids,
                                instance_pixel_counts, lift_masks, match_masks, run_grouping)
from openvoxel.metrics import adjusted_rand_index
from openvoxel.scene import CameraView, PointMap, VoxelScene
from openvoxel.segmenter import NoiseConfig, OracleSegmenter
from openvoxel.synth import SceneSpec, generate_orbit, generate_scene

from conftest import random_scene
from reference import lift_reference

LN2 = math.log(2.0)


def flat_pmap(positions, validity=None):
    positions = np.asarray(positions, float)
    if validity is None:
        validity = np.ones(positions.shape[:2], bool)
    return PointMap(positions=positions, validity=np.asarray(validity, bool))


def test_centroid_is_masked_mean():
    pos = np.zeros((2, 3, 3))
    pos[0, 0] = (0, 0, 0)
    pos[0, 1] = (2, 2, 2)
    pos[1, 2] = (4, 0, 0)
    mask = np.array([[1, 1, 0], [0, 0, 2]])
    cents = compute_instance_centroids(mask, flat_pmap(pos))
    assert np.allclose(cents[1], (1, 1, 1))
    assert np.allclose(cents[2], (4, 0, 0))


def test_centroid_skips_invalid_and_small():
    pos = np.ones((1, 4, 3))
    validity = np.array([[True, False, True, True]])
    mask = np.array([[1, 1, 2, 2]])
    cents = compute_instance_centroids(mask, flat_pmap(pos, validity), min_instance_pixels=2)
    assert set(cents) == {2}
    counts = instance_pixel_counts(mask, flat_pmap(pos, validity))
    assert counts == {1: 1, 2: 2}


def test_centroid_shape_mismatch():
    with pytest.raises(GroupingError):
        compute_instance_centroids(np.zeros((2, 2), int), flat_pmap(np.zeros((3, 3, 3))))


def single_pixel_view(origin, forward_z=True):
    rot = np.eye(3) if forward_z else None
    return CameraView(width=1, height=1, fx=500.0, fy=500.0, cx=0.5, cy=0.5,
                      rotation=rot, translation=np.asarray(origin, float))


def test_lift_single_term_delta():
    # one pixel, one voxel with alpha 1/2: dF = 0.5 * centroid, dW = 0.5
    scene = VoxelScene(centers=np.array([[0.0, 0.0, 0.0]]), sizes=np.ones(1),
                       densities=np.array([LN2]), colors=np.zeros((1, 3)))
    view = single_pixel_view([0.0, 0.0, -5.0])
    field = GroupField.zeros(1)
    lift_masks(scene, view, np.array([[1]]), {1: np.array([1.0, 2.0, 3.0])}, field)
    assert np.allclose(field.F[0], [0.5, 1.0, 1.5], atol=1e-6)
    assert field.W[0] == pytest.approx(0.5, abs=1e-6)


def test_lift_matches_brute_force_reference():
    scene = random_scene(25, seed=8)
    view = CameraView(width=6, height=6, fx=6.0, fy=6.0, cx=3.0, cy=3.0,
                      rotation=np.eye(3), translation=np.array([0.0, 0.0, -4.0]))
    rng = np.random.default_rng(8)
    mask = rng.integers(0, 3, (6, 6))
    centroids = {1: np.array([0.1, 0.2, 0.3]), 2: np.array([-1.0, 0.5, 0.0])}
    field = GroupField.zeros(scene.n_voxels)
    lift_masks(scene, view, mask, centroids, field)
    F_ref, W_ref = lift_reference(scene, view, mask, centroids)
    assert np.abs(field.F - F_ref).max() < 1e-5
    assert np.abs(field.W - W_ref).max() < 1e-5


def test_lift_weight_monotone():
    scene = random_scene(25, seed=9)
    view = CameraView(width=6, height=6, fx=6.0, fy=6.0, cx=3.0, cy=3.0,
                      rotation=np.eye(3), translation=np.array([0.0, 0.0, -4.0]))
    field = GroupField.zeros(scene.n_voxels)
    mask = np.ones((6, 6), int)
    lift_masks(scene, view, mask, {1: np.zeros(3)}, field)
    w1 = field.W.copy()
    lift_masks(scene, view, mask, {1: np.ones(3)}, field)
    assert np.all(field.W >= w1)


def test_assign_nearest_centroid():
    d = GroupDictionary()
    assert d.add((0.0, 0.0, 0.0), 1.0) == 1
    assert d.add((1.0, 0.0, 0.0), 1.0) == 2
    field = GroupField(F=np.array([[1.0, 0.0, 0.0]]), W=np.array([1.0]))
    assert assign_voxel_ids(field, d).tolist() == [2]


def test_assign_tie_prefers_smaller_id():
    d = GroupDictionary()
    d.add((0.0, 0.0, 0.0), 1.0)  # id 1
    d.add((0.0, 0.0, 0.0), 1.0)  # id 2 placeholder
    d.add((2.0, 0.0, 0.0), 1.0)  # id 3
    # remove id 1 and 2, keep 3; add 5 equidistant
    d.entries.pop(1)
    d.entries.pop(2)
    d.add((0.0, 0.0, 0.0), 1.0)  # id 4
    d.entries.pop(4)
    d.add((0.0, 0.0, 0.0), 1.0)  # id 5
    d.entries[5].centroid = np.array([0.0, 0.0, 0.0])
    # point at x=1 equidistant to centroids of ids 3 (x=2) and 5 (x=0)
    field = GroupField(F=np.array([[1.0, 0.0, 0.0]]), W=np.array([1.0]))
    assert assign_voxel_ids(field, d).tolist() == [3]


def test_assign_unvoted_zero_and_empty_dictionary():
    field = GroupField.zeros(3)
    with pytest.raises(GroupingError):
        assign_voxel_ids(field, GroupDictionary())
    d = GroupDictionary()
    d.add(np.zeros(3), 1.0)
    assert assign_voxel_ids(field, d).tolist() == [0, 0, 0]


def test_assign_matches_exhaustive_search():
    rng = np.random.default_rng(10)
    d = GroupDictionary()
    cents = rng.normal(size=(10, 3))
    for c in cents:
        d.add(c, 1.0)
    W = rng.uniform(0.1, 2.0, 1000)
    F = rng.normal(size=(1000, 3)) * W[:, None]
    got = assign_voxel_ids(GroupField(F=F, W=W), d)
    emb = F / W[:, None]
    d2 = ((emb[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    assert got.tolist() == (np.argmin(d2, axis=1) + 1).tolist()


def test_normalized_field():
    field = GroupField(F=np.array([[2.0, 4.0, 6.0], [1.0, 1.0, 1.0]]),
                       W=np.array([2.0, 0.0]))
    norm = field.normalized()
    assert np.allclose(norm[0], [1.0, 2.0, 3.0])
    assert np.allclose(norm[1], 0.0)


def build_match_case():
    """8x8 masks with pair IoUs 0.8, 0.4, 0.1 between same-numbered ids."""
    proj = np.zeros((8, 8), int)
    new = np.zeros((8, 8), int)
    flat_p, flat_n = proj.ravel(), new.ravel()
    # pair 1: 9 vs 9 px, 8 shared -> IoU 8/10 = 0.8
    flat_p[0:9] = 1
    flat_n[1:10] = 1
    # pair 2: 7 vs 7 px, 4 shared -> IoU 4/10 = 0.4
    flat_p[12:19] = 2
    flat_n[15:22] = 2
    # pair 3: 11 vs 11 px, 2 shared -> IoU 2/20 = 0.1 (containment 2/11 < 0.5)
    flat_p[24:35] = 3
    flat_n[33:44] = 3
    return proj, new


def test_match_masks_hand_ious():
    proj, new = build_match_case()
    d = GroupDictionary()
    for _ in range(3):
        d.add(np.zeros(3), 1.0)
    res = match_masks(proj, new, iou_match_threshold=0.3, dictionary=d)
    # pairs 1 and 2 pass the 0.3 floor; pair 3 (IoU 0.1) gets a fresh id
    assert res.matched == {1: 1, 2: 2}
    assert res.mapping[1] == 1 and res.mapping[2] == 2
    assert res.mapping[3] == 4 and res.fresh == [4]
    assert set(np.unique(res.relabeled)) == {0, 1, 2, 4}


def test_match_masks_high_threshold_rejects_all_but_first():
    proj, new = build_match_case()
    res = match_masks(proj, new, iou_match_threshold=0.5, proj_containment_match=0.99)
    assert res.matched == {1: 1}
    assert sorted(res.fresh) == [4, 5]


def test_match_masks_identity():
    proj, _ = build_match_case()
    res = match_masks(proj, proj, iou_match_threshold=0.3)
    assert res.matched == {1: 1, 2: 2, 3: 3}
    assert np.array_equal(res.relabeled, proj)
    assert res.fresh == []


def test_match_masks_disjoint_all_fresh():
    proj = np.zeros((4, 4), int)
    proj[0, :] = 1
    new = np.zeros((4, 4), int)
    new[3, :] = 1
    res = match_masks(proj, new, iou_match_threshold=0.3)
    assert res.matched == {}
    assert res.mapping[1] == 2 and res.fresh == [2]


def test_match_masks_drops_tiny_unmatched():
    proj = np.zeros((4, 4), int)
    new = np.zeros((4, 4), int)
    new[0, 0] = 1
    res = match_masks(proj, new, iou_match_threshold=0.3, min_instance_pixels=4)
    assert res.mapping[1] == 0
    assert not res.relabeled.any()


def test_match_masks_containment_fallback():
    # tiny projection fully inside a much larger new mask: IoU below the
    # floor but the smaller region is fully contained
    proj = np.zeros((8, 8), int)
    proj[0, 0:3] = 1
    new = np.zeros((8, 8), int)
    new[0:4, 0:8] = 1  # 32 px, IoU = 3/32 < 0.3
    res = match_masks(proj, new, iou_match_threshold=0.3)
    assert res.matched == {1: 1}


def test_match_masks_shape_mismatch():
    with pytest.raises(GroupingError):
        match_masks(np.zeros((2, 2), int), np.zeros((3, 3), int))


def test_dictionary_merge_and_resolve():
    d = GroupDictionary()
    d.add(np.array([0.0, 0.0, 0.0]), 2.0)  # id 1
    d.add(np.array([3.0, 0.0, 0.0]), 1.0)  # id 2
    d.merge(2, 1)
    assert d.resolve(2) == 1
    assert d.canonical_ids() == [1]
    # support-weighted centroid: (0*2 + 3*1) / 3 = 1
    assert np.allclose(d.entries[1].centroid, [1.0, 0.0, 0.0])
    ids, cents = d.voting_table()
    assert ids.tolist() == [1] and cents.shape == (1, 3)


def test_dictionary_update_running_mean():
    d = GroupDictionary()
    d.add(np.array([0.0, 0.0, 0.0]), 1.0)
    d.update(1, np.array([3.0, 0.0, 0.0]), 2.0)
    assert np.allclose(d.entries[1].centroid, [2.0, 0.0, 0.0])
    assert d.entries[1].support == 3.0


def test_run_grouping_single_view(synth_small):
    _, scene, _, views = synth_small
    seg = OracleSegmenter(scene, views, NoiseConfig(seed=0))
    result = run_grouping(scene, views[:1], seg, GroupingConfig(seed=0))
    assert len(result.dictionary) >= 1
    assert result.voxel_ids.shape == (scene.n_voxels,)
    assert np.any(result.voxel_ids > 0)


def test_run_grouping_requires_views(synth_small):
    _, scene, _, _ = synth_small
    seg = OracleSegmenter(scene, generate_orbit(scene, 2), NoiseConfig(seed=0))
    with pytest.raises(GroupingError):
        run_grouping(scene, [], seg)


def test_run_grouping_deterministic(synth_small):
    _, scene, _, views = synth_small
    outs = []
    for _ in range(2):
        seg = OracleSegmenter(scene, views, NoiseConfig(fragment_prob=0.3, seed=2))
        outs.append(run_grouping(scene, views, seg, GroupingConfig(seed=2)))
    assert np.array_equal(outs[0].voxel_ids, outs[1].voxel_ids)
    assert np.allclose(outs[0].field.F, outs[1].field.F)
    assert outs[0].merges == outs[1].merges


def test_grouping_ari_high_on_small_scene(grouped_small):
    scene, _, _, result = grouped_small
    sel = result.field.W > 0
    ari = adjusted_rand_index(result.voxel_ids[sel], scene.gt_labels[sel])
    assert ari > 0.98


def test_grouping_ari_exactly_one_reference_setup():
    """Zero-noise permuted oracle, 5 objects, 24 views: perfect recovery."""
    scene, _ = generate_scene(SceneSpec(seed=0, n_objects=5))
    views = generate_orbit(scene, 24, radius=2.7, elevation=45.0, width=96, height=96)
    seg = OracleSegmenter(scene, views, NoiseConfig(permute_ids=True, seed=1))
    result = run_grouping(scene, views, seg, GroupingConfig(seed=0))
    sel = result.field.W > 0
    ari = adjusted_rand_index(result.voxel_ids[sel], scene.gt_labels[sel])
    assert ari == 1.0
    # one recovered group per gt instance
    assert len(result.dictionary.canonical_ids()) == len(np.unique(scene.gt_labels))


def test_grouping_normalized_votes_in_centroid_hull(grouped_small):
    scene, _, _, result = grouped_small
    _, cents = result.dictionary.voting_table()
    norm = result.field.normalized()
    voted = result.field.W > 0
    lo = cents.min(axis=0) - 0.5
    hi = cents.max(axis=0) + 0.5
    assert np.all(norm[voted] >= lo) and np.all(norm[voted] <= hi)
