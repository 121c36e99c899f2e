import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sgmapper import evaluation as ev
from sgmapper.geometry import PointCloud
from sgmapper.providers.base import ProviderError

from conftest import box_cloud


def test_two_class_hand_values():
    r = ev.metrics(np.array([[8, 2], [3, 7]]))
    assert r.mAcc == pytest.approx(0.75, abs=1e-12)
    assert r.iou[0] == pytest.approx(8 / 13) and r.iou[1] == pytest.approx(7 / 12)
    assert r.f_mIoU == pytest.approx(0.5 * 8 / 13 + 0.5 * 7 / 12, abs=1e-12)
    assert r.f_mIoU == pytest.approx(0.5994, abs=1e-4)


def test_perfect_diagonal():
    r = ev.metrics(np.diag([5, 3, 9]))
    assert r.mAcc == r.f_mIoU == r.mF1 == 1.0


def test_unsupported_class_excluded_and_zero_matrix_rejected():
    m = np.array([[4, 0, 0], [0, 0, 0], [0, 0, 6]])
    assert ev.metrics(m).mAcc == 1.0
    with pytest.raises(ValueError):
        ev.metrics(np.zeros((2, 2)))


def test_unmatched_column_counts_against_recall():
    m = np.array([[6, 0, 4], [0, 5, 0]])
    r = ev.metrics(ev.ConfusionMatrix(m, ["a", "b"]))
    assert r.recall == [0.6, 1.0]
    assert r.precision == [1.0, 1.0]


matrices = st.integers(2, 5).flatmap(lambda c: arrays(np.int64, (c, c + 1), elements=st.integers(0, 30))).filter(
    lambda m: m.sum() > 0
)


@settings(max_examples=150, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_metric_ranges_and_permutation_invariance(m, rnd):
    r = ev.metrics(m)
    for v in (r.mAcc, r.f_mIoU, r.mF1):
        assert 0.0 <= v <= 1.0
    c = m.shape[0]
    perm = list(range(c))
    rnd.shuffle(perm)
    pm = m[perm][:, perm + [c]]
    pr = ev.metrics(pm)
    assert pr.mAcc == pytest.approx(r.mAcc, abs=1e-12)
    assert pr.f_mIoU == pytest.approx(r.f_mIoU, abs=1e-12)
    assert pr.mF1 == pytest.approx(r.mF1, abs=1e-12)
    np.testing.assert_allclose(pr.iou, np.asarray(r.iou)[perm])


def brute_confusion(gt, clouds, object_class):
    C = len(gt.class_names)
    out = np.zeros((C, C + 1), np.int64)
    ids = sorted(clouds)
    pts = np.concatenate([clouds[i].points for i in ids])
    owner = np.concatenate([[i] * len(clouds[i]) for i in ids])
    for p, label in zip(gt.cloud.points, gt.labels):
        d = ((pts - p) ** 2).sum(1)
        nearest = owner[int(np.argmin(d))]
        out[label, object_class.get(nearest, C)] += 1
    return out


def test_nn_confusion_matches_all_pairs_oracle(rng):
    for _ in range(5):
        gt = ev.GroundTruthCloud(PointCloud(rng.random((500, 3))), rng.integers(0, 4, 500), list("abcd"))
        clouds = {i: PointCloud(rng.random((int(rng.integers(20, 200)), 3))) for i in (2, 5, 9, 11, 14)}
        object_class = {2: 0, 5: 1, 9: 1, 11: 3}
        cm = ev.nn_confusion(gt, clouds, object_class)
        np.testing.assert_array_equal(cm.counts, brute_confusion(gt, clouds, object_class))
        np.testing.assert_array_equal(cm.counts.sum(1), np.bincount(gt.labels, minlength=4))


def two_box_gt():
    a, b = box_cloud((0, 0, 0), (1, 1, 1), 300, seed=1), box_cloud((3, 0, 0), (4, 1, 1), 200, seed=2)
    gt = ev.GroundTruthCloud(PointCloud.concat([a, b]), np.r_[np.zeros(300), np.ones(200)].astype(int), ["x", "y"])
    return gt, {0: a, 1: b}


def test_perfect_prediction_and_swap():
    gt, clouds = two_box_gt()
    cm = ev.nn_confusion(gt, clouds, {0: 0, 1: 1})
    np.testing.assert_array_equal(cm.counts, [[300, 0, 0], [0, 200, 0]])
    r = ev.metrics(cm)
    assert r.mAcc == r.f_mIoU == r.mF1 == 1.0
    swapped = ev.nn_confusion(gt, clouds, {0: 1, 1: 0})
    np.testing.assert_array_equal(swapped.counts, [[0, 300, 0], [200, 0, 0]])


def test_empty_prediction_all_unmatched():
    gt, _ = two_box_gt()
    cm = ev.nn_confusion(gt, {}, {})
    np.testing.assert_array_equal(cm.counts, [[0, 0, 300], [0, 0, 200]])


def test_ground_truth_validation_and_load(tmp_path):
    from sgmapper.geometry import write_ply

    with pytest.raises(ValueError):
        ev.GroundTruthCloud(PointCloud(np.zeros((3, 3))), [0, 1], ["a", "b"])
    with pytest.raises(ValueError):
        ev.GroundTruthCloud(PointCloud(np.zeros((2, 3))), [0, 2], ["a", "b"])
    write_ply(tmp_path / "gt.ply", PointCloud(np.zeros((2, 3))), extra={"label": np.array([0, 1], np.int32)})
    (tmp_path / "classes.txt").write_text("chair\nsofa\n")
    gt = ev.GroundTruthCloud.load(tmp_path / "gt.ply", tmp_path / "classes.txt")
    assert gt.class_names == ["chair", "sofa"] and list(gt.labels) == [0, 1]


class TableEmbedder:
    def __init__(self, table):
        self.table = table

    def embed_text(self, text):
        return np.asarray(self.table[text], float)


def test_assign_embedding_argmax_and_ties():
    emb = TableEmbedder({"chair": [0, 1, 0], "sofa": [1, 0, 0]})
    objects = {3: np.array([0, 1.0, 0]), 1: np.array([1.0, 0, 0]), 4: np.array([1.0, 0, 0])}
    assign, cos, ids = ev.assign_labels_embedding(objects, ["chair", "sofa"], emb)
    assert assign == {0: 3, 1: 1}
    assert ids == [1, 3, 4] and cos.shape == (2, 3)


def test_assign_embedding_matches_exhaustive_scan(rng):
    names = [f"class{i}" for i in range(20)]
    table = {n: rng.normal(size=16) for n in names}
    objects = {int(i): rng.normal(size=16) for i in rng.choice(200, 30, replace=False)}
    assign, _, _ = ev.assign_labels_embedding(objects, names, TableEmbedder(table))
    for c, n in enumerate(names):
        t = table[n] / np.linalg.norm(table[n])
        best = max(objects, key=lambda i: (float(t @ (objects[i] / np.linalg.norm(objects[i]))), -i))
        assert assign[c] == best


class Reasoner:
    def __init__(self, replies):
        self.replies = replies

    def complete(self, prompt):
        label = prompt.split('most likely a "')[1].split('"')[0]
        r = self.replies[label]
        if isinstance(r, Exception):
            raise r
        return r


def test_assign_caption_paths():
    captions = {7: "a sofa", 2: "a lamp"}
    replies = {"sofa": "7", "lamp": "99", "desk": "-1", "rug": "maybe 2", "tv": ProviderError("x")}
    assign, flags = ev.assign_labels_caption(captions, list(replies), Reasoner(replies))
    assert assign == {0: 7}
    assert flags == {1: ["out_of_range"], 2: ["none"], 3: ["unparseable"], 4: ["provider_error"]}
    assign, flags = ev.assign_labels_caption({}, ["sofa", "desk"], Reasoner(replies))
    assert assign == {} and flags == {0: ["no_nodes"], 1: ["no_nodes"]}


def test_invert_assignment_conflict_by_cosine():
    assign = {0: 5, 1: 5, 2: 6}
    cos = {(0, 5): 0.2, (1, 5): 0.9, (2, 6): 0.5}
    assert ev.invert_assignment(assign, cos) == {5: 1, 6: 2}
    assert ev.invert_assignment(assign) == {5: 0, 6: 2}


def test_benchmark_empty_and_fixed_point(tmp_path):
    assert ev.benchmark_mapping([], 0.01, "dynamic").rows == []
    from sgmapper.ingest import LocalObject, Mask

    # a 1 m diagonal object: dynamic voxel equals the base
    pts = np.random.default_rng(0).random((3000, 3))
    pts = np.vstack([pts / np.sqrt(3), [[0, 0, 0], [1 / np.sqrt(3)] * 3]])
    lo = LocalObject(np.array([1.0, 0]), PointCloud(pts), Mask(np.ones((1, 1), bool)), None, 0, np.zeros(3))
    fixed = ev.benchmark_mapping([[lo]], 0.05, "fixed")
    dyn = ev.benchmark_mapping([[lo]], 0.05, "dynamic")
    assert fixed.points_kept == dyn.points_kept
    ev.write_bench_csv(tmp_path / "b.csv", [fixed, dyn])
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["strategy"] for r in rows] == ["fixed", "dynamic"]
    assert list(rows[0]) == ["iteration", "strategy", "seconds", "points_in", "points_kept"]
