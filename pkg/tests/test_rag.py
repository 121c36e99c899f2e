import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmapper import rag
from sgmapper.geometry import PointCloud, centroid
from sgmapper.providers import prompts
from sgmapper.providers.base import ProviderError

REFINE_TEXT = (
    "The picture is stitched from the point cloud image and the RGB image of the same indoor object. "
    "There is a {} near the object. Briefly describe the object in the picture."
)


def doc(points, captions=None):
    return rag.ObjectDocument(
        [rag.DocEntry(i, (captions or {}).get(i, f"obj{i}"), tuple(p)) for i, p in enumerate(points)]
    )


def brute_nearest(points, q, exclude=None):
    d = np.linalg.norm(np.asarray(points) - q, axis=1)
    order = sorted((float(dist), i) for i, dist in enumerate(d) if i != exclude)
    return order[0][1]


def test_retrieve_nearest_simple_and_tie():
    d = doc([(0, 0, 0), (5, 0, 0)])
    assert d.retrieve_nearest((1, 0, 0)).object_id == 0
    assert d.retrieve_nearest((2.5, 0, 0)).object_id == 0
    assert d.retrieve_nearest((0, 0, 0), exclude=0).object_id == 1


def test_retrieve_from_empty_document():
    with pytest.raises(rag.NoContext, match="no context available"):
        rag.ObjectDocument([]).retrieve_nearest((0, 0, 0))
    with pytest.raises(rag.NoContext):
        doc([(0, 0, 0)]).retrieve_nearest((1, 1, 1), exclude=0)


def test_retrieve_matches_linear_scan(rng):
    for trial in range(100):
        n = int(rng.integers(1, 1001))
        pts = rng.random((n, 3)) * 10
        if trial % 3 == 0:
            pts = np.round(pts)  # grid-snapped instances create many exact ties
        d = doc(pts)
        for _ in range(5):
            q = rng.random(3) * 10
            exclude = int(rng.integers(0, n)) if n > 1 and rng.random() < 0.5 else None
            assert d.retrieve_nearest(q, exclude).object_id == brute_nearest(pts, q, exclude)


def test_document_rejects_duplicates_and_empty_captions():
    with pytest.raises(ValueError):
        rag.ObjectDocument([rag.DocEntry(1, "a", (0, 0, 0)), rag.DocEntry(1, "b", (1, 0, 0))])
    with pytest.raises(ValueError):
        rag.ObjectDocument([rag.DocEntry(1, "", (0, 0, 0))])


def test_split_examples():
    low, high = rag.split_by_uncertainty({10: 0.1, 11: 0.2, 12: 0.3, 13: 0.4})
    assert (low, high) == ([10, 11], [12, 13])
    low, high = rag.split_by_uncertainty({i: 0.1 * i for i in range(5)})
    assert len(low) == 3
    low, high = rag.split_by_uncertainty({7: 0.5, 3: 0.5, 5: 0.5})
    assert (low, high) == ([3, 5], [7])


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.integers(0, 50), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), max_size=20))
def test_split_ceiling_rule_on_adversarial_ties(u):
    low, high = rag.split_by_uncertainty(u)
    assert len(low) == (len(u) + 1) // 2
    assert sorted(low + high) == sorted(u)
    if low and high:
        worst_low = max((u[i], i) for i in low)
        best_high = min((u[i], i) for i in high)
        assert worst_low < best_high


def test_build_document_uses_centroids():
    clouds = {i: PointCloud(np.random.default_rng(i).random((20, 3))) for i in range(4)}
    cents = {i: centroid(c) for i, c in clouds.items()}
    d = rag.build_document({i: f"c{i}" for i in clouds}, cents, [0, 2, 3])
    assert len(d) == 3
    np.testing.assert_allclose(d.entries[1].centroid, centroid(clouds[2]))
    assert len(rag.build_document({}, {}, [])) == 0


def test_composite_layout():
    reshot = np.full((100, 100, 3), 200, np.uint8)
    crop = np.full((100, 50, 3), 10, np.uint8)
    comp, flags = rag.compose_refinement_image(reshot, crop)
    assert comp.shape == (100, 150, 3) and flags == []
    np.testing.assert_array_equal(comp[:, :100], reshot)
    tall = np.full((200, 100, 3), 10, np.uint8)
    comp, _ = rag.compose_refinement_image(reshot, tall)
    assert comp.shape == (100, 150, 3)
    comp, flags = rag.compose_refinement_image(None, crop)
    assert comp.shape == crop.shape and flags == ["missing_reshot"]


class FakeVLM:
    def __init__(self, background=(), fail=(), refined="a wooden dining table"):
        self.background, self.fail, self.refined = set(background), set(fail), refined
        self.prompts = []

    def caption(self, image, prompt):
        self.prompts.append(prompt)
        tag = int(np.asarray(image)[0, -1, 0])
        if tag in self.fail:
            raise ProviderError("down")
        if "background" in prompt:
            return "Yes." if tag in self.background else "no"
        return self.refined


def crop_of(tag):
    return np.full((8, 8, 3), tag, np.uint8)


def test_background_filter():
    crops = {i: crop_of(i) for i in range(4)}
    kept, flags = rag.filter_background(crops, FakeVLM(background={1}))
    assert kept == [0, 2, 3] and flags == {1: ["background"]}
    kept, flags = rag.filter_background(crops, FakeVLM(fail={2}))
    assert kept == [0, 1, 2, 3] and flags == {2: ["background_check_failed"]}
    kept, flags = rag.filter_background(crops, FakeVLM())
    assert kept == [0, 1, 2, 3] and flags == {}


def test_refine_prompt_is_verbatim():
    vlm = FakeVLM()
    text, flags = rag.refine_caption(crop_of(0), "sofa", vlm, "fallback")
    assert text == "a wooden dining table" and flags == []
    assert vlm.prompts[-1] == REFINE_TEXT.format("sofa")
    text, flags = rag.refine_caption(crop_of(0), None, vlm, "fallback")
    assert "near the object" not in vlm.prompts[-1] and flags == ["no_context"]
    text, flags = rag.refine_caption(crop_of(5), "sofa", FakeVLM(fail={5}), "fallback")
    assert text == "fallback" and flags == ["refine_fallback"]


def scene(n=6):
    ids = list(range(n))
    captions = {i: f"cap{i}" for i in ids}
    unc = {i: 0.1 * i for i in ids}
    cents = {i: np.array([float(i), 0, 0]) for i in ids}
    crops = {i: crop_of(i) for i in ids}
    reshots = {i: np.full((8, 8, 3), 255, np.uint8) for i in ids}
    return captions, unc, cents, crops, reshots


def test_refine_objects_contract():
    captions, unc, cents, crops, reshots = scene()
    res = rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(background={0}))
    assert res.low == [1, 2, 3] and res.high == [4, 5]
    assert {e.object_id for e in res.document.entries} == {1, 2, 3}
    assert set(res.final) == set(captions)
    for i in (0, 1, 2, 3):
        assert res.final[i] == captions[i]
    for i in (4, 5):
        assert res.final[i] == "a wooden dining table"
    assert res.flags[0] == ["background"]
    assert [r.neighbor for r in res.refinements] == [3, 3]


def test_refine_filter_after_split():
    captions, unc, cents, crops, reshots = scene()
    res = rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(background={0}), filter_after_split=True)
    assert res.low == [0, 1, 2] and res.high == [3, 4, 5]
    assert {e.object_id for e in res.document.entries} == {1, 2}


def test_refine_without_document_is_flagged():
    captions, unc, cents, crops, reshots = scene(2)
    res = rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(background={0}))
    # only object 1 survives, lands in the low half, nothing to refine
    assert res.high == [] and res.final == captions
    captions, unc, cents, crops, reshots = scene(3)
    res = rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(background={0, 1}))
    assert res.low == [2] and res.refinements == []


def test_refine_multi_pass_never_mutates_document():
    captions, unc, cents, crops, reshots = scene()
    res = rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(), passes=2)
    assert [e.caption for e in res.document.entries] == ["cap0", "cap1", "cap2"]
    assert all(r.passes == 2 for r in res.refinements)
    with pytest.raises(ValueError):
        rag.refine_objects(captions, unc, cents, crops, reshots, FakeVLM(), passes=0)
