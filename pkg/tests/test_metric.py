import json

import numpy as np
import pytest

from metric_oracle import oracle_score, oracle_scores, random_instance
from trustcbm.data.schema import Rect
from trustcbm.metric import (
    DEFAULT_BOX_FRACTION,
    BoxSpec,
    MetricError,
    TrustReport,
    corresponding_region,
    region_contains,
    trust_score,
    upsample_map,
)


def replay(maps: np.ndarray):
    """Localizer that hands out the stored maps in dataset order, whatever the batch size."""
    pos = [0]

    def localize(images):
        out = maps[pos[0] : pos[0] + len(images)]
        pos[0] += len(images)
        return out

    return localize


# ---------------------------------------------------------------- upsampling


def test_upsample_constant_and_identity():
    assert np.array_equal(upsample_map(np.array([[3.5]]), 5, 7), np.full((5, 7), 3.5))
    m = np.random.default_rng(0).normal(size=(4, 6))
    assert np.array_equal(upsample_map(m, 4, 6), m)


def test_upsample_2x2_to_4x4_per_pixel_formula():
    m = np.array([[1.0, 2.0], [3.0, 5.0]])
    out = upsample_map(m, 4, 4)
    for i in range(4):
        for j in range(4):
            y, x = i / 3, j / 3
            v = (1 - y) * (1 - x) * 1 + (1 - y) * x * 2 + y * (1 - x) * 3 + y * x * 5
            assert abs(out[i, j] - v) <= 1e-9


def test_upsample_rejects_downsizing():
    with pytest.raises(MetricError):
        upsample_map(np.zeros((5, 5)), 4, 8)


# ---------------------------------------------------------------- region / containment


def test_region_examples():
    m = np.zeros((4, 4))
    m[1, 2] = 1
    assert corresponding_region(m, (3, 3)) == Rect(0, 1, 2, 3)
    m = np.zeros((4, 4))
    m[0, 0] = 1
    assert corresponding_region(m, (3, 3)) == Rect(0, 0, 2, 2)
    m = np.zeros((4, 4))
    m[0, 3] = m[2, 1] = 1
    box = corresponding_region(m, (1, 1))
    assert (box.top, box.left) == (0, 3)


def test_region_even_box_and_clamp_keep_size():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.normal(size=(17, 23))
        hb, wb = int(rng.integers(1, 18)), int(rng.integers(1, 24))
        box = corresponding_region(m, (hb, wb))
        assert box.height == hb and box.width == wb
        assert box.top >= 0 and box.left >= 0 and box.bottom <= 16 and box.right <= 22
        r, c = np.unravel_index(np.argmax(m), m.shape)
        assert box.contains_point(r, c)


def test_contains_examples():
    box = Rect(0, 0, 9, 9)
    assert region_contains(box, (5, 5))
    assert region_contains(box, (0, 9))
    assert not region_contains(box, Rect(2, 2, 10, 5))
    assert region_contains(box, Rect(2, 2, 9, 5))


def test_box_spec():
    assert BoxSpec().resolve(224, 224) == (90, 90)
    assert BoxSpec().resolve(96, 96) == (39, 39)
    assert DEFAULT_BOX_FRACTION == pytest.approx(0.402, abs=1e-3)
    assert BoxSpec(height=5, width=7).resolve(10, 10) == (5, 7)
    with pytest.raises(MetricError):
        BoxSpec(height=20, width=5).resolve(10, 10)
    with pytest.raises(MetricError):
        BoxSpec(fraction=0.0).resolve(10, 10)


# ---------------------------------------------------------------- trust score


def _perfect_instance():
    ds, maps = random_instance(0)
    maps = np.zeros_like(maps)
    H, W = ds.image_size
    Hl, Wl = maps.shape[-2:]
    for n, s in enumerate(ds.samples):
        for c in range(maps.shape[1]):
            part = s.part(ds.schema.part_of(c))
            r = int(round(part.center[0] * (Hl - 1) / (H - 1)))
            col = int(round(part.center[1] * (Wl - 1) / (W - 1)))
            maps[n, c, r, col] = 1.0
    return ds, maps


def test_all_contained_gives_one():
    ds, maps = _perfect_instance()
    report = trust_score(replay(maps), ds, BoxSpec(fraction=1.0))
    assert report.score == 1.0


def test_two_concept_arithmetic():
    from trustcbm.data.schema import Concept, ConceptSchema, Dataset, ImageSample, PartAnnotation

    schema = ConceptSchema((Concept(0, 0, "a"), Concept(1, 1, "b")), ((0, "p"), (1, "q")))
    parts = (PartAnnotation(0, (2.0, 2.0), Rect(2, 2, 2, 2)), PartAnnotation(1, (7.0, 7.0), Rect(7, 7, 7, 7)))
    img = np.zeros((10, 10, 3), np.uint8)
    ds = Dataset(
        tuple(ImageSample(img, np.ones(2, np.uint8), 0, parts, str(i)) for i in range(2)),
        schema, ("test", "test"), {"num_categories": 1},
    )
    maps = np.zeros((2, 2, 10, 10))
    maps[:, 0, 2, 2] = 1  # concept a on its part in both images
    maps[0, 1, 7, 7] = 1  # concept b on its part once
    maps[1, 1, 0, 9] = 1  # and far away once
    report = trust_score(replay(maps), ds, BoxSpec(height=3, width=3))
    assert report.rates() == {0: 1.0, 1: 0.5}
    assert report.score == 0.75


@pytest.mark.parametrize("seed", range(50))
def test_matches_double_loop_oracle(seed):
    ties = seed % 5 == 0
    ds, maps = random_instance(seed, ties=ties)
    H, W = ds.image_size
    rng = np.random.default_rng(1000 + seed)
    hb, wb = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
    box = BoxSpec(height=hb, width=wb)
    target = "region" if seed % 2 else "point"
    report = trust_score(replay(maps), ds, box, target=target, batch_size=int(rng.integers(1, 5)))
    expected = oracle_scores(ds, maps, hb, wb, target)
    assert report.rates() == expected
    assert report.score == oracle_score(expected)
    assert 0.0 <= report.score <= 1.0
    assert report.excluded == [c for c in range(ds.schema.num_concepts) if c not in expected]

    # larger box, same centers: no rate decreases
    bigger = BoxSpec(height=min(H, hb + 3), width=min(W, wb + 2))
    big = trust_score(replay(maps), ds, bigger, target=target)
    for c, rate in report.rates().items():
        assert big.rates()[c] >= rate

    # positive rescaling of every map leaves boxes and rates unchanged
    alpha = 0.25 if ties else float(rng.uniform(0.01, 100.0))
    scaled = trust_score(replay(maps * alpha), ds, box, target=target)
    assert scaled.rates() == report.rates() and scaled.score == report.score
    assert scaled.records == report.records


def test_image_order_invariance():
    ds, maps = random_instance(11)
    perm = np.random.default_rng(0).permutation(len(ds))
    shuffled = ds.select(perm)
    box = BoxSpec(height=9, width=9)
    a = trust_score(replay(maps), ds, box)
    b = trust_score(replay(maps[perm]), shuffled, box)
    assert a.rates() == b.rates()
    assert a.score == b.score


def test_invisible_parts_and_absent_concepts_are_skipped():
    ds, maps = random_instance(4)
    report = trust_score(replay(maps), ds, BoxSpec(height=5, width=5))
    for rec in report.records:
        s = next(x for x in ds.samples if x.sample_id == rec["sample_id"])
        assert s.concept_labels[rec["concept_id"]]
        assert s.part(ds.schema.part_of(rec["concept_id"])).visible


def test_localizer_failure_has_context():
    ds, _ = random_instance(1)

    def broken(images):
        raise RuntimeError("boom")

    with pytest.raises(MetricError, match="000"):
        trust_score(broken, ds, BoxSpec(height=3, width=3))


def test_wrong_map_shape():
    ds, maps = random_instance(2)
    with pytest.raises(MetricError, match="shape"):
        trust_score(replay(maps[:, :1]), ds, BoxSpec(height=3, width=3))


def test_report_serialization(tmp_path):
    ds, maps = random_instance(5)
    report = trust_score(replay(maps), ds, BoxSpec(height=7, width=7), source="replay")
    report.save(tmp_path / "r.json")
    back = TrustReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.rates() == report.rates() and back.score == report.score
    assert back.config["source"] == "replay"
    report.save_records_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == len(report.records) + 1
