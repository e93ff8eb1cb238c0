import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deskseg.data import coco
from deskseg.data.rle import (
    CodecError,
    EmptyMaskError,
    RleMask,
    bbox_from_mask,
    rle_decode,
    rle_encode,
    rle_overlap,
)
from deskseg.data.synth import (
    PAPER_SPLIT,
    ConfigError,
    SynthConfig,
    generate_synthetic,
    load_image_store,
    save_image_store,
    split_dataset,
)

masks = st.tuples(st.integers(1, 40), st.integers(1, 40)).flatmap(
    lambda hw: hnp.arrays(np.uint8, hw, elements=st.integers(0, 1))
)


# ---------------------------------------------------------------------------
# RLE


def test_rle_trivial_cases():
    assert rle_encode(np.zeros((3, 3))).counts == (9,)
    assert rle_encode(np.ones((2, 2))).counts == (0, 4)
    np.testing.assert_array_equal(rle_decode(RleMask((3, 3), (9,))), np.zeros((3, 3)))
    want = np.zeros((3, 3), np.uint8)
    want[1, 0] = want[2, 0] = 1  # column-major: one 0, then two 1s
    np.testing.assert_array_equal(rle_decode(RleMask((3, 3), (1, 2, 6))), want)


def test_rle_decode_rejects_bad_counts():
    with pytest.raises(CodecError, match="sum"):
        rle_decode(RleMask((3, 3), (4, 4)))
    with pytest.raises(CodecError):
        rle_decode(RleMask((1, 2), (3, -1)))


@given(masks)
def test_rle_round_trip(mask):
    rle = rle_encode(mask)
    assert rle.counts[0] >= 0 and all(c > 0 for c in rle.counts[1:])
    assert sum(rle.counts) == mask.size
    np.testing.assert_array_equal(rle_decode(rle), mask)
    assert rle.area == int(mask.sum())
    assert RleMask.from_json(json.loads(json.dumps(rle.to_json()))) == rle


@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_rle_overlap_matches_decoded_counts(h, w, data):
    a = data.draw(hnp.arrays(np.uint8, (h, w), elements=st.integers(0, 1)))
    b = data.draw(hnp.arrays(np.uint8, (h, w), elements=st.integers(0, 1)))
    inter, union = rle_overlap(rle_encode(a), rle_encode(b))
    assert inter == int((a & b).sum())
    assert union == int((a | b).sum())


def test_rle_overlap_rejects_size_mismatch():
    with pytest.raises(CodecError):
        rle_overlap(rle_encode(np.ones((2, 3))), rle_encode(np.ones((3, 2))))


def test_bbox_trivial_cases():
    m = np.zeros((5, 8))
    m[2, 5] = 1
    assert bbox_from_mask(m) == (5, 2, 1, 1)
    assert bbox_from_mask(np.ones((4, 6))) == (0, 0, 6, 4)
    with pytest.raises(EmptyMaskError):
        bbox_from_mask(np.zeros((3, 3)))


@given(masks)
def test_bbox_matches_pixel_scan(mask):
    if not mask.any():
        return
    coords = [(r, c) for r in range(mask.shape[0]) for c in range(mask.shape[1]) if mask[r, c]]
    rmin = min(r for r, _ in coords)
    rmax = max(r for r, _ in coords)
    cmin = min(c for _, c in coords)
    cmax = max(c for _, c in coords)
    assert bbox_from_mask(mask) == (cmin, rmin, cmax - cmin + 1, rmax - rmin + 1)


# ---------------------------------------------------------------------------
# annotation documents


def _doc(bbox=(27, 0, 546, 731), image_id=1):
    h, w = 731, 600
    m = np.zeros((h, w), np.uint8)
    x, y, bw, bh = bbox
    m[y : y + bh, x : x + bw] = 1
    rle = rle_encode(m)
    return {
        "categories": [{"id": 0, "name": "defect"}, {"id": 1, "name": "normal"}],
        "images": [{"id": 1, "file_name": "a.npy", "width": w, "height": h, "date_captured": ""}],
        "annotations": [
            {
                "id": 1,
                "image_id": image_id,
                "category_id": 1,
                "iscrowd": 0,
                "area": rle.area,
                "bbox": list(bbox),
                "segmentation": rle.to_json(),
            }
        ],
    }


def test_parse_carcass_bbox():
    ds = coco.from_document(_doc())
    xmin, ymin, width, height = ds.annotations[0].bbox
    assert (xmin, ymin, width, height) == (27, 0, 546, 731)


def test_parse_empty_document():
    ds = coco.loads('{"images": [], "annotations": [], "categories": []}')
    assert ds.images == [] and ds.annotations == []


def test_dangling_image_id_names_the_id():
    with pytest.raises(coco.ValidationError, match="image_id 7"):
        coco.from_document(_doc(image_id=7))


@pytest.mark.parametrize(
    "mutate,kind,where",
    [
        (lambda d: d["annotations"][0].pop("bbox"), coco.ParseError, r"annotations\[0\]"),
        (lambda d: d["annotations"][0].__setitem__("bbox", [1, 2]), coco.ParseError, r"annotations\[0\]\.bbox"),
        (lambda d: d["images"][0].__setitem__("width", "wide"), coco.ParseError, r"images\[0\]\.width"),
        (lambda d: d["annotations"][0].__setitem__("iscrowd", 2), coco.ValidationError, "iscrowd"),
        (lambda d: d["annotations"][0].__setitem__("category_id", 5), coco.ValidationError, "category_id 5"),
        (lambda d: d["annotations"][0].__setitem__("area", 3), coco.ValidationError, "area"),
        (lambda d: d["annotations"][0].__setitem__("bbox", [500, 0, 546, 731]), coco.ValidationError, "bbox"),
        (lambda d: d["images"].append(dict(d["images"][0])), coco.ValidationError, "duplicate image id 1"),
    ],
)
def test_document_errors_carry_location(mutate, kind, where):
    doc = _doc()
    mutate(doc)
    with pytest.raises(kind, match=where):
        coco.from_document(doc)


def test_malformed_json_reports_position():
    with pytest.raises(coco.ParseError, match="line 1 column"):
        coco.loads('{"images": [}')


def test_serialize_parse_round_trip():
    ds, _ = generate_synthetic(SynthConfig(num_images=6, seed=3))
    text = coco.dumps(ds)
    back = coco.loads(text)
    assert back == ds
    assert coco.dumps(back) == text
    assert set(json.loads(text)) == {"categories", "images", "annotations"}


# ---------------------------------------------------------------------------
# synthetic scenes and splits


def test_generation_is_deterministic():
    a, sa = generate_synthetic(SynthConfig(num_images=5, seed=42))
    b, sb = generate_synthetic(SynthConfig(num_images=5, seed=42))
    assert coco.dumps(a) == coco.dumps(b)
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_generation_depends_only_on_seed_and_index():
    _, small = generate_synthetic(SynthConfig(num_images=3, seed=9))
    _, big = generate_synthetic(SynthConfig(num_images=6, seed=9))
    for k in small:
        assert small[k].tobytes() == big[k].tobytes()


def test_single_instance_config():
    ds, _ = generate_synthetic(SynthConfig(num_images=12, min_instances=1, max_instances=1, seed=5))
    by_image = ds.annotations_by_image()
    assert all(len(v) == 1 for v in by_image.values())
    assert all(a.iscrowd == 0 for a in ds.annotations)


def test_defect_probability_zero_gives_only_normal():
    ds, _ = generate_synthetic(SynthConfig(num_images=10, defect_prob=0.0, seed=6))
    assert ds.annotations and all(a.category_id == coco.NORMAL for a in ds.annotations)


def test_generated_annotations_are_exact():
    ds, store = generate_synthetic(SynthConfig(num_images=20, seed=7))
    ds.validate()
    by_image = ds.annotations_by_image()
    for im in ds.images:
        assert store[im.file_name].shape == (1, im.height, im.width)
        assert 0.0 <= store[im.file_name].min() and store[im.file_name].max() <= 1.0
        anns = by_image[im.id]
        assert 1 <= len(anns) <= 3
        union = np.zeros((im.height, im.width), int)
        for a in anns:
            m = rle_decode(a.segmentation)
            assert a.area == int(m.sum())
            assert a.bbox == tuple(float(v) for v in bbox_from_mask(m))
            assert a.iscrowd == int(len(anns) > 1)
            union += m
        assert union.max() <= 1  # visible masks never overlap


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(defect_prob=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(min_instances=0)


def test_paper_split_proportions():
    ds, _ = generate_synthetic(SynthConfig(num_images=1000, seed=1, height=32, width=32, radius_range=(4, 7),
                                           min_visible_area=6))
    train, val, test = split_dataset(ds, PAPER_SPLIT, seed=0)
    assert (len(train.images), len(val.images), len(test.images)) == (701, 176, 123)


@settings(max_examples=25)
@given(st.integers(0, 40), st.integers(0, 1000))
def test_split_is_a_partition(n, seed):
    ds = coco.CocoDataset(images=[coco.ImageRecord(i + 1, f"{i}.npy", 4, 4) for i in range(n)])
    parts = split_dataset(ds, PAPER_SPLIT, seed=seed)
    ids = [im.id for p in parts for im in p.images]
    assert sorted(ids) == list(range(1, n + 1))
    again = split_dataset(ds, PAPER_SPLIT, seed=seed)
    assert [[im.id for im in p.images] for p in parts] == [[im.id for im in p.images] for p in again]


def test_split_edge_ratios():
    ds, _ = generate_synthetic(SynthConfig(num_images=8, seed=2))
    train, val, test = split_dataset(ds, (1, 0, 0))
    assert len(train.images) == 8 and not val.images and not test.images
    assert len(train.annotations) == len(ds.annotations)
    with pytest.raises(ConfigError):
        split_dataset(ds, (0.5, 0.2, 0.2))


def test_image_store_round_trip(tmp_path):
    _, store = generate_synthetic(SynthConfig(num_images=3, seed=4))
    save_image_store(store, tmp_path)
    back = load_image_store(tmp_path)
    assert set(back) == set(store)
    assert all(back[k].tobytes() == store[k].tobytes() for k in store)
