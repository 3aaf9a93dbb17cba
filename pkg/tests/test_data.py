import numpy as np
import pytest

from sparseseg.data import (
    TRAIN_SEEDS, VAL_SEEDS, ConfusionMatrix, FormatError, class_bands, gen_scene, make_dataset,
    metrics, read_image, read_labels, read_pixmap, render_overlay, write_image, write_labels,
    write_pixmap,
)
from sparseseg.sparsity import select_wta
from sparseseg.tensor import ParameterError


# -- generator ---------------------------------------------------------------------------

def test_scenes_are_deterministic():
    a, b = gen_scene(42), gen_scene(42)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(gen_scene(43).labels, a.labels)


@pytest.mark.parametrize("seed", range(0, 60, 3))
def test_scene_structure(seed):
    s = gen_scene(seed)
    assert s.image.shape == (1, 3, 64, 128) and s.labels.shape == (64, 128)
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert 0 <= s.labels.min() and s.labels.max() < 8
    top, _, bottom = class_bands(8)
    assert np.mean(s.labels[:16] == top[0]) >= 0.8
    assert np.isin(s.labels[-4:], bottom).all()


def test_scene_objects_include_sub_region_sizes():
    _, middle, _ = class_bands(8)
    small = 0
    for seed in range(20):
        labels = gen_scene(seed).labels
        for c in middle[1:]:
            rows, cols = np.nonzero(labels == c)
            if len(rows) and (np.ptp(rows) < 15 or np.ptp(cols) < 15):
                small += 1
    assert small > 0


def test_generator_errors_and_splits():
    with pytest.raises(ParameterError):
        gen_scene(0, dims=(60, 128))
    with pytest.raises(ParameterError):
        class_bands(2)
    with pytest.raises(ParameterError):
        make_dataset([])
    assert not set(TRAIN_SEEDS) & set(VAL_SEEDS)
    images, labels = make_dataset([1, 2, 3], dims=(32, 64))
    assert images.shape == (3, 3, 32, 64) and labels.shape == (3, 32, 64)


# -- metrics ------------------------------------------------------------------------------

def test_metrics_hand_example():
    pa, ma, miou = metrics(np.array([[3, 1], [2, 2]]))
    assert (pa, ma, miou) == pytest.approx((0.625, 0.625, 0.45), abs=1e-15)


def test_metrics_perfect_and_all_wrong(rng):
    truth = rng.integers(0, 5, size=(8, 8))
    assert metrics(ConfusionMatrix(5).add(truth, truth)) == (1.0, 1.0, 1.0)
    pa, _, miou = metrics(ConfusionMatrix(5).add((truth + 1) % 5, truth))
    assert pa == 0.0 and miou == 0.0
    with pytest.raises(ParameterError):
        metrics(ConfusionMatrix(3))


def test_metrics_permutation_invariance(rng):
    m = rng.integers(0, 20, size=(6, 6))
    perm = rng.permutation(6)
    assert metrics(m[perm][:, perm]) == pytest.approx(metrics(m), abs=1e-15)


def test_confusion_matrix_counts_and_absent_classes():
    cm = ConfusionMatrix(4).add([0, 1, 1, 3], [0, 1, 255, 1], ignore_index=255)
    assert cm.total == 3
    assert cm.counts[1, 3] == 1
    # classes 2 and 3 have no ground truth and are left out of the means
    assert metrics(cm) == pytest.approx((2 / 3, 0.75, 0.75))


# -- pixmaps and overlays ---------------------------------------------------------------------

def test_pixmap_round_trips(tmp_path, rng):
    px = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    write_pixmap(tmp_path / "a.ppm", px)
    assert np.array_equal(read_pixmap(tmp_path / "a.ppm"), px)
    labels = rng.integers(0, 8, size=(6, 9))
    write_labels(tmp_path / "l.pgm", labels)
    assert np.array_equal(read_labels(tmp_path / "l.pgm"), labels)
    img = np.round(rng.random((1, 3, 4, 6)) * 255) / 255
    write_image(tmp_path / "i.ppm", img)
    assert np.array_equal(read_image(tmp_path / "i.ppm"), img)


def test_pixmap_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
    assert read_pixmap(tmp_path / "c.pgm").tolist() == [[1, 2]]


@pytest.mark.parametrize("data,offset", [
    (b"P3\n2 2\n255\n", 0),
    (b"P5\n2 x\n255\n", 5),
    (b"P5\n2 2\n65535\n", 7),
    (b"P5\n2 2\n255\n\x00", 12),
    (b"P5\n2", 4),
])
def test_malformed_pixmaps_report_byte_offset(tmp_path, data, offset):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(FormatError) as err:
        read_pixmap(path)
    assert err.value.offset == offset
    assert f"byte {offset}" in str(err.value)


def test_label_and_image_kind_checks(tmp_path):
    write_pixmap(tmp_path / "g.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(ParameterError):
        read_image(tmp_path / "g.pgm")
    with pytest.raises(ParameterError):
        write_labels(tmp_path / "x.pgm", np.full((2, 2), 300))


def test_overlay_examples(rng):
    image = gen_scene(5).image
    assert np.array_equal(render_overlay(image, np.zeros((4, 8))), image)
    mask = select_wta(rng.normal(size=(1, 4, 8)), 8)[0]
    out = render_overlay(image, mask)
    changed = np.any(out[0] != image[0], axis=0)
    blocks = changed.reshape(4, 16, 8, 16).all(axis=(1, 3))
    assert blocks.sum() == 8 and np.array_equal(blocks, mask.astype(bool))
    assert changed.sum() == 8 * 16 * 16
    with pytest.raises(ParameterError):
        render_overlay(image, np.zeros((3, 8)))
