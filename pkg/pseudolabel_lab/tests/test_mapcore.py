"""Map types and their binary files."""

import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from pseudolabel_lab.mapcore import (
    NULL,
    VOID,
    BadMagicError,
    DimensionError,
    EntropyMap,
    LabelMap,
    LabelRangeError,
    MapFormatError,
    MapValidationError,
    ProbMap,
    PseudoLabelMap,
    TruncatedPayloadError,
    UnsupportedVersionError,
    argmax_map,
    list_maps,
    max_score_map,
    read_entropymap,
    read_features,
    read_labelmap,
    read_probmap,
    read_pseudolabels,
    validate,
    write_entropymap,
    write_features,
    write_labelmap,
    write_probmap,
    write_pseudolabels,
)
from pseudolabel_lab.tests.conftest import random_probmap


def test_probmap_file_is_bit_exact(tmp_path, rng):
    prob = random_probmap(rng, 5, 7, 4)
    path = tmp_path / "a.segp"
    write_probmap(prob, path)
    data = path.read_bytes()
    assert data[:4] == b"SEGP"
    assert struct.unpack_from("<IIII", data, 4) == (1, 5, 7, 4)
    assert len(data) == 20 + 4 * 5 * 7 * 4
    assert read_probmap(path).values.tobytes() == prob.values.tobytes()


def test_channel_axis_varies_fastest(tmp_path):
    values = np.zeros((2, 3, 2), dtype=np.float32)
    values[1, 2] = [0.25, 0.75]
    values[0, 0] = [1.0, 0.0]
    write_probmap(ProbMap(values), tmp_path / "a.segp")
    payload = np.frombuffer((tmp_path / "a.segp").read_bytes()[20:], dtype="<f4")
    assert payload[(1 * 3 + 2) * 2 + 1] == 0.75
    assert payload[0] == 1.0


def test_label_sentinels_are_255(tmp_path):
    labels = np.array([[0, 1], [VOID, 2]])
    write_labelmap(LabelMap(labels, 3), tmp_path / "gt.segl")
    write_pseudolabels(PseudoLabelMap(labels, 3), tmp_path / "pl.segl")
    assert (tmp_path / "gt.segl").read_bytes()[20:] == bytes([0, 1, 255, 2])
    assert (tmp_path / "gt.segl").read_bytes() == (tmp_path / "pl.segl").read_bytes()
    pseudo = read_pseudolabels(tmp_path / "pl.segl")
    assert_array_equal(pseudo.labeled, [[True, True], [False, True]])
    assert NULL == VOID == 255


def test_entropy_and_feature_files(tmp_path, rng):
    ent = EntropyMap(rng.uniform(size=(3, 4)))
    write_entropymap(ent, tmp_path / "e.sege")
    data = (tmp_path / "e.sege").read_bytes()
    assert data[:4] == b"SEGE" and len(data) == 16 + 4 * 12
    assert_array_equal(read_entropymap(tmp_path / "e.sege").values, ent.values)

    features = rng.normal(size=(3, 4, 2)).astype(np.float32)
    write_features(features, tmp_path / "f.segf")
    assert_array_equal(read_features(tmp_path / "f.segf"), features)


def test_bad_magic(tmp_path, rng):
    write_probmap(random_probmap(rng, 2, 2, 3), tmp_path / "a.segp")
    with pytest.raises(BadMagicError):
        read_labelmap(tmp_path / "a.segp")


def test_unsupported_version(tmp_path):
    (tmp_path / "a.segl").write_bytes(struct.pack("<4sIIII", b"SEGL", 2, 1, 1, 2) + b"\x00")
    with pytest.raises(UnsupportedVersionError):
        read_labelmap(tmp_path / "a.segl")


@pytest.mark.parametrize("cut", [1, 7, 30])
def test_truncated_payload(tmp_path, rng, cut):
    path = tmp_path / "a.segp"
    write_probmap(random_probmap(rng, 3, 3, 3), path)
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(TruncatedPayloadError):
        read_probmap(path)


def test_trailing_bytes_rejected(tmp_path, rng):
    path = tmp_path / "a.segp"
    write_probmap(random_probmap(rng, 2, 2, 2), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(MapFormatError):
        read_probmap(path)


def test_zero_dimensions_rejected(tmp_path):
    (tmp_path / "a.segp").write_bytes(struct.pack("<4sIIII", b"SEGP", 1, 0, 4, 3))
    with pytest.raises(DimensionError):
        read_probmap(tmp_path / "a.segp")


def test_label_out_of_range(tmp_path):
    (tmp_path / "a.segl").write_bytes(struct.pack("<4sIIII", b"SEGL", 1, 1, 2, 3) + bytes([0, 3]))
    with pytest.raises(LabelRangeError):
        read_labelmap(tmp_path / "a.segl")


def test_label_file_class_limit(tmp_path):
    (tmp_path / "a.segl").write_bytes(struct.pack("<4sIIII", b"SEGL", 1, 1, 1, 256) + bytes([0]))
    with pytest.raises(DimensionError):
        read_labelmap(tmp_path / "a.segl")


def test_format_errors_are_value_errors():
    assert issubclass(MapFormatError, ValueError)
    assert issubclass(MapValidationError, ValueError)


def test_validate_accepts_softmax(rng):
    assert validate(random_probmap(rng, 4, 4, 5)) is None


@pytest.mark.parametrize(
    "pixel, expected",
    [
        ([0.5, 0.6], "pixel sum"),
        ([1.2, -0.2], "range"),
        ([np.nan, 1.0], "range"),
    ],
)
def test_validate_reports_violation(pixel, expected):
    values = np.full((2, 2, 2), 0.5, dtype=np.float32)
    values[1, 0] = pixel
    problem = validate(ProbMap(values))
    assert problem is not None and problem.startswith(expected)
    assert "(1, 0)" in problem


def test_read_never_repairs(tmp_path):
    values = np.full((1, 2, 2), 0.7, dtype=np.float32)
    write_probmap(ProbMap(values), tmp_path / "bad.segp")
    prob = read_probmap(tmp_path / "bad.segp")
    assert_array_equal(prob.values, values)
    assert validate(prob) is not None


def test_argmax_ties_take_lowest_index():
    values = np.array([[[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]], dtype=np.float32)
    prob = ProbMap(values)
    assert_array_equal(argmax_map(prob).labels, [[0, 1]])
    assert_array_equal(max_score_map(prob), np.float32([[0.4, 0.45]]))


def test_maps_are_immutable(rng):
    prob = random_probmap(rng, 2, 2, 2)
    with pytest.raises(ValueError):
        prob.values[0, 0, 0] = 1.0


def test_entropy_map_range_checked():
    with pytest.raises(MapValidationError):
        EntropyMap(np.array([[1.5]]))


def test_list_maps_sorted_by_name(tmp_path, rng):
    for name in ["b", "a", "c"]:
        write_probmap(random_probmap(rng, 1, 1, 2), tmp_path / f"{name}.segp")
    (tmp_path / "notes.txt").write_text("x")
    assert [p.stem for p in list_maps(tmp_path, ".segp")] == ["a", "b", "c"]
