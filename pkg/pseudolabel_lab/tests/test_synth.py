"""Synthetic domains and their on-disk datasets."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from pseudolabel_lab.mapcore import EntropyMap
from pseudolabel_lab.settings import ConfigError
from pseudolabel_lab.synth import (
    BENCHMARK_SIZES,
    Dataset,
    DomainShiftSpec,
    SceneSpec,
    Split,
    boundary_entropy_gap,
    default_benchmark,
    gen_domain_pair,
    gen_scene,
    load_manifest,
    write_dataset,
)


def test_scene_is_a_pure_function_of_its_inputs(small_spec):
    a = gen_scene(small_spec, 2, Split.TARGET)
    b = gen_scene(small_spec, 2, Split.TARGET)
    assert a.features.tobytes() == b.features.tobytes()
    assert_array_equal(a.labels.labels, b.labels.labels)
    assert_array_equal(a.boundary_band, b.boundary_band)


@pytest.mark.parametrize("index, split", [(3, Split.SOURCE), (2, Split.TARGET_EVAL)])
def test_scene_streams_are_independent(small_spec, index, split):
    reference = gen_scene(small_spec, 2, Split.TARGET)
    other = gen_scene(small_spec, index, split)
    assert reference.features.tobytes() != other.features.tobytes()


def test_scene_shapes(small_spec):
    scene = gen_scene(small_spec)
    assert scene.features.shape == (12, 12, 2)
    assert scene.features.dtype == np.float32
    assert scene.labels.num_classes == 3
    assert scene.labels.labeled.all()
    assert scene.split is Split.SOURCE


def test_noiseless_unblurred_features_are_class_means(small_spec):
    spec = SceneSpec(**dict(small_spec.to_dict(), noise_sigma=0.0, boundary_blur=0.0))
    scene = gen_scene(spec, 1)
    expected = spec.class_palette[scene.labels.labels].astype(np.float32)
    assert_array_equal(scene.features, expected)
    assert not scene.boundary_band.any()


@pytest.mark.parametrize("seed", range(3))
def test_class_feature_means_match_the_palette(small_spec, seed):
    spec = SceneSpec(**dict(small_spec.to_dict(), height=256, width=256, num_regions=40, boundary_blur=0.0, seed=seed))
    scene = gen_scene(spec)
    features = scene.features.reshape(-1, spec.feature_dim).astype(np.float64)
    labels = scene.labels.labels.ravel()
    for c in np.unique(labels):
        pixels = features[labels == c]
        bound = 3.0 * spec.noise_sigma / np.sqrt(len(pixels))
        assert np.all(np.abs(pixels.mean(axis=0) - spec.class_palette[c]) < bound)


def test_borders_fall_inside_the_blur_band(small_spec):
    for index in range(4):
        scene = gen_scene(small_spec, index)
        labels = scene.labels.labels
        changes = np.zeros(labels.shape, dtype=bool)
        changes[:, :-1] |= labels[:, :-1] != labels[:, 1:]
        changes[:, 1:] |= labels[:, :-1] != labels[:, 1:]
        changes[:-1, :] |= labels[:-1, :] != labels[1:, :]
        changes[1:, :] |= labels[:-1, :] != labels[1:, :]
        assert not (changes & ~scene.boundary_band).any()


def test_single_class_scene_has_no_band():
    spec = SceneSpec(6, 6, 2, 4, 1, 0, [[0.0], [1.0]], class_prior=[1.0, 1e-12])
    scene = gen_scene(spec)
    assert (scene.labels.labels == 0).all()
    assert not scene.boundary_band.any()


def test_spec_validation(small_spec):
    data = small_spec.to_dict()
    with pytest.raises(ValueError):
        SceneSpec(**dict(data, height=0))
    with pytest.raises(ValueError):
        SceneSpec(**dict(data, class_palette=[[0.0, 0.0]]))
    with pytest.raises(ConfigError):
        SceneSpec.from_dict(dict(data, colour="red"))
    assert SceneSpec.from_dict(data).to_dict() == data


def test_class_prior_is_normalized(small_spec):
    spec = SceneSpec(**dict(small_spec.to_dict(), class_prior=[2.0, 1.0, 1.0]))
    assert spec.class_prior.tolist() == [0.5, 0.25, 0.25]


def test_shift_apply(small_spec, small_shift):
    target = small_shift.apply(small_spec)
    assert_array_equal(target.class_palette, small_spec.class_palette + small_shift.mean_shift)
    assert target.noise_sigma == pytest.approx(small_spec.noise_sigma * 1.2)
    null = DomainShiftSpec.null(3, 2).apply(small_spec)
    assert_array_equal(null.class_palette, small_spec.class_palette)
    with pytest.raises(ValueError):
        DomainShiftSpec.null(2, 2).apply(small_spec)


def test_domain_pair_sizes(small_spec, small_shift):
    pair = gen_domain_pair(small_spec, small_shift, 2, 3, 1, jobs=2)
    assert [len(pair.source), len(pair.target), len(pair.target_eval)] == [2, 3, 1]
    assert {s.split for s in pair.target} == {Split.TARGET}
    assert [s.index for s in pair.target] == [0, 1, 2]
    with pytest.raises(ValueError):
        gen_domain_pair(small_spec, small_shift, 0, 1)


def test_domain_pair_does_not_depend_on_jobs(small_spec, small_shift):
    serial = gen_domain_pair(small_spec, small_shift, 2, 2, jobs=1)
    parallel = gen_domain_pair(small_spec, small_shift, 2, 2, jobs=4)
    for a, b in zip(serial.source + serial.target, parallel.source + parallel.target):
        assert a.features.tobytes() == b.features.tobytes()


def test_default_benchmark():
    spec, shift = default_benchmark(4)
    assert (spec.height, spec.width, spec.num_classes, spec.feature_dim) == (32, 32, 6, 4)
    assert shift.sigma_scale == 1.25
    again, _ = default_benchmark(4)
    assert_array_equal(spec.class_palette, again.class_palette)
    assert not np.array_equal(spec.class_palette, default_benchmark(5)[0].class_palette)
    assert BENCHMARK_SIZES == {"n_source": 8, "n_target": 8, "n_target_eval": 4}


def test_boundary_entropy_gap(small_spec):
    scenes = [gen_scene(small_spec, i) for i in range(3)]
    entropies = [EntropyMap(np.where(s.boundary_band, 0.8, 0.2) + 0.01 * (i % 2)) for i, s in enumerate(scenes)]
    gap = boundary_entropy_gap(scenes, entropies)
    assert gap.band_mean > gap.interior_mean
    assert gap.z_score > 3
    assert gap.band_pixels + gap.interior_pixels == 3 * 144
    with pytest.raises(ValueError):
        boundary_entropy_gap(scenes, entropies[:2])


def test_dataset_round_trip(tmp_path, small_spec, small_shift):
    pair = gen_domain_pair(small_spec, small_shift, 2, 2, 1)
    manifest = write_dataset(pair, tmp_path, small_spec, small_shift)
    assert (tmp_path / "target" / "00001.segf").exists()
    assert (tmp_path / "target-eval" / "00000.band.segl").exists()
    data = json.loads(manifest.read_text())
    assert data["version"] == 1
    assert len(data["scenes"]) == 5

    dataset = load_manifest(manifest)
    assert (dataset.num_classes, dataset.feature_dim) == (3, 2)
    assert dataset.synth_seed == small_spec.seed
    for original, loaded in zip(pair.target, dataset.target):
        assert original.features.tobytes() == loaded.features.tobytes()
        assert_array_equal(original.labels.labels, loaded.labels.labels)
        assert_array_equal(original.boundary_band, loaded.boundary_band)
    assert dataset.eval_scenes() is dataset.target_eval
    assert len(dataset.target_features()) == 2


def test_eval_scenes_fall_back_to_target(small_spec, small_shift):
    dataset = Dataset.from_pair(gen_domain_pair(small_spec, small_shift, 1, 2))
    assert dataset.eval_scenes() is dataset.target


def test_manifest_version_checked(tmp_path, small_spec, small_shift):
    manifest = write_dataset(gen_domain_pair(small_spec, small_shift, 1, 1), tmp_path, small_spec, small_shift)
    data = json.loads(manifest.read_text())
    data["version"] = 2
    manifest.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_manifest(manifest)
