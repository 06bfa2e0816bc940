"""
Tests for the synthetic CT-like dataset generator
"""
import json

import numpy as np
import pytest
from PIL import Image

import pvt_config as config
from ct_data import load_dataset
from synthetic_data import (
    MANIFEST_NAME, SyntheticSpec, _case_anatomy, central_slices, generate_synthetic, manifest_summary,
    render_slice,
)

SMALL = dict(cases_per_class=2, slices_min=6, slices_max=12, image_size=32, blob_radius=3)


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


class TestSyntheticSpec:
    @pytest.mark.parametrize('overrides', [
        {'cases_per_class': -1}, {'slices_min': 0}, {'slices_min': 20, 'slices_max': 10},
        {'image_size': 4}, {'blob_radius': 0}, {'noise': -0.1}, {'central_fraction': 0.0},
    ])
    def test_rejects_bad_values(self, overrides):
        with pytest.raises(config.ConfigError):
            SyntheticSpec(**overrides)

    def test_from_run_config(self):
        run_config = config.RunConfig({'synth_cases_per_class': '4', 'synth_image_size': '48', 'seed': '3'})
        spec = SyntheticSpec.from_run_config(run_config, seed=9)
        assert (spec.cases_per_class, spec.image_size, spec.seed) == (4, 48, 9)


class TestCentralSlices:
    def test_single_slice(self):
        assert central_slices(1, 0.5).tolist() == [0]

    def test_middle_half(self):
        assert central_slices(10, 0.5).tolist() == [2, 3, 4, 5, 6, 7]

    def test_whole_scan(self):
        assert central_slices(7, 1.0).tolist() == list(range(7))


class TestGenerate:
    def test_tree_and_manifest(self, tmp_path):
        manifest = generate_synthetic(SyntheticSpec(seed=0, **SMALL), tmp_path)
        on_disk = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert on_disk == json.loads(json.dumps(manifest))
        assert [c['case_id'] for c in manifest['cases']] == ['case_0000', 'case_0001', 'case_0002', 'case_0003']
        assert [c['label'] for c in manifest['cases']] == ['positive', 'positive', 'negative', 'negative']
        for case in manifest['cases']:
            assert 6 <= case['slices'] <= 12
            assert bool(case['blobs']) == (case['label'] == 'positive')

        dataset = load_dataset(tmp_path)
        assert [c.slice_count for c in dataset] == [c['slices'] for c in manifest['cases']]
        assert not dataset.warnings
        assert dataset[0].slice_paths[0].name == '000.png'

    def test_same_seed_identical_bytes(self, tmp_path):
        generate_synthetic(SyntheticSpec(seed=4, **SMALL), tmp_path / 'a')
        generate_synthetic(SyntheticSpec(seed=4, **SMALL), tmp_path / 'b')
        generate_synthetic(SyntheticSpec(seed=5, **SMALL), tmp_path / 'c')
        assert read_tree(tmp_path / 'a') == read_tree(tmp_path / 'b')
        assert read_tree(tmp_path / 'a') != read_tree(tmp_path / 'c')

    def test_regenerating_replaces_previous_output(self, tmp_path):
        generate_synthetic(SyntheticSpec(seed=1, cases_per_class=3, slices_min=4, slices_max=4, image_size=16,
                                         blob_radius=2), tmp_path)
        generate_synthetic(SyntheticSpec(seed=1, cases_per_class=1, slices_min=4, slices_max=4, image_size=16,
                                         blob_radius=2), tmp_path)
        assert len(load_dataset(tmp_path)) == 2

    def test_refuses_foreign_tree(self, tmp_path):
        (tmp_path / 'covid' / 'patient').mkdir(parents=True)
        with pytest.raises(FileExistsError):
            generate_synthetic(SyntheticSpec(**SMALL), tmp_path)

    def test_slices_are_8bit_grayscale(self, tmp_path):
        generate_synthetic(SyntheticSpec(seed=2, **SMALL), tmp_path)
        with Image.open(next((tmp_path / 'covid').rglob('*.png'))) as img:
            assert img.mode == 'L'
            assert img.size == (32, 32)

    def test_summary(self, tmp_path):
        manifest = generate_synthetic(SyntheticSpec(seed=0, **SMALL), tmp_path)
        summary = manifest_summary(manifest, tmp_path)
        assert (summary['cases'], summary['positive'], summary['negative']) == (4, 2, 2)
        assert summary['slices'] == sum(c['slices'] for c in manifest['cases'])
        assert summary == manifest_summary(json.loads((tmp_path / MANIFEST_NAME).read_text()), tmp_path)


class TestLesions:
    def test_lesions_add_exact_intensity(self):
        spec = SyntheticSpec(image_size=64, noise=0.0)
        rng = np.random.default_rng(0)
        anatomy = _case_anatomy(rng, spec, positive=True)
        clean = render_slice(rng, spec, anatomy, 10, 21, with_lesions=False)
        lesioned = render_slice(rng, spec, anatomy, 10, 21, with_lesions=True)
        yy, xx = np.mgrid[0:64, 0:64]
        disks = np.zeros((64, 64), dtype=bool)
        for by, bx in anatomy.blobs:
            disks |= (yy - by) ** 2 + (xx - bx) ** 2 <= spec.blob_radius ** 2
        assert disks.any()
        assert np.all(lesioned[disks] - clean[disks] >= spec.blob_intensity - 1e-9)
        np.testing.assert_array_equal(lesioned[~disks], clean[~disks])

    def test_lesions_only_on_central_slices(self, tmp_path):
        spec = SyntheticSpec(cases_per_class=1, slices_min=40, slices_max=40, noise=0.0, seed=3)
        manifest = generate_synthetic(spec, tmp_path)
        positive = manifest['cases'][0]
        central = set(central_slices(40, spec.central_fraction).tolist())
        case_dir = tmp_path / 'covid' / positive['case_id']
        for k in range(40):
            with Image.open(case_dir / f"{k:03d}.png") as img:
                pixels = np.asarray(img)
            values = [int(pixels[by, bx]) for by, bx in positive['blobs']]
            if k in central:
                assert min(values) >= 160
            else:
                assert max(values) <= 145

    def test_central_brightness_separates_classes(self, tmp_path):
        spec = SyntheticSpec(cases_per_class=5, slices_min=20, slices_max=40, seed=8)
        generate_synthetic(spec, tmp_path)
        means = {'positive': [], 'negative': []}
        for case in load_dataset(tmp_path):
            middle = case.slice_paths[(case.slice_count - 1) // 2]
            with Image.open(middle) as img:
                means[case.label].append(np.asarray(img, dtype=np.float64).mean())
        assert min(means['positive']) > max(means['negative'])
