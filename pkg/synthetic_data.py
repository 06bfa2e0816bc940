"""
Synthetic CT-like dataset generator

Writes root/{covid,non-covid}/<case_id>/<NNN>.png plus manifest.json.
Every slice shows a bright body ellipse with two darker lung ellipses whose
size follows the slice's position in the scan; positive cases add bright
lesion disks inside the lungs, on the central slices only.
"""
import hashlib
import json
import shutil
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image

import pvt_config as config

MANIFEST_NAME = 'manifest.json'

BACKGROUND = 0.05
BODY_LEVEL = 0.55
LUNG_LEVEL = 0.20
EDGE_WIDTH = 0.08          # soft edge, in normalized ellipse radius
CASE_JITTER = 0.05         # per-case lung size variation


@dataclass(frozen=True)
class SyntheticSpec:
    cases_per_class: int = 30
    slices_min: int = 50
    slices_max: int = 700
    image_size: int = 64
    blob_count: int = 3
    blob_radius: int = 6
    blob_intensity: float = 0.45
    noise: float = 0.03
    central_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.cases_per_class < 0:
            raise config.ConfigError("cases_per_class must be non-negative")
        if not 1 <= self.slices_min <= self.slices_max:
            raise config.ConfigError(
                f"slice range must satisfy 1 <= min <= max, got [{self.slices_min}, {self.slices_max}]")
        if self.image_size < 8:
            raise config.ConfigError(f"image_size must be at least 8, got {self.image_size}")
        if self.blob_count < 0 or self.blob_radius < 1:
            raise config.ConfigError("blob_count must be >= 0 and blob_radius >= 1")
        if self.blob_intensity < 0 or self.noise < 0:
            raise config.ConfigError("blob_intensity and noise must be non-negative")
        if not 0.0 < self.central_fraction <= 1.0:
            raise config.ConfigError("central_fraction must be in (0, 1]")

    @classmethod
    def from_run_config(cls, run_config: config.RunConfig, cases_per_class: int = None,
                        seed: int = None) -> "SyntheticSpec":
        return cls(
            cases_per_class=run_config['synth_cases_per_class'] if cases_per_class is None else cases_per_class,
            slices_min=run_config['synth_slices_min'],
            slices_max=run_config['synth_slices_max'],
            image_size=run_config['synth_image_size'],
            blob_count=run_config['synth_blob_count'],
            blob_radius=run_config['synth_blob_radius'],
            blob_intensity=run_config['synth_blob_intensity'],
            noise=run_config['synth_noise'],
            central_fraction=run_config['synth_central_fraction'],
            seed=run_config['seed'] if seed is None else seed,
        )


def central_slices(slice_count: int, central_fraction: float) -> np.ndarray:
    """Indices within central_fraction * L / 2 of the middle slice"""
    k = np.arange(slice_count)
    return k[np.abs(k - (slice_count - 1) / 2.0) <= central_fraction * slice_count / 2.0]


def _soft_ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - r) / EDGE_WIDTH, 0.0, 1.0)


@dataclass(frozen=True)
class _Anatomy:
    """Per-case geometry: lung centres/radii (fractions of the side) and lesion disks"""
    lungs: Tuple[Tuple[float, float, float, float], ...]
    blobs: Tuple[Tuple[int, int], ...]


def _case_anatomy(rng: np.random.Generator, spec: SyntheticSpec, positive: bool) -> _Anatomy:
    size = spec.image_size
    jitter = 1.0 + rng.uniform(-CASE_JITTER, CASE_JITTER, size=2)
    lungs = (
        (0.5, 0.32, 0.30 * jitter[0], 0.14 * jitter[0]),
        (0.5, 0.68, 0.30 * jitter[1], 0.14 * jitter[1]),
    )
    blobs = []
    if positive:
        for i in range(spec.blob_count):
            cy, cx, ry, rx = lungs[i % 2]
            # inside half the lung radii, so the disk centre is in the lung on every central slice
            angle = rng.uniform(0.0, 2.0 * np.pi)
            radius = np.sqrt(rng.uniform(0.0, 1.0)) * 0.5
            blobs.append((int(round((cy + radius * ry * np.sin(angle)) * size)),
                          int(round((cx + radius * rx * np.cos(angle)) * size))))
    return _Anatomy(lungs=lungs, blobs=tuple(blobs))


def render_slice(rng: np.random.Generator, spec: SyntheticSpec, anatomy: _Anatomy,
                 index: int, slice_count: int, with_lesions: bool) -> np.ndarray:
    """One slice as floats in [0, 1]"""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    z = 0.0 if slice_count == 1 else 2.0 * index / (slice_count - 1) - 1.0
    extent = 0.5 + 0.5 * np.sqrt(max(0.0, 1.0 - z * z))

    image = np.full((size, size), BACKGROUND)
    body = _soft_ellipse(yy, xx, 0.5 * size, 0.5 * size, 0.42 * size, 0.46 * size)
    image += (BODY_LEVEL - BACKGROUND) * body
    for cy, cx, ry, rx in anatomy.lungs:
        lung = _soft_ellipse(yy, xx, cy * size, cx * size, ry * size * extent, rx * size * extent)
        image -= (BODY_LEVEL - LUNG_LEVEL) * lung

    if with_lesions:
        for by, bx in anatomy.blobs:
            disk = (yy - by) ** 2 + (xx - bx) ** 2 <= spec.blob_radius ** 2
            image[disk] += spec.blob_intensity

    if spec.noise:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(image * 255.0).astype(np.uint8)


def _prepare_root(out_dir: Path):
    class_dirs = [out_dir / name for name in ('covid', 'non-covid')]
    if any(d.exists() for d in class_dirs):
        if not (out_dir / MANIFEST_NAME).is_file():
            raise FileExistsError(f"{out_dir} already holds a dataset not written by the generator")
        for d in class_dirs:
            if d.exists():
                shutil.rmtree(d)
        (out_dir / MANIFEST_NAME).unlink()
    out_dir.mkdir(parents=True, exist_ok=True)


def generate_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> Dict:
    """
    Write spec.cases_per_class positive and negative cases under out_dir

    Output depends only on spec (seed included). Returns the manifest that is
    also written to out_dir/manifest.json.
    """
    out_dir = Path(out_dir)
    _prepare_root(out_dir)

    total = 2 * spec.cases_per_class
    case_seeds = np.random.SeedSequence(spec.seed).spawn(total)
    cases: List[Dict] = []
    for index in range(total):
        positive = index < spec.cases_per_class
        rng = np.random.default_rng(case_seeds[index])
        slice_count = int(rng.integers(spec.slices_min, spec.slices_max + 1))
        anatomy = _case_anatomy(rng, spec, positive)
        lesion_slices = set(central_slices(slice_count, spec.central_fraction).tolist()) if positive else set()

        case_id = f"case_{index:04d}"
        case_dir = out_dir / ('covid' if positive else 'non-covid') / case_id
        case_dir.mkdir(parents=True)
        width = max(3, len(str(slice_count - 1)))
        for k in range(slice_count):
            image = render_slice(rng, spec, anatomy, k, slice_count, k in lesion_slices)
            Image.fromarray(_to_uint8(image)).save(case_dir / f"{k:0{width}d}.png")

        cases.append({
            'case_id': case_id,
            'label': 'positive' if positive else 'negative',
            'slices': slice_count,
            'blobs': [list(b) for b in anatomy.blobs],
        })
        print(f"  ✓ {case_id} ({cases[-1]['label']}, {slice_count} slices)", file=sys.stderr)

    manifest = {'spec': asdict(spec), 'seed': spec.seed, 'cases': cases}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    return manifest


def manifest_summary(manifest: Dict, out_dir: Union[str, Path]) -> Dict:
    """Machine-readable summary printed by gen-synth"""
    cases = manifest['cases']
    digest = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode('utf-8')).hexdigest()
    return {
        'out': str(out_dir),
        'seed': manifest['seed'],
        'cases': len(cases),
        'positive': sum(1 for c in cases if c['label'] == 'positive'),
        'negative': sum(1 for c in cases if c['label'] == 'negative'),
        'slices': sum(c['slices'] for c in cases),
        'manifest_sha256': digest,
    }
