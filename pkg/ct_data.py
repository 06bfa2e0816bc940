"""
CT scan ingestion and slice preprocessing

Input tree: root/{covid,non-covid}/<case_id>/<NNN>.png, one directory per
case, slices numbered in anatomical order.
"""
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

import pvt_config as config
from tensor import DTYPE, Tensor

# Directory name -> label
CLASS_DIRS = {
    'covid': 'positive',
    'non-covid': 'negative',
}
LABELS = ('positive', 'negative', 'unknown')
SLICE_SUFFIXES = ('.png',)
HISTOGRAM_BINS = 256
SLICE_CACHE_SIZE = 1024


class DatasetError(OSError):
    """Dataset root missing, unreadable or without any case"""


class SliceLoadError(OSError):
    """A slice image could not be read; message carries the case id"""


@dataclass(frozen=True)
class ScanCase:
    """One patient's CT scan"""
    case_id: str
    label: str
    slice_paths: Tuple[Path, ...]

    def __post_init__(self):
        if not self.slice_paths:
            raise ValueError(f"case {self.case_id} has no slices")
        if self.label not in LABELS:
            raise ValueError(f"case {self.case_id}: label must be one of {LABELS}, got {self.label!r}")

    @property
    def slice_count(self) -> int:
        return len(self.slice_paths)

    @property
    def target(self) -> Optional[float]:
        """Regression target: +1 positive, -1 negative, None unlabeled"""
        return {'positive': 1.0, 'negative': -1.0}.get(self.label)


@dataclass(frozen=True)
class PreprocessSpec:
    enhancement: str = 'histogram-equalization'
    resolution: int = 224
    channels: int = 3

    def __post_init__(self):
        if self.enhancement not in config.CHOICES['enhancement']:
            raise config.ConfigError(f"enhancement must be one of {config.CHOICES['enhancement']}")
        if self.resolution <= 0 or self.channels <= 0:
            raise config.ConfigError("resolution and channels must be positive")

    @classmethod
    def from_run_config(cls, run_config: config.RunConfig) -> "PreprocessSpec":
        return cls(enhancement=run_config['enhancement'],
                   resolution=run_config['input_resolution'],
                   channels=run_config['input_channels'])


@dataclass
class CaseDataset:
    """Loaded cases (ordered) plus the warnings raised while loading them"""
    root: Path
    cases: List[ScanCase]
    warnings: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.cases)

    def __iter__(self) -> Iterator[ScanCase]:
        return iter(self.cases)

    def __getitem__(self, index: int) -> ScanCase:
        return self.cases[index]

    def labels(self) -> List[str]:
        return [case.label for case in self.cases]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'case_id': c.case_id, 'label': c.label, 'slices': c.slice_count}
                             for c in self.cases])

    def summary(self) -> str:
        counts = pd.Series(self.labels(), dtype=object).value_counts()
        parts = [f"{counts.get(label, 0)} {label}" for label in ('positive', 'negative')]
        return f"{len(self.cases)} cases ({', '.join(parts)})"


def _warn(warnings: List[str], message: str):
    warnings.append(message)
    print(f"⚠ {message}", file=sys.stderr)


def _numbered_slices(case_dir: Path, warnings: List[str]) -> List[Path]:
    numbered = []
    for path in case_dir.iterdir():
        if not path.is_file() or path.suffix.lower() not in SLICE_SUFFIXES:
            continue
        if not path.stem.isdigit():
            _warn(warnings, f"{case_dir.name}: skipping non-numeric slice name {path.name}")
            continue
        numbered.append((int(path.stem), path))
    numbered.sort()
    return [path for _, path in numbered]


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def load_case(case_dir: Union[str, Path], label: str = 'unknown',
              warnings: Optional[List[str]] = None) -> Optional[ScanCase]:
    """
    Build a ScanCase from one directory of numbered slices

    Unreadable files are dropped with a warning; returns None when no slice
    is left.
    """
    case_dir = Path(case_dir)
    warnings = warnings if warnings is not None else []
    if not case_dir.is_dir():
        raise DatasetError(f"case directory not found: {case_dir}")
    paths = _numbered_slices(case_dir, warnings)
    if not paths:
        _warn(warnings, f"{case_dir.name}: empty case directory, skipped")
        return None

    numbers = [int(p.stem) for p in paths]
    if numbers[-1] - numbers[0] + 1 != len(numbers):
        _warn(warnings, f"{case_dir.name}: slice numbering {numbers[0]}..{numbers[-1]} "
                        f"does not match {len(numbers)} files")
    readable = [p for p in paths if _readable(p)]
    for path in sorted(set(paths) - set(readable)):
        _warn(warnings, f"{case_dir.name}: unreadable slice {path.name}, skipped")
    if not readable:
        _warn(warnings, f"{case_dir.name}: no readable slices, skipped")
        return None
    return ScanCase(case_id=case_dir.name, label=label, slice_paths=tuple(readable))


def load_dataset(root: Union[str, Path]) -> CaseDataset:
    """
    One ScanCase per case directory under root/covid and root/non-covid

    Cases are ordered by class (covid first) then by case id; slices by their
    numeric file name.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found or not a directory: {root}")
    try:
        next(root.iterdir(), None)
    except OSError as e:
        raise DatasetError(f"dataset root is not readable: {root} ({e})") from e

    warnings: List[str] = []
    cases = []
    found_class_dir = False
    for dirname, label in CLASS_DIRS.items():
        class_dir = root / dirname
        if not class_dir.is_dir():
            _warn(warnings, f"{root}: no {dirname}/ directory")
            continue
        found_class_dir = True
        for case_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            case = load_case(case_dir, label, warnings)
            if case is not None:
                cases.append(case)
    if not found_class_dir:
        raise DatasetError(f"{root} contains neither covid/ nor non-covid/")
    return CaseDataset(root=root, cases=cases, warnings=warnings)


# ---------------------------------------------------------------------------
# Slice preprocessing
# ---------------------------------------------------------------------------

def read_slice(path: Union[str, Path]) -> np.ndarray:
    """8/16-bit grayscale (or RGB, converted) image as a float64 array"""
    with Image.open(path) as img:
        if img.mode not in ('L', 'I', 'I;16', 'I;16B', 'I;16L', 'F'):
            img = img.convert('L')
        return np.asarray(img, dtype=np.float64)


def equalize_histogram(image: np.ndarray, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """
    Global histogram equalization into [0, 1]

    Intensities are binned over [min, max]; bin b maps to
    (cdf[b] - cdf_min) / (N - cdf_min). A constant image maps to 0.
    """
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.float64)
    index = np.floor((image - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(index, 0, bins - 1, out=index)
    hist = np.bincount(index.ravel(), minlength=bins)
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    mapping = (cdf - cdf_min) / float(cdf[-1] - cdf_min)
    return mapping[index]


def rescale_unit(image: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]; a constant image maps to 0"""
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.float64)
    return (image - lo) / (hi - lo)


def _sample_coords(n_in: int, n_out: int):
    # half-pixel centers (corner alignment off)
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    x0 = np.floor(x).astype(np.int64)
    x1 = np.minimum(x0 + 1, n_in - 1)
    return x0, x1, x - x0


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    y0, y1, ty = _sample_coords(image.shape[0], height)
    x0, x1, tx = _sample_coords(image.shape[1], width)
    top = image[y0][:, x0] * (1.0 - tx) + image[y0][:, x1] * tx
    bottom = image[y1][:, x0] * (1.0 - tx) + image[y1][:, x1] * tx
    return top * (1.0 - ty)[:, None] + bottom * ty[:, None]


def preprocess_image(image: np.ndarray, enhancement: str, resolution: int) -> np.ndarray:
    """Single-channel resolution x resolution float32 slice in [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {image.shape}")
    if enhancement == 'histogram-equalization':
        unit = equalize_histogram(image)
    else:
        unit = rescale_unit(image)
    resized = resize_bilinear(unit, resolution, resolution)
    return np.clip(resized, 0.0, 1.0).astype(DTYPE)


def preprocess_slice(image: np.ndarray, spec: PreprocessSpec) -> Tensor:
    """
    Optional equalization, bilinear resize, [0, 1] scaling, channel replication
    -> Tensor [channels, resolution, resolution]
    """
    plane = preprocess_image(image, spec.enhancement, spec.resolution)
    return Tensor(np.broadcast_to(plane, (spec.channels,) + plane.shape))


@lru_cache(maxsize=SLICE_CACHE_SIZE)
def _cached_plane(path: str, enhancement: str, resolution: int) -> np.ndarray:
    plane = preprocess_image(read_slice(path), enhancement, resolution)
    plane.flags.writeable = False
    return plane


def clear_slice_cache():
    _cached_plane.cache_clear()


def load_slices(case: ScanCase, indices: Sequence[int], spec: PreprocessSpec) -> np.ndarray:
    """
    Preprocessed batch N x channels x resolution x resolution for the given
    slice indices of one case
    """
    planes = []
    for index in indices:
        path = case.slice_paths[int(index)]
        try:
            planes.append(_cached_plane(str(path), spec.enhancement, spec.resolution))
        except (OSError, UnidentifiedImageError, ValueError) as e:
            raise SliceLoadError(f"case {case.case_id}: cannot load slice {path.name}: {e}") from e
    batch = np.stack(planes)[:, None, :, :]
    return np.ascontiguousarray(np.broadcast_to(batch, (len(planes), spec.channels) + batch.shape[2:]))
