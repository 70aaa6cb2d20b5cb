"""Multispectral images, the MSI1 file format, and synthetic RGB-ambiguous datasets."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from deflect.vit import ConfigError

MSI_MAGIC = b"MSI1"

# Blue, Green, Red, NIR, SWIR1, SWIR2: the six bands of HLS-style products
DEFAULT_BANDS = ("B", "G", "R", "NIR", "SWIR1", "SWIR2")
SENTINEL2_BANDS = ("B1", "B", "G", "R", "B5", "B6", "B7", "NIR", "B8A", "B9", "B10", "SWIR1", "SWIR2")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class MultispectralImage:
    data: np.ndarray  # (C, H, W) reflectances
    band_map: dict[str, int]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ConfigError(f"image must be C x H x W, got shape {self.data.shape}")
        idx = list(self.band_map.values())
        if len(set(idx)) != len(idx):
            raise ConfigError("band map is not injective")
        if any(not 0 <= i < self.data.shape[0] for i in idx):
            raise ConfigError(f"band map {self.band_map} references channels outside 0..{self.data.shape[0] - 1}")
        if not np.isfinite(self.data).all():
            raise ConfigError("reflectances must be finite")

    @property
    def shape(self):
        return self.data.shape

    def band(self, name: str) -> np.ndarray:
        if name not in self.band_map:
            raise ConfigError(f"band {name!r} not in band map {sorted(self.band_map)}")
        return self.data[self.band_map[name]]


def band_map_for(names: Sequence[str]) -> dict[str, int]:
    return {n: i for i, n in enumerate(names)}


# -- MSI1 ----------------------------------------------------------------------

def encode_msi(img: MultispectralImage) -> bytes:
    c, h, w = img.shape
    names = {i: n for n, i in img.band_map.items()}
    parts = [MSI_MAGIC, struct.pack("<III", c, h, w)]
    for i in range(c):
        raw = names.get(i, "").encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_msi(buf: bytes) -> MultispectralImage:
    if len(buf) < 4:
        raise FormatError(f"truncated header: expected 4 magic bytes, got {len(buf)}", len(buf))
    magic = buf[:4]
    if magic != MSI_MAGIC:
        if magic[:3] == b"MSI":
            raise FormatError(f"unknown MSI version {magic[3:4]!r}", 3)
        raise FormatError(f"bad magic {magic!r}", 0)
    off = 4
    if len(buf) < off + 12:
        raise FormatError(f"truncated header: expected {off + 12} bytes, got {len(buf)}", len(buf))
    c, h, w = struct.unpack_from("<III", buf, off)
    off += 12
    band_map = {}
    for i in range(c):
        if len(buf) < off + 2:
            raise FormatError(f"truncated band table: expected {off + 2} bytes, got {len(buf)}", len(buf))
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) < off + n:
            raise FormatError(f"truncated band name: expected {off + n} bytes, got {len(buf)}", len(buf))
        name = buf[off : off + n].decode("utf-8")
        off += n
        if name:
            if name in band_map:
                raise FormatError(f"duplicate band name {name!r}", off - n)
            band_map[name] = i
    expected = off + 4 * c * h * w
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    return MultispectralImage(data.astype(np.float32), band_map)


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_msi(path, img: MultispectralImage) -> None:
    atomic_write(path, encode_msi(img))


def read_msi(path) -> MultispectralImage:
    return decode_msi(Path(path).read_bytes())


# -- synthetic task ------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Classes share RGB spectra inside ``ambiguous`` and differ only beyond RGB.

    Pixels are ``gain * brightness * class_spectrum + noise`` where brightness is a
    smooth random field and gain a per-image illumination factor, so neither texture
    nor overall level carries class information.
    """

    num_classes: int = 4
    ambiguous: tuple[int, ...] = (0, 1)
    bands: tuple[str, ...] = DEFAULT_BANDS
    image_size: int = 32
    task: str = "classification"
    noise: float = 0.02
    brightness_range: tuple[float, float] = (0.7, 1.3)
    illumination_range: tuple[float, float] = (0.5, 1.5)
    smoothness: float = 4.0
    blob_count: int = 4
    spectral_separation: float = 0.2
    spectral_jitter: float = 0.05
    class_purity: float = 0.75
    n_train: int = 256
    n_val: int = 64
    n_test: int = 128

    def __post_init__(self):
        self.ambiguous = tuple(self.ambiguous)
        self.bands = tuple(self.bands)
        self.brightness_range = tuple(self.brightness_range)
        self.illumination_range = tuple(self.illumination_range)
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.num_classes < 2:
            errors.append(f"need at least two classes, got {self.num_classes}")
        if len(self.ambiguous) < 2 or any(not 0 <= a < self.num_classes for a in self.ambiguous):
            errors.append("ambiguous must name at least two valid classes")
        if not {"R", "G", "B"} <= set(self.bands) or len(self.bands) < 4:
            errors.append("bands must contain R, G, B and at least one more band")
        if self.task not in ("classification", "segmentation"):
            errors.append(f"unknown task {self.task!r}")
        if self.noise < 0:
            errors.append("noise must be >= 0")
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            errors.append("brightness_range must satisfy 0 < lo <= hi")
        lo, hi = self.illumination_range
        if not 0 < lo <= hi:
            errors.append("illumination_range must satisfy 0 < lo <= hi")
        if self.spectral_jitter < 0:
            errors.append("spectral_jitter must be >= 0")
        if not 0 < self.class_purity <= 1:
            errors.append("class_purity must be in (0, 1]")
        if self.class_purity < 1 and len(self.ambiguous) == self.num_classes:
            errors.append("class_purity < 1 needs at least one non-ambiguous class for distractors")
        if min(self.n_train, self.n_val, self.n_test) < self.num_classes:
            errors.append("every split needs at least one sample per class")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def band_map(self) -> dict[str, int]:
        return band_map_for(self.bands)


def class_spectra(spec: SyntheticTaskSpec, seed: int) -> np.ndarray:
    """(K, C) mean reflectance per class; RGB rows identical across the ambiguous classes."""
    rng = np.random.default_rng([seed, 7])
    k, c = spec.num_classes, len(spec.bands)
    rgb = [spec.bands.index(b) for b in ("R", "G", "B")]
    other = [i for i in range(c) if i not in rgb]
    spectra = np.empty((k, c))
    # RGB: ambiguous classes share one spectrum, the rest are spread apart
    shared = rng.uniform(0.2, 0.35, size=3)
    distinct = [cls for cls in range(k) if cls not in spec.ambiguous]
    for cls in range(k):
        spectra[cls, rgb] = shared
    for j, cls in enumerate(distinct):
        spectra[cls, rgb] = shared + (0.12 + 0.08 * j) * np.where(np.arange(3) == j % 3, 1.0, -0.4)
    # beyond RGB: evenly spaced signatures, shuffled per band so they stay separable jointly
    levels = 0.35 + spec.spectral_separation * np.linspace(-1, 1, k)
    for b in other:
        spectra[:, b] = rng.permutation(levels) if b != other[0] else levels
    return np.clip(spectra, 0.02, 0.98)


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _render(rng, spec: SyntheticTaskSpec, spectra: np.ndarray, label_map: np.ndarray) -> np.ndarray:
    if spec.spectral_jitter > 0:
        rgb = [spec.bands.index(b) for b in ("R", "G", "B")]
        gain = np.exp(rng.normal(0.0, spec.spectral_jitter, size=spectra.shape))
        gain[:, rgb] = 1.0
        spectra = spectra * gain
    lo, hi = spec.brightness_range
    bright = lo + (hi - lo) * (0.5 + 0.5 * np.tanh(_smooth_field(rng, spec.image_size, spec.smoothness)))
    bright = bright * rng.uniform(*spec.illumination_range)
    img = bright[None] * spectra[label_map].transpose(2, 0, 1)
    img = img + rng.normal(0.0, spec.noise, size=img.shape) if spec.noise > 0 else img
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _segmentation_map(rng, spec: SyntheticTaskSpec, first: int) -> np.ndarray:
    """Smooth random blobs; class ids cycle from ``first`` so frequencies stay balanced."""
    fields = np.stack([_smooth_field(rng, spec.image_size, spec.smoothness) for _ in range(spec.blob_count)])
    blob = fields.argmax(0)
    return ((blob + first) % spec.num_classes).astype(np.int64)


def _classification_map(rng, spec: SyntheticTaskSpec, cls: int) -> np.ndarray:
    """Target class everywhere except distractor blobs drawn from the non-ambiguous classes."""
    lab = np.full((spec.image_size, spec.image_size), cls, dtype=np.int64)
    if spec.class_purity >= 1:
        return lab
    fields = np.stack([_smooth_field(rng, spec.image_size, spec.smoothness) for _ in range(spec.blob_count)])
    blob = fields.argmax(0)
    n_keep = max(1, round(spec.class_purity * spec.blob_count))
    pool = [c for c in range(spec.num_classes) if c not in spec.ambiguous and c != cls]
    for b in range(n_keep, spec.blob_count):
        if pool:
            lab[blob == b] = pool[rng.integers(len(pool))]
    return lab


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) or (N, H, W)
    ids: list[str]
    band_map: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def image(self, i: int) -> MultispectralImage:
        return MultispectralImage(self.images[i], self.band_map)


def generate_dataset(spec: SyntheticTaskSpec, seed: int = 0) -> dict[str, Split]:
    if isinstance(spec, Mapping):
        spec = SyntheticTaskSpec(**spec)
    spectra = class_spectra(spec, seed)
    splits = {}
    for s_idx, (name, count) in enumerate((("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))):
        rng = np.random.default_rng([seed, s_idx])
        images, labels = [], []
        # round-robin labels keep per-split class frequencies equal up to one sample
        order = rng.permutation(np.arange(count) % spec.num_classes)
        for i in range(count):
            cls = int(order[i])
            if spec.task == "classification":
                lab = _classification_map(rng, spec, cls)
                labels.append(cls)
            else:
                lab = _segmentation_map(rng, spec, cls)
                labels.append(lab)
            images.append(_render(rng, spec, spectra, lab))
        splits[name] = Split(
            images=np.stack(images),
            labels=np.asarray(labels, dtype=np.int64),
            ids=[f"{name}-{i:05d}" for i in range(count)],
            band_map=spec.band_map,
        )
    return splits


# -- on-disk dataset -----------------------------------------------------------------

def write_dataset(splits: Mapping[str, Split], out_dir) -> None:
    """<out>/<split>/<id>.msi plus <out>/<split>/manifest.txt lines ``<file>\t<label>``.

    Segmentation labels are stored as one-band MSI masks named ``label``.
    """
    out = Path(out_dir)
    for name, split in splits.items():
        lines = []
        for i, img_id in enumerate(split.ids):
            fname = f"{img_id}.msi"
            write_msi(out / name / fname, split.image(i))
            if split.labels.ndim == 1:
                label = str(int(split.labels[i]))
            else:
                label = f"{img_id}.mask.msi"
                write_msi(out / name / label, MultispectralImage(split.labels[i][None].astype(np.float32), {"label": 0}))
            lines.append(f"{fname}\t{label}")
        atomic_write(out / name / "manifest.txt", ("\n".join(lines) + "\n").encode())


def read_dataset(root) -> dict[str, Split]:
    root = Path(root)
    splits = {}
    for name in ("train", "val", "test"):
        manifest = root / name / "manifest.txt"
        if not manifest.exists():
            continue
        images, labels, ids, band_map = [], [], [], None
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            fname, label = line.split("\t")
            img = read_msi(root / name / fname)
            band_map = band_map or img.band_map
            images.append(img.data)
            ids.append(fname.rsplit(".msi", 1)[0])
            if label.endswith(".msi"):
                labels.append(read_msi(root / name / label).data[0].astype(np.int64))
            else:
                labels.append(int(label))
        splits[name] = Split(np.stack(images), np.asarray(labels, dtype=np.int64), ids, band_map)
    if not splits:
        raise FileNotFoundError(f"no split manifests under {root}")
    return splits
