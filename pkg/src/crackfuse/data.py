"""Synthetic RGB-thermal crack pairs, dataset directory I/O, augmentation.

Synthetic samples model the asymmetry that motivates the fusion design:
the RGB view shows cracks as dark curves on textured gray ground cluttered
with shadow bands and watermark blobs, while the thermal view shows the
crack signature cleanly (blurred, over a smooth ambient gradient) with no
visual distractors.

On-disk layout: root/rgb/<stem>.png (8-bit RGB), root/thermal/<stem>.png
and root/mask/<stem>.png (8-bit grayscale; masks use 0 or 255), plus
root/split.txt with lines "<stem> train|test".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DomainError
from .tensor import Tensor, no_grad

RANGE_TOL = 1e-6


@dataclass
class SamplePair:
    rgb: Tensor
    thermal: Tensor
    mask: Tensor
    id: str

    def validate(self) -> "SamplePair":
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DomainError(f"{self.id}: rgb must be (3,H,W), got {self.rgb.shape}")
        if self.thermal.shape != (1,) + self.rgb.shape[1:]:
            raise DomainError(f"{self.id}: thermal shape {self.thermal.shape} "
                              f"does not match rgb {self.rgb.shape}")
        if self.mask.shape != self.thermal.shape:
            raise DomainError(f"{self.id}: mask shape {self.mask.shape} "
                              f"does not match thermal {self.thermal.shape}")
        for name, t in (("rgb", self.rgb), ("thermal", self.thermal)):
            if t.data.min() < -RANGE_TOL or t.data.max() > 1.0 + RANGE_TOL:
                raise DomainError(f"{self.id}: {name} values outside [0,1]")
        md = self.mask.data
        if not np.all((md == 0.0) | (md == 1.0)):
            raise DomainError(f"{self.id}: mask must be strictly binary")
        return self

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


@dataclass
class SynthParams:
    size: int = 64
    crack_count: tuple[int, int] = (1, 2)
    angle_jitter: float = 0.25
    width_range: tuple[float, float] = (1.0, 2.2)
    branch_prob: float = 0.3
    texture_amp: float = 0.06
    crack_darkness: float = 0.55
    thermal_contrast: float = 0.45
    thermal_blur: float = 1.2
    noise_rgb: float = 0.02
    noise_thermal: float = 0.03
    shadows: bool = True
    watermarks: bool = True

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError("image size must be at least 32")
        if self.width_range[0] < 1.0 or self.width_range[1] < self.width_range[0]:
            raise ConfigError("width range must be ordered and at least 1 pixel")
        if self.crack_count[0] < 0 or self.crack_count[1] < self.crack_count[0]:
            raise ConfigError("crack count range must be ordered and non-negative")


def _gauss_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if sigma <= 0:
        return img
    r = max(1, int(round(3 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = np.pad(img, ((r, r), (0, 0)), mode="reflect")
    out = np.apply_along_axis(np.convolve, 0, out, k, "valid")
    out = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    out = np.apply_along_axis(np.convolve, 1, out, k, "valid")
    return out


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Zero-mean unit-spread smooth random field."""
    field = _gauss_blur(rng.normal(size=(size, size)), sigma)
    spread = max(field.std(), 1e-9)
    return (field - field.mean()) / spread


def _stamp_walk(mask: np.ndarray, rng: np.random.Generator, size: int,
                angle_jitter: float, width: float, start=None, theta=None,
                steps=None, branch_prob: float = 0.0):
    """Correlated random walk dilated to the given width by disk stamps."""
    yy, xx = np.mgrid[0:size, 0:size]
    if start is None:
        start = rng.uniform(size * 0.15, size * 0.85, size=2)
    if theta is None:
        # aim at an interior point so the walk mostly stays in frame
        target = rng.uniform(size * 0.2, size * 0.8, size=2)
        theta = np.arctan2(target[0] - start[0], target[1] - start[1])
    if steps is None:
        steps = int(size * 1.05)
    radius = width / 2.0
    y, x = start
    for step in range(steps):
        if 0 <= y < size and 0 <= x < size:
            patch = (yy - y) ** 2 + (xx - x) ** 2 <= radius ** 2
            mask[patch] = 1.0
        theta += rng.normal(0.0, angle_jitter)
        y += np.sin(theta)
        x += np.cos(theta)
        if branch_prob and step == steps // 2 and rng.random() < branch_prob:
            _stamp_walk(mask, rng, size, angle_jitter, width,
                        start=(y, x), theta=theta + rng.uniform(0.6, 1.2),
                        steps=steps // 2)


def synth_generate(seed, params: SynthParams | None = None,
                   sample_id: str | None = None) -> SamplePair:
    """One synthetic pair, fully determined by the seed.

    The seed may be an int or a sequence (corpus seed, sample index)."""
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    size = p.size
    if sample_id is None:
        sample_id = f"synth_{seed}" if np.isscalar(seed) else \
            "synth_" + "_".join(str(s) for s in seed)

    mask = np.zeros((size, size), dtype=np.float64)
    n_cracks = int(rng.integers(p.crack_count[0], p.crack_count[1] + 1))
    for _ in range(n_cracks):
        width = rng.uniform(*p.width_range)
        _stamp_walk(mask, rng, size, p.angle_jitter, width,
                    branch_prob=p.branch_prob)

    # visible image: textured gray ground, darkened cracks, clutter
    base_gray = rng.uniform(0.45, 0.62)
    texture = _smooth_field(rng, size, 1.5) * p.texture_amp
    tint = rng.uniform(-0.02, 0.02, size=3)
    rgb = np.stack([base_gray + texture + t for t in tint])
    crack_soft = _gauss_blur(mask, 0.6)
    rgb *= 1.0 - p.crack_darkness * crack_soft[None]
    # distractor randomness is always drawn so the toggles change only the
    # visible image, never the downstream noise streams
    shadow_roll = rng.random()
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    axis = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)
    center = rng.uniform(-size / 4, size / 4)
    half_width = rng.uniform(size * 0.06, size * 0.18)
    shade = rng.uniform(0.55, 0.8)
    if p.shadows and shadow_roll < 0.7:
        band = np.abs(axis - center) <= half_width
        rgb *= np.where(band, shade, 1.0)[None]
    blob_roll = rng.random()
    n_blobs = int(rng.integers(1, 3))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        sig = rng.uniform(size * 0.05, size * 0.15)
        depth = rng.uniform(0.1, 0.25)
        if p.watermarks and blob_roll < 0.6:
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
            rgb *= 1.0 - depth * blob[None]
    rgb += rng.normal(0.0, p.noise_rgb, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    # thermal image: clean crack signature over a smooth ambient gradient
    ambient = rng.uniform(0.3, 0.45)
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    gradient = ambient + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
    thermal = gradient + p.thermal_contrast * _gauss_blur(mask, p.thermal_blur)
    thermal += rng.normal(0.0, p.noise_thermal, size=thermal.shape)
    thermal = np.clip(thermal, 0.0, 1.0)

    return SamplePair(
        rgb=Tensor(rgb.astype(np.float32)),
        thermal=Tensor(thermal[None].astype(np.float32)),
        mask=Tensor(mask[None].astype(np.float32)),
        id=sample_id,
    ).validate()


# ------------------------------------------------------------------- disk

def _to_u8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)


def write_dataset(root: str | Path, pairs: list[SamplePair],
                  split: dict[str, str] | None = None):
    root = Path(root)
    for sub in ("rgb", "thermal", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        rgb = _to_u8(pair.rgb.data).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(root / "rgb" / f"{pair.id}.png")
        Image.fromarray(_to_u8(pair.thermal.data[0]), mode="L").save(
            root / "thermal" / f"{pair.id}.png")
        Image.fromarray((pair.mask.data[0] > 0.5).astype(np.uint8) * 255,
                        mode="L").save(root / "mask" / f"{pair.id}.png")
    if split is not None:
        lines = [f"{stem} {tag}" for stem, tag in split.items()]
        (root / "split.txt").write_text("\n".join(lines) + "\n")


def _stems(directory: Path) -> set[str]:
    return {p.stem for p in directory.glob("*.png")} \
        | {p.stem for p in directory.glob("*.pgm")}


def _find_image(directory: Path, stem: str) -> Path:
    for ext in (".png", ".pgm"):
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise DataError(f"no image for stem {stem!r} in {directory}")


def load_dataset(root: str | Path) -> list[SamplePair]:
    """All pairs under root, in lexicographic stem order."""
    root = Path(root)
    dirs = {sub: root / sub for sub in ("rgb", "thermal", "mask")}
    missing_dirs = [str(d) for d in dirs.values() if not d.is_dir()]
    if missing_dirs:
        raise DataError(f"dataset root {root} is missing subdirectories: "
                        + ", ".join(missing_dirs))
    stems = {sub: _stems(d) for sub, d in dirs.items()}
    all_stems = sorted(set().union(*stems.values()))
    problems = []
    for stem in all_stems:
        absent = [sub for sub in dirs if stem not in stems[sub]]
        if absent:
            problems.append(f"{stem} (missing in {', '.join(absent)})")
    if problems:
        raise DataError("unmatched dataset stems: " + "; ".join(problems))

    pairs = []
    for stem in all_stems:
        with Image.open(_find_image(dirs["rgb"], stem)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(_find_image(dirs["thermal"], stem)) as im:
            thermal = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        with Image.open(_find_image(dirs["mask"], stem)) as im:
            mask = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        pairs.append(SamplePair(
            rgb=Tensor(rgb.transpose(2, 0, 1).copy()),
            thermal=Tensor(thermal[None]),
            mask=Tensor((mask[None] > 0.5).astype(np.float32)),
            id=stem,
        ).validate())
    return pairs


def load_split(root: str | Path) -> dict[str, str]:
    path = Path(root) / "split.txt"
    if not path.exists():
        raise DataError(f"missing split manifest {path}")
    split = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: expected '<stem> train|test', "
                            f"got {line!r}")
        split[parts[0]] = parts[1]
    return split


# ----------------------------------------------------------- augmentation

def flip_sample(sample: SamplePair, axis: int) -> SamplePair:
    """Flip all three tensors along a spatial axis (1 = vertical flip,
    2 = horizontal flip)."""
    if axis not in (1, 2):
        raise ConfigError("flip axis must be 1 (rows) or 2 (columns)")

    def f(t: Tensor) -> Tensor:
        return Tensor(np.flip(t.data, axis=axis).copy())

    return SamplePair(rgb=f(sample.rgb), thermal=f(sample.thermal),
                      mask=f(sample.mask), id=sample.id)


def augment(sample: SamplePair, seed, train_size: int | None = None) -> SamplePair:
    """Random flips on all tensors, photometric jitter on RGB only, then an
    optional resize. Thermal is a physical measurement and keeps its values."""
    rng = np.random.default_rng(seed)
    out = sample
    if rng.random() < 0.5:
        out = flip_sample(out, axis=2)
    if rng.random() < 0.5:
        out = flip_sample(out, axis=1)
    brightness = rng.uniform(-0.1, 0.1)
    contrast = rng.uniform(0.8, 1.2)
    rgb = (out.rgb.data - 0.5) * contrast + 0.5 + brightness
    out = SamplePair(rgb=Tensor(np.clip(rgb, 0.0, 1.0)), thermal=out.thermal,
                     mask=out.mask, id=out.id)
    if train_size is not None:
        out = resize_sample(out, train_size)
    return out


# ------------------------------------------------------------ preprocessing

def _nearest_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = data.shape
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(int)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(int)
    return data[:, ys][:, :, xs]


def resize_sample(sample: SamplePair, size: int) -> SamplePair:
    """Bilinear resize for rgb/thermal, nearest for the mask (stays binary)."""
    if sample.size == (size, size):
        return sample
    with no_grad():
        rgb = sample.rgb.resize_bilinear(size, size)
        thermal = sample.thermal.resize_bilinear(size, size)
    mask = Tensor(_nearest_resize(sample.mask.data, size, size))
    return SamplePair(rgb=rgb, thermal=thermal, mask=mask, id=sample.id)


@dataclass
class NormStats:
    """Per-channel standardization statistics: 3 RGB channels + thermal."""
    mean: np.ndarray
    std: np.ndarray

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.mean.astype(np.float32),
                "norm.std": self.std.astype(np.float32)}

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "NormStats":
        if "norm.mean" not in arrays or "norm.std" not in arrays:
            raise DataError("normalization statistics missing from checkpoint")
        return NormStats(mean=np.asarray(arrays["norm.mean"], dtype=np.float32),
                         std=np.asarray(arrays["norm.std"], dtype=np.float32))


def fit_norm_stats(pairs: list[SamplePair], size: int) -> NormStats:
    """Dataset-level channel statistics measured after resizing to the
    training resolution."""
    if not pairs:
        raise DataError("cannot fit normalization statistics on an empty corpus")
    total = np.zeros(4)
    total_sq = np.zeros(4)
    count = 0
    for pair in pairs:
        resized = resize_sample(pair, size)
        stacked = np.concatenate([resized.rgb.data, resized.thermal.data])
        total += stacked.sum(axis=(1, 2))
        total_sq += (stacked.astype(np.float64) ** 2).sum(axis=(1, 2))
        count += size * size
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    # float32 so stats survive a checkpoint round trip bit-for-bit
    return NormStats(mean=mean.astype(np.float32),
                     std=np.maximum(np.sqrt(var), 1e-6).astype(np.float32))


def preprocess(sample: SamplePair, eval_size: int,
               stats: NormStats | None = None) -> SamplePair:
    """Resize to the evaluation size and standardize rgb/thermal channels.

    The returned pair carries standardized (not [0,1]) image values; the
    mask stays binary."""
    if eval_size < 32:
        raise ConfigError("eval_size must be at least 32")
    out = resize_sample(sample, eval_size)
    if stats is not None:
        rgb = (out.rgb.data - stats.mean[:3, None, None]) \
            / stats.std[:3, None, None]
        thermal = (out.thermal.data - stats.mean[3:, None, None]) \
            / stats.std[3:, None, None]
        out = SamplePair(rgb=Tensor(rgb.astype(np.float32)),
                         thermal=Tensor(thermal.astype(np.float32)),
                         mask=out.mask, id=out.id)
    return out
