"""Synthetic paired scenes: a thermal field whose fine structure follows
land-cover boundaries, a co-registered multiband reflectance stack that is
informative about those boundaries, and a class map for per-group
reporting.

Scenes are deterministic functions of (config, seed); train and test
splits draw from disjoint seed ranges so leakage is impossible by
construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import degrade

CLASS_NAMES = ("forest", "low_vegetation", "water", "urban")

# Per-class 6-band mean reflectance (blue, green, red, nir, swir1, swir2)
# and mean temperature in synthetic degrees C. Spectra are pairwise well
# separated relative to the default reflectance noise.
DEFAULT_SPECTRA = np.array(
    [
        [0.04, 0.07, 0.05, 0.45, 0.20, 0.10],  # forest
        [0.08, 0.14, 0.16, 0.32, 0.30, 0.22],  # low vegetation
        [0.06, 0.09, 0.07, 0.04, 0.02, 0.01],  # water
        [0.18, 0.20, 0.22, 0.26, 0.28, 0.27],  # urban
    ]
)
DEFAULT_TEMPS = np.array([18.0, 24.0, 12.0, 30.0])

# Default reporting groups: urban folds into low vegetation.
DEFAULT_GROUPING = {
    "forest": "Forest",
    "low_vegetation": "Low Vegetation",
    "urban": "Low Vegetation",
    "water": "Water",
}


@dataclass(frozen=True)
class SceneConfig:
    size: int = 72
    bands: int = 6
    n_regions: int = 7
    spectra: np.ndarray = field(default_factory=lambda: DEFAULT_SPECTRA.copy())
    temps: np.ndarray = field(default_factory=lambda: DEFAULT_TEMPS.copy())
    boundary_warp: float = 6.0  # px amplitude of the domain warp on region edges
    reflectance_noise: float = 0.02
    reflectance_corr: float = 2.0  # blur sigma of band noise
    thermal_texture: float = 0.8  # degC, short-range correlated
    texture_corr: float = 1.5
    trend_amplitude: float = 1.5  # degC, smooth regional trend
    band_lo: float = 0.0
    band_hi: float = 1.0

    def __post_init__(self):
        spectra = np.asarray(self.spectra, dtype=np.float64)
        temps = np.asarray(self.temps, dtype=np.float64)
        if spectra.shape != (len(CLASS_NAMES), self.bands):
            raise ValueError(f"spectra must be {(len(CLASS_NAMES), self.bands)}, got {spectra.shape}")
        for i in range(len(temps)):
            for j in range(i + 1, len(temps)):
                if np.linalg.norm(spectra[i] - spectra[j]) <= 2.0 * self.reflectance_noise:
                    raise ValueError(f"class spectra {i} and {j} not separated from noise")
                if abs(temps[i] - temps[j]) <= 2.0 * self.thermal_texture:
                    raise ValueError(f"class temperatures {i} and {j} not separated from texture")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spectra"] = np.asarray(self.spectra).tolist()
        d["temps"] = np.asarray(self.temps).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["spectra"] = np.asarray(d["spectra"], dtype=np.float64)
        d["temps"] = np.asarray(d["temps"], dtype=np.float64)
        return cls(**d)


def _smooth_noise(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    out = ndimage.gaussian_filter(noise, sigma, mode="reflect")
    return out / max(out.std(), 1e-12)


def generate_scene(seed: int, config: SceneConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (Y, S, class_map): thermal field (H, W), reflectance stack
    (C, H, W), integer class map (H, W). Deterministic given seed."""
    rng = np.random.default_rng(seed)
    n = config.size

    # Warped Voronoi segmentation: nearest seed site under a smooth
    # coordinate perturbation gives organic region boundaries.
    sites = rng.uniform(0, n, size=(config.n_regions, 2))
    site_class = rng.integers(0, len(CLASS_NAMES), size=config.n_regions)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    wy = config.boundary_warp * _smooth_noise(rng, (n, n), sigma=n / 8)
    wx = config.boundary_warp * _smooth_noise(rng, (n, n), sigma=n / 8)
    d2 = (yy + wy - sites[:, None, None, 0]) ** 2 + (xx + wx - sites[:, None, None, 1]) ** 2
    class_map = site_class[np.argmin(d2, axis=0)]

    spectra = np.asarray(config.spectra, dtype=np.float64)
    S = spectra[class_map].transpose(2, 0, 1).copy()
    if config.reflectance_noise > 0:
        common = _smooth_noise(rng, (n, n), config.reflectance_corr)
        for b in range(config.bands):
            own = _smooth_noise(rng, (n, n), config.reflectance_corr)
            S[b] += config.reflectance_noise * (0.5 * common + 0.5 * own)
    S = np.clip(S, 0.0, 1.0)

    temps = np.asarray(config.temps, dtype=np.float64)
    Y = temps[class_map].astype(np.float64)
    if config.trend_amplitude > 0:
        Y += config.trend_amplitude * _smooth_noise(rng, (n, n), sigma=n / 2)
    if config.thermal_texture > 0:
        Y += config.thermal_texture * _smooth_noise(rng, (n, n), config.texture_corr)
    return Y, S.astype(np.float64), class_map.astype(np.int64)


def center_crop_offset(full: int, crop: int) -> int:
    if crop > full:
        raise ValueError(f"crop {crop} exceeds scene size {full}")
    return (full - crop) // 2


def crop(arrays, top: int, left: int, size: int):
    """Crop every array in a sequence at (top, left), last two axes."""
    return [a[..., top : top + size, left : left + size] for a in arrays]


def dihedral(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """One of the eight square symmetries: k quarter-turn rotations then an
    optional horizontal mirror, applied to the last two axes."""
    out = np.rot90(a, k, axes=(-2, -1))
    if flip:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


TRAIN_SEED_BASE = 1_000
TEST_SEED_BASE = 500_000


@dataclass
class DatasetManifest:
    scene_config: dict
    crop_size: int
    scale: int
    train: list
    test: list

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def build_dataset(out_dir: str | Path, n_train: int, n_test: int,
                  config: SceneConfig | None = None, crop_size: int = 64,
                  scale: int = 8) -> DatasetManifest:
    """Generate scenes to disk, fit the residual normalizer on the train
    split (center crops), and write the manifest. Train/test seed ranges
    are disjoint."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one scene per split")
    config = config or SceneConfig()
    if crop_size % scale:
        raise ValueError(f"crop size {crop_size} not divisible by scale {scale}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = {"train": [], "test": []}
    seeds = {
        "train": range(TRAIN_SEED_BASE, TRAIN_SEED_BASE + n_train),
        "test": range(TEST_SEED_BASE, TEST_SEED_BASE + n_test),
    }
    for split, split_seeds in seeds.items():
        for i, seed in enumerate(split_seeds):
            Y, S, class_map = generate_scene(seed, config)
            path = out_dir / f"{split}_{i:05d}.npz"
            try:
                np.savez(path, Y=Y.astype("<f4"), S=S.astype("<f4"),
                         class_map=class_map.astype("<i4"))
            except OSError:
                path.unlink(missing_ok=True)
                raise
            hist = np.bincount(class_map.ravel(), minlength=len(CLASS_NAMES))
            records[split].append({
                "file": path.name,
                "seed": int(seed),
                "class_histogram": hist.tolist(),
            })

    manifest = DatasetManifest(
        scene_config=config.to_dict(), crop_size=crop_size, scale=scale,
        train=records["train"], test=records["test"],
    )
    (out_dir / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2))

    # Fit normalizers over deterministic center crops of the train split.
    off = center_crop_offset(config.size, crop_size)
    res_acc = degrade.RunningMoments()
    cond_acc = degrade.RunningMoments()
    for rec in records["train"]:
        with np.load(out_dir / rec["file"]) as z:
            Yc = z["Y"][off : off + crop_size, off : off + crop_size].astype(np.float64)
        _, X_tilde = degrade.wald_degrade(Yc, scale)
        res_acc.update(Yc - X_tilde)
        cond_acc.update(X_tilde)
    if res_acc.std == 0.0:
        raise ValueError("train residuals have zero variance")
    normalizer = degrade.ResidualNormalizer(mu_R=res_acc.mean, sigma_R=res_acc.std)
    degrade.save_normalizer(
        out_dir / "normalizer.json", normalizer,
        band_lo=np.full(config.bands, config.band_lo),
        band_hi=np.full(config.bands, config.band_hi),
        extra={"mu_X": cond_acc.mean, "sigma_X": cond_acc.std},
    )
    return manifest


def load_manifest(dataset_dir: str | Path) -> DatasetManifest:
    doc = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    return DatasetManifest(**doc)


class SceneDataset:
    """Reader over a built dataset: random crops for training reads,
    deterministic center crops for evaluation reads. Degradation and
    standardization are applied per read."""

    def __init__(self, dataset_dir: str | Path):
        self.dir = Path(dataset_dir)
        self.manifest = load_manifest(self.dir)
        self.config = SceneConfig.from_dict(self.manifest.scene_config)
        self.crop_size = self.manifest.crop_size
        self.scale = self.manifest.scale
        self.normalizer, doc = degrade.load_normalizer(self.dir / "normalizer.json")
        self.band_lo = np.asarray(doc["band_lo"])
        self.band_hi = np.asarray(doc["band_hi"])
        self.mu_X = doc["mu_X"]
        self.sigma_X = doc["sigma_X"]

    def n_scenes(self, split: str) -> int:
        return len(getattr(self.manifest, split))

    def _load(self, split: str, index: int):
        rec = getattr(self.manifest, split)[index]
        with np.load(self.dir / rec["file"]) as z:
            return z["Y"].astype(np.float64), z["S"].astype(np.float64), z["class_map"].astype(np.int64)

    def read(self, split: str, index: int, rng: np.random.Generator | None = None) -> dict:
        """One sample: deterministic center crop without an rng; with an
        rng, a random crop with a random dihedral transform (rotations and
        flips), which multiplies the effective diversity of small scene
        collections without touching the degradation statistics."""
        Y, S, class_map = self._load(split, index)
        full = Y.shape[0]
        if rng is None:
            top = left = center_crop_offset(full, self.crop_size)
        else:
            top = int(rng.integers(0, full - self.crop_size + 1))
            left = int(rng.integers(0, full - self.crop_size + 1))
        Yc, Sc, cc = crop([Y, S, class_map], top, left, self.crop_size)
        if rng is not None:
            k = int(rng.integers(0, 4))
            flip = bool(rng.integers(0, 2))
            Yc, Sc, cc = (dihedral(a, k, flip) for a in (Yc, Sc, cc))
        X, X_tilde = degrade.wald_degrade(Yc, self.scale)
        R = degrade.make_residual(Yc, X_tilde)
        return {
            "Y": Yc,
            "X": X,
            "X_tilde": X_tilde,
            "S": degrade.normalize_reflectance(Sc, self.band_lo, self.band_hi),
            "class_map": cc,
            "R_std": self.normalizer.standardize(R),
            "X_cond": (X_tilde - self.mu_X) / self.sigma_X,
        }


def per_class_masks(class_map: np.ndarray, grouping: dict[str, str] | None = None):
    """Boolean mask per reporting group plus the majority-class group of
    the patch. Group masks partition the pixel set."""
    grouping = grouping or DEFAULT_GROUPING
    class_map = np.asarray(class_map)
    if class_map.max() >= len(CLASS_NAMES) or class_map.min() < 0:
        raise ValueError("unknown class id in class map")
    groups = sorted(set(grouping.values()))
    masks = {g: np.zeros(class_map.shape, dtype=bool) for g in groups}
    for cid, cname in enumerate(CLASS_NAMES):
        masks[grouping[cname]] |= class_map == cid
    counts = np.bincount(class_map.ravel(), minlength=len(CLASS_NAMES))
    majority = grouping[CLASS_NAMES[int(np.argmax(counts))]]
    return masks, majority
