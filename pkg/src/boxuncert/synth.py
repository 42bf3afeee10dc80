"""Synthetic detection scenarios with known heteroscedastic noise.

Ground-truth boxes are sampled inside the image; detections are the boxes
perturbed in center/size space by Gaussian noise with a configurable true
sigma per coordinate, and the *reported* sigma is sigma_true / k, so k < 1
overreports (too large) and k > 1 underreports. A sidecar file records the
true sigmas for oracle checks. Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import DecodedBox
from .errors import ConfigError
from .matching import Detection, GroundTruth

__all__ = ["SynthConfig", "SynthScenario", "generate"]

_REF_AREA = 32.0 * 32.0  # COCO small/medium boundary, used as the area anchor


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator; see generate() for the noise model."""

    seed: int = 0
    n_images: int = 100
    n_objects_per_image: int = 10
    image_height: int = 512
    image_width: int = 1024
    class_frequencies: tuple[float, ...] = (1.0,)
    class_size_ranges: tuple[tuple[float, float], ...] = ((16.0, 128.0),)
    class_k: tuple[float, ...] | None = None  # per-class miscalibration, else global k
    k: float = 1.0
    base_sigma: tuple[float, float, float, float] = (2.0, 2.0, 2.0, 2.0)
    area_exponent: float = 0.0  # sigma_true scales with (area / 32^2) ** -alpha
    occlusion_probs: tuple[float, ...] = (1.0,)
    occlusion_multiplier: float = 1.0
    quality_coupling: float = 0.0  # sigma_true *= 1 + coupling * quality / 100
    surplus_rate: float = 0.0  # expected surplus detections per object
    missed_rate: float = 0.0  # probability a ground truth emits no detection

    def __post_init__(self):
        if self.n_images < 1 or self.n_objects_per_image < 1:
            raise ConfigError("need at least one image and one object per image")
        if len(self.class_frequencies) != len(self.class_size_ranges):
            raise ConfigError("class frequencies and size ranges must align")
        if self.class_k is not None and len(self.class_k) != len(self.class_frequencies):
            raise ConfigError("class_k must align with class_frequencies")
        if abs(sum(self.class_frequencies) - 1.0) > 1e-9:
            raise ConfigError("class frequencies must sum to 1")
        if self.k <= 0 or (self.class_k is not None and any(k <= 0 for k in self.class_k)):
            raise ConfigError("miscalibration factors must be positive")
        if self.area_exponent < 0:
            raise ConfigError("area exponent must be >= 0")
        if abs(sum(self.occlusion_probs) - 1.0) > 1e-9 or any(
            p < 0 for p in self.occlusion_probs
        ):
            raise ConfigError("occlusion probabilities must be >= 0 and sum to 1")
        if not 0.0 <= self.missed_rate <= 1.0 or self.surplus_rate < 0:
            raise ConfigError("invalid surplus/missed rates")
        for lo, hi in self.class_size_ranges:
            if not 0 < lo <= hi:
                raise ConfigError(f"invalid size range ({lo}, {hi})")
            if hi >= min(self.image_height, self.image_width):
                raise ConfigError(
                    f"objects up to {hi} px cannot fit the "
                    f"{self.image_height}x{self.image_width} image"
                )

    @classmethod
    def from_mapping(cls, kv: dict) -> "SynthConfig":
        """Build from plain-text key-value entries (keys match field names;
        sequences are comma separated, size ranges use lo:hi)."""
        kwargs = {}
        scalars_int = ("seed", "n_images", "n_objects_per_image", "image_height", "image_width")
        scalars_float = (
            "k", "area_exponent", "occlusion_multiplier", "quality_coupling",
            "surplus_rate", "missed_rate",
        )
        for key in scalars_int:
            if key in kv:
                kwargs[key] = int(kv[key])
        for key in scalars_float:
            if key in kv:
                kwargs[key] = float(kv[key])
        if "class_frequencies" in kv:
            kwargs["class_frequencies"] = tuple(
                float(v) for v in str(kv["class_frequencies"]).split(",")
            )
        if "class_size_ranges" in kv:
            ranges = []
            for item in str(kv["class_size_ranges"]).split(","):
                lo, _, hi = item.partition(":")
                ranges.append((float(lo), float(hi)))
            kwargs["class_size_ranges"] = tuple(ranges)
        if "class_k" in kv:
            kwargs["class_k"] = tuple(float(v) for v in str(kv["class_k"]).split(","))
        if "base_sigma" in kv:
            vals = tuple(float(v) for v in str(kv["base_sigma"]).split(","))
            if len(vals) == 1:
                vals = vals * 4
            if len(vals) != 4:
                raise ConfigError("base_sigma needs 1 or 4 values")
            kwargs["base_sigma"] = vals
        if "occlusion_probs" in kv:
            kwargs["occlusion_probs"] = tuple(
                float(v) for v in str(kv["occlusion_probs"]).split(",")
            )
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthScenario:
    """In-memory result of one generator run."""

    ground_truths: tuple[GroundTruth, ...]
    detections: tuple[Detection, ...]
    sigma_true: np.ndarray  # (n_detections, 4); NaN rows for surplus detections


def generate(config: SynthConfig) -> SynthScenario:
    """Sample a full scenario; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    n_classes = len(config.class_frequencies)
    freqs = np.asarray(config.class_frequencies)
    base = np.asarray(config.base_sigma)

    gts: list[GroundTruth] = []
    dets: list[Detection] = []
    sig_true_rows: list[np.ndarray] = []
    for img in range(config.n_images):
        image_id = f"img{img:06d}"
        for _ in range(config.n_objects_per_image):
            cls = int(rng.choice(n_classes, p=freqs))
            lo, hi = config.class_size_ranges[cls]
            h = rng.uniform(lo, hi)
            w = rng.uniform(lo, hi)
            cy = rng.uniform(h / 2, config.image_height - h / 2)
            cx = rng.uniform(w / 2, config.image_width - w / 2)
            occ = int(rng.choice(len(config.occlusion_probs), p=np.asarray(config.occlusion_probs)))
            quality = float(rng.uniform(0.0, 100.0))
            gts.append(
                GroundTruth(
                    image_id=image_id,
                    class_id=cls,
                    corners=(cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2),
                    occlusion=occ,
                )
            )

            area = h * w
            sigma_true = (
                base
                * (area / _REF_AREA) ** (-config.area_exponent)
                * config.occlusion_multiplier**occ
                * (1.0 + config.quality_coupling * quality / 100.0)
            )
            # Consume the noise draw even for missed detections so that the
            # miss pattern does not shift every later sample.
            noise = rng.standard_normal(4) * sigma_true
            missed = rng.uniform() < config.missed_rate
            if missed:
                continue
            k = config.class_k[cls] if config.class_k is not None else config.k
            reported = sigma_true / k
            mean_y = cy + noise[0]
            mean_x = cx + noise[1]
            mean_h = max(h + noise[2], 1e-3)
            mean_w = max(w + noise[3], 1e-3)
            dets.append(
                Detection(
                    image_id=image_id,
                    class_id=cls,
                    box=DecodedBox.from_arrays(
                        (mean_y, mean_x, mean_h, mean_w), reported
                    ),
                    score=float(rng.uniform(0.5, 1.0)),
                    quality=quality,
                )
            )
            sig_true_rows.append(sigma_true)

        n_surplus = int(rng.poisson(config.surplus_rate * config.n_objects_per_image))
        for _ in range(n_surplus):
            cls = int(rng.choice(n_classes, p=freqs))
            lo, hi = config.class_size_ranges[cls]
            h = rng.uniform(lo, hi)
            w = rng.uniform(lo, hi)
            cy = rng.uniform(h / 2, config.image_height - h / 2)
            cx = rng.uniform(w / 2, config.image_width - w / 2)
            reported = base * rng.uniform(0.5, 2.0, size=4)
            dets.append(
                Detection(
                    image_id=image_id,
                    class_id=cls,
                    box=DecodedBox.from_arrays((cy, cx, h, w), reported),
                    score=float(rng.uniform(0.5, 1.0)),
                    quality=float(rng.uniform(0.0, 100.0)),
                )
            )
            sig_true_rows.append(np.full(4, np.nan))

    sigma_true = (
        np.stack(sig_true_rows) if sig_true_rows else np.zeros((0, 4))
    )
    return SynthScenario(tuple(gts), tuple(dets), sigma_true)
