"""Parsers and writers for labels, detections, matched pairs, and models.

All formats are decimal text with versioned headers; see FORMATS.md for the
exact column contracts. Floats are written with repr (shortest round-trip),
so write-then-read reproduces values bit-exactly and every writer is
deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import DecodedBox, GaussianBox4
from .calibration import CalibrationModel, model_from_text, model_to_text
from .errors import ConfigError, FormatError
from .matching import Detection, GroundTruth, MatchedPair

__all__ = [
    "DatasetProfile",
    "KITTI_PROFILE",
    "BDD_PROFILE",
    "EncodedDetection",
    "DetectionsFile",
    "read_key_value_file",
    "read_ground_truth",
    "write_ground_truth",
    "read_detections",
    "write_detections",
    "write_encoded_detections",
    "read_pairs",
    "write_pairs",
    "read_sigma_true",
    "write_sigma_true",
    "read_calibration_model",
    "write_calibration_model",
]

logger = logging.getLogger(__name__)

_DET_HEADER = "# boxuncert detections v1"
_PAIRS_HEADER = "# boxuncert matched-pairs v1"
_SIGMA_HEADER = "# boxuncert sigma-true v1"

_KITTI_CLASSES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram")
_BDD_CLASSES = (
    "pedestrian", "rider", "car", "truck", "bus", "train", "motorcycle",
    "bicycle", "traffic light", "traffic sign",
)


@dataclass(frozen=True)
class DatasetProfile:
    """Validation rules for a ground-truth source."""

    name: str
    occlusion_levels: tuple[int, ...]
    class_names: tuple[str, ...] = ()

    def class_id(self, token: str) -> int | None:
        if token in self.class_names:
            return self.class_names.index(token)
        try:
            return int(token)
        except ValueError:
            return None


KITTI_PROFILE = DatasetProfile("kitti", (0, 1, 2), _KITTI_CLASSES)
BDD_PROFILE = DatasetProfile("bdd", (0, 1), _BDD_CLASSES)
_PROFILES = {"kitti": KITTI_PROFILE, "bdd": BDD_PROFILE}


def get_profile(name: str) -> DatasetProfile:
    try:
        return _PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset profile {name!r}; known: {sorted(_PROFILES)}")


def read_key_value_file(path) -> dict[str, str]:
    """Plain-text config: one `key = value` (or `key: value`) per line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, _, value = line.partition(sep)
                break
        else:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Ground truth (KITTI-style layout)

def read_ground_truth(path, profile: DatasetProfile, image_id: str | None = None):
    """Parse a KITTI-style label file.

    Columns: class token, truncation (ignored), occlusion, xmin, ymin,
    xmax, ymax, trailing fields ignored. With image_id=None the file must
    carry an image_id as its leading column (single indexed file); with an
    explicit image_id the file is a one-image label file without that
    column. Malformed lines are logged with their line number and skipped.
    """
    records: list[GroundTruth] = []
    unknown_tokens: dict[str, int] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        offset = 0 if image_id is not None else 1
        if len(parts) < 7 + offset:
            logger.warning("%s:%d: expected %d+ fields, got %d; line skipped",
                           path, lineno, 7 + offset, len(parts))
            continue
        try:
            img = image_id if image_id is not None else parts[0]
            token = parts[offset]
            occlusion = int(float(parts[offset + 2]))
            xmin, ymin, xmax, ymax = (float(v) for v in parts[offset + 3 : offset + 7])
        except ValueError as e:
            logger.warning("%s:%d: %s; line skipped", path, lineno, e)
            continue
        if occlusion not in profile.occlusion_levels:
            logger.warning(
                "%s:%d: occlusion level %d outside profile %s levels %s",
                path, lineno, occlusion, profile.name, profile.occlusion_levels,
            )
        cls = profile.class_id(token)
        if cls is None:
            cls = len(profile.class_names) + unknown_tokens.setdefault(
                token, len(unknown_tokens)
            )
            logger.warning("%s:%d: unknown class token %r mapped to id %d",
                           path, lineno, token, cls)
        if ymax <= ymin or xmax <= xmin:
            logger.warning("%s:%d: degenerate box corners; line skipped", path, lineno)
            continue
        records.append(
            GroundTruth(
                image_id=img,
                class_id=cls,
                corners=(ymin, xmin, ymax, xmax),
                occlusion=occlusion,
            )
        )
    return records


def write_ground_truth(path, ground_truths, profile: DatasetProfile | None = None) -> None:
    """Write an indexed KITTI-style file (image_id leading column)."""
    lines = []
    for gt in ground_truths:
        ymin, xmin, ymax, xmax = gt.corners
        if profile is not None and gt.class_id < len(profile.class_names):
            token = profile.class_names[gt.class_id]
        else:
            token = str(gt.class_id)
        lines.append(
            f"{gt.image_id} {token} 0.0 {gt.occlusion} "
            f"{xmin!r} {ymin!r} {xmax!r} {ymax!r}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# Detections

@dataclass(frozen=True)
class EncodedDetection:
    """A not-yet-decoded record: anchor-relative offsets plus anchor index."""

    image_id: str
    class_id: int
    score: float | None
    offsets: GaussianBox4
    anchor_index: int
    quality: float | None = None


@dataclass(frozen=True)
class DetectionsFile:
    space: str  # "image" or "anchor_relative"
    records: tuple
    has_quality: bool


def _fmt_opt(v) -> str:
    return "-" if v is None else repr(float(v))


def _parse_opt(s: str) -> float | None:
    return None if s == "-" else float(s)


def write_detections(path, detections, include_quality: bool | None = None) -> None:
    """Write image-space detections (mu/sigma per y, x, h, w)."""
    detections = list(detections)
    if include_quality is None:
        include_quality = any(d.quality is not None for d in detections)
    cols = "image_id class_id score mu_y sigma_y mu_x sigma_x mu_h sigma_h mu_w sigma_w"
    if include_quality:
        cols += " quality"
    lines = [f"{_DET_HEADER} space=image", f"# columns: {cols}"]
    for d in detections:
        m = d.box.means()
        s = d.box.sds()
        parts = [d.image_id, str(d.class_id), _fmt_opt(d.score)]
        for j in range(4):
            parts += [repr(float(m[j])), repr(float(s[j]))]
        if include_quality:
            parts.append(_fmt_opt(d.quality))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def write_encoded_detections(path, records, include_quality: bool | None = None) -> None:
    """Write anchor-relative detections (offset mu/sigma plus anchor index)."""
    records = list(records)
    if include_quality is None:
        include_quality = any(r.quality is not None for r in records)
    cols = (
        "image_id class_id score mu_y sigma_y mu_x sigma_x mu_h sigma_h mu_w sigma_w"
        " anchor_index"
    )
    if include_quality:
        cols += " quality"
    lines = [f"{_DET_HEADER} space=anchor_relative", f"# columns: {cols}"]
    for r in records:
        m = r.offsets.mu_array()
        sd = np.sqrt(r.offsets.var_array())
        parts = [r.image_id, str(r.class_id), _fmt_opt(r.score)]
        for j in range(4):
            parts += [repr(float(m[j])), repr(float(sd[j]))]
        parts.append(str(r.anchor_index))
        if include_quality:
            parts.append(_fmt_opt(r.quality))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path, expect_space: str | None = None) -> DetectionsFile:
    """Read a detections file of either coordinate space.

    expect_space raises FormatError on a header mismatch so decoding is
    applied exactly once along any pipeline.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_DET_HEADER):
        raise FormatError(f"{path}: missing detections header {_DET_HEADER!r}")
    try:
        space = lines[0].split("space=", 1)[1].strip()
    except IndexError:
        raise FormatError(f"{path}: header lacks the coordinate-space flag")
    if space not in ("image", "anchor_relative"):
        raise FormatError(f"{path}: unknown coordinate space {space!r}")
    if expect_space is not None and space != expect_space:
        raise FormatError(
            f"{path}: file is in {space!r} space but {expect_space!r} was expected"
        )
    if len(lines) < 2 or not lines[1].startswith("# columns:"):
        raise FormatError(f"{path}: missing columns line")
    colnames = lines[1].removeprefix("# columns:").split()
    has_quality = "quality" in colnames
    base_n = 11 + (1 if space == "anchor_relative" else 0)
    expected_n = base_n + (1 if has_quality else 0)

    records = []
    for lineno, raw in enumerate(lines[2:], start=3):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != expected_n:
            raise FormatError(
                f"{path}:{lineno}: expected {expected_n} fields, got {len(parts)}"
            )
        image_id = parts[0]
        class_id = int(parts[1])
        score = _parse_opt(parts[2])
        mus = [float(parts[3 + 2 * j]) for j in range(4)]
        sds = [float(parts[4 + 2 * j]) for j in range(4)]
        if any(s < 0 for s in sds):
            raise FormatError(f"{path}:{lineno}: negative sigma")
        idx = base_n - 1 if space == "anchor_relative" else None
        quality = _parse_opt(parts[-1]) if has_quality else None
        if space == "image":
            records.append(
                Detection(
                    image_id=image_id,
                    class_id=class_id,
                    box=DecodedBox.from_arrays(mus, sds),
                    score=score,
                    quality=quality,
                )
            )
        else:
            records.append(
                EncodedDetection(
                    image_id=image_id,
                    class_id=class_id,
                    score=score,
                    offsets=GaussianBox4.from_arrays(mus, [s**2 for s in sds]),
                    anchor_index=int(parts[idx]),
                    quality=quality,
                )
            )
    return DetectionsFile(space=space, records=tuple(records), has_quality=has_quality)


# ---------------------------------------------------------------------------
# Matched pairs

_PAIR_COLS = (
    "image_id det_class gt_class occlusion score quality "
    "mu_y sigma_y mu_x sigma_x mu_h sigma_h mu_w sigma_w "
    "gt_ymin gt_xmin gt_ymax gt_xmax "
    "delta_y delta_x delta_h delta_w iou"
)


def write_pairs(path, pairs) -> None:
    lines = [_PAIRS_HEADER, f"# columns: {_PAIR_COLS}"]
    for p in pairs:
        d, g = p.detection, p.ground_truth
        m = d.box.means()
        s = d.box.sds()
        parts = [d.image_id, str(d.class_id), str(g.class_id), str(g.occlusion),
                 _fmt_opt(d.score), _fmt_opt(d.quality)]
        for j in range(4):
            parts += [repr(float(m[j])), repr(float(s[j]))]
        parts += [repr(float(v)) for v in g.corners]
        parts += [repr(float(v)) for v in p.residual]
        parts.append(repr(float(p.iou)))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path) -> list[MatchedPair]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _PAIRS_HEADER:
        raise FormatError(f"{path}: missing pairs header {_PAIRS_HEADER!r}")
    pairs = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 23:
            raise FormatError(f"{path}:{lineno}: expected 23 fields, got {len(parts)}")
        det = Detection(
            image_id=parts[0],
            class_id=int(parts[1]),
            box=DecodedBox.from_arrays(
                [float(parts[6 + 2 * j]) for j in range(4)],
                [float(parts[7 + 2 * j]) for j in range(4)],
            ),
            score=_parse_opt(parts[4]),
            quality=_parse_opt(parts[5]),
        )
        gt = GroundTruth(
            image_id=parts[0],
            class_id=int(parts[2]),
            corners=tuple(float(v) for v in parts[14:18]),
            occlusion=int(parts[3]),
        )
        pairs.append(
            MatchedPair(
                detection=det,
                ground_truth=gt,
                residual=tuple(float(v) for v in parts[18:22]),
                iou=float(parts[22]),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# True-sigma sidecar (aligned with the detections file, row by row)

def write_sigma_true(path, sigma_true) -> None:
    lines = [_SIGMA_HEADER, "# columns: sigma_true_y sigma_true_x sigma_true_h sigma_true_w"]
    for row in np.asarray(sigma_true, dtype=float):
        lines.append(" ".join("nan" if math.isnan(v) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sigma_true(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _SIGMA_HEADER:
        raise FormatError(f"{path}: missing sidecar header {_SIGMA_HEADER!r}")
    rows = []
    for raw in lines[1:]:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    return np.array(rows, dtype=float).reshape(-1, 4)


# ---------------------------------------------------------------------------
# Calibration models

def write_calibration_model(path, model: CalibrationModel) -> None:
    Path(path).write_text(model_to_text(model))


def read_calibration_model(path) -> CalibrationModel:
    return model_from_text(Path(path).read_text())
