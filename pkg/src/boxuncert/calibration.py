"""Post-hoc calibration of predicted sds against matched residuals.

Two families: isotonic regression (global, per-coordinate, per-class, or
both) fit with a hand-rolled pool-adjacent-violators solver, and factor
scaling optimized by gradient descent under an NLL, RMSUE, or MAUE loss.
Either family runs in absolute or relative mode; relative mode normalizes
sigma and the residual by the object's own width/height before fitting and
re-multiplies at evaluation time.

Residual-matching fits target |delta| * target_scale. The default scale
sqrt(pi/2) makes the identity map the fixed point of perfect calibration
(E|delta| = sigma * sqrt(2/pi) under a correct Gaussian); pass
target_scale=1.0 for the raw-residual objective. The NLL loss needs no
such constant and ignores it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .anchors import COORDS, DecodedBox
from .errors import DomainError, FormatError
from .matching import Detection, MatchedPair

__all__ = [
    "GAUSSIAN_TARGET_SCALE",
    "SCHEMES",
    "MODES",
    "FS_LOSSES",
    "IsotonicMap",
    "CalibrationModel",
    "pava_fit",
    "fit_isotonic",
    "fit_factor",
    "apply_calibration",
    "calibrate_pairs",
    "model_to_text",
    "model_from_text",
]

logger = logging.getLogger(__name__)

GAUSSIAN_TARGET_SCALE = math.sqrt(math.pi / 2.0)

SCHEMES = ("ir", "ir_pco", "ir_cl", "ir_pco_cl", "fs")
MODES = ("absolute", "relative")
FS_LOSSES = ("nll", "rmsue", "maue")


@dataclass(frozen=True)
class IsotonicMap:
    """Piecewise-linear non-decreasing map, clamped outside its breakpoints."""

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.breakpoints) != len(self.values) or not self.breakpoints:
            raise DomainError("IsotonicMap needs matching, non-empty breakpoints/values")
        if any(b >= a for b, a in zip(self.breakpoints[1:], self.breakpoints)):
            raise DomainError("IsotonicMap breakpoints must be strictly ascending")
        if any(v < u for u, v in zip(self.values, self.values[1:])):
            raise DomainError("IsotonicMap values must be non-decreasing")

    def __call__(self, x):
        out = np.interp(np.asarray(x, dtype=float), self.breakpoints, self.values)
        return out if np.ndim(x) else float(out)

    @classmethod
    def identity(cls) -> "IsotonicMap":
        return cls((0.0, 1.0), (0.0, 1.0))


def pava_fit(x, y, w=None) -> IsotonicMap:
    """Weighted isotonic least squares via pool-adjacent-violators.

    Equal-x ties are pre-pooled by weighted mean; zero-weight points are
    dropped (they do not affect the objective). The returned map linearly
    interpolates between the pooled block centers.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.shape != w.shape or x.size == 0:
        raise DomainError("pava_fit expects non-empty 1-d x, y, w of equal length")
    if np.any(w < 0):
        raise DomainError("weights must be >= 0")
    keep = w > 0
    if not np.any(keep):
        raise DomainError("pava_fit needs at least one positive weight")
    x, y, w = x[keep], y[keep], w[keep]

    order = np.argsort(x, kind="stable")
    x, y, w = x[order], y[order], w[order]
    ux, start = np.unique(x, return_index=True)
    wsum = np.add.reduceat(w, start)
    ysum = np.add.reduceat(w * y, start)
    xsum = np.add.reduceat(w * x, start)

    # Stack-based PAVA over the pre-pooled points.
    vals: list[float] = []
    wts: list[float] = []
    xts: list[float] = []
    for i in range(ux.size):
        vals.append(ysum[i] / wsum[i])
        wts.append(wsum[i])
        xts.append(xsum[i])
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v = vals.pop()
            wt = wts.pop()
            xt = xts.pop()
            vals[-1] = (vals[-1] * wts[-1] + v * wt) / (wts[-1] + wt)
            wts[-1] += wt
            xts[-1] += xt
    centers = [xt / wt for xt, wt in zip(xts, wts)]
    return IsotonicMap(tuple(centers), tuple(vals))


@dataclass
class CalibrationModel:
    """Fitted calibration: isotonic maps keyed by (coordinate?, class?) or a
    single scaling factor; applies to detection sds, means untouched."""

    scheme: str
    mode: str
    target_scale: float = GAUSSIAN_TARGET_SCALE
    size_source: str = "predicted"
    maps: dict[tuple[str | None, int | None], IsotonicMap] = field(default_factory=dict)
    fallback_groups: tuple = ()
    factor: float | None = None
    loss_used: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}")
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.scheme == "fs" and (self.factor is None or self.factor <= 0):
            raise DomainError("FS model requires factor > 0")

    @property
    def per_coordinate(self) -> bool:
        return self.scheme in ("ir_pco", "ir_pco_cl")

    @property
    def per_class(self) -> bool:
        return self.scheme in ("ir_cl", "ir_pco_cl")

    def lookup(self, coord: str, class_id: int) -> tuple[IsotonicMap, bool]:
        """Map for a (coordinate, class) query and whether it fell back."""
        key = (coord if self.per_coordinate else None, class_id if self.per_class else None)
        m = self.maps.get(key)
        if m is not None:
            return m, False
        return self.maps[(None, None)], key != (None, None)


def _pair_norms(pairs, size_source: str) -> np.ndarray:
    """(N, 4) normalizers for relative mode: height for y/h, width for x/w."""
    if size_source == "predicted":
        hw = np.array([(p.detection.box.h.mean, p.detection.box.w.mean) for p in pairs])
    elif size_source == "ground_truth":
        hw = np.array([(g.center_size()[2], g.center_size()[3])
                       for g in (p.ground_truth for p in pairs)])
    else:
        raise DomainError(f"unknown size_source {size_source!r}")
    if np.any(hw <= 0):
        raise DomainError("relative mode requires positive object sizes")
    return hw[:, [0, 1, 0, 1]]


def _pair_arrays(pairs):
    sigmas = np.stack([p.detection.box.sds() for p in pairs])
    deltas = np.stack([np.asarray(p.residual, dtype=float) for p in pairs])
    classes = np.array([p.ground_truth.class_id for p in pairs])
    return sigmas, deltas, classes


def fit_isotonic(
    pairs,
    scheme: str = "ir",
    mode: str = "absolute",
    target_scale: float = GAUSSIAN_TARGET_SCALE,
    size_source: str = "predicted",
) -> CalibrationModel:
    """Fit isotonic calibration maps from predicted sigma to scaled residuals.

    Any (coordinate, class) group addressed by the scheme that holds fewer
    than two pairs falls back to the global map and is recorded in the
    model.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DomainError("fit_isotonic needs at least two matched pairs")
    if scheme not in ("ir", "ir_pco", "ir_cl", "ir_pco_cl"):
        raise DomainError(f"fit_isotonic got non-isotonic scheme {scheme!r}")
    sigmas, deltas, classes = _pair_arrays(pairs)
    norms = _pair_norms(pairs, size_source) if mode == "relative" else np.ones_like(sigmas)
    feats = sigmas / norms
    targets = deltas * target_scale / norms

    model = CalibrationModel(
        scheme=scheme, mode=mode, target_scale=target_scale, size_source=size_source
    )
    model.maps[(None, None)] = pava_fit(feats.ravel(), targets.ravel())

    coord_keys = COORDS if scheme in ("ir_pco", "ir_pco_cl") else (None,)
    class_keys = sorted(set(classes.tolist())) if scheme in ("ir_cl", "ir_pco_cl") else (None,)
    fallbacks = []
    for ck in class_keys:
        row_sel = slice(None) if ck is None else (classes == ck)
        n_pairs_in_group = len(pairs) if ck is None else int((classes == ck).sum())
        for co in coord_keys:
            if co is None and ck is None:
                continue  # global map already fitted
            if n_pairs_in_group < 2:
                fallbacks.append((co, ck))
                continue
            col_sel = slice(None) if co is None else COORDS.index(co)
            f = feats[row_sel, col_sel]
            t = targets[row_sel, col_sel]
            model.maps[(co, ck)] = pava_fit(np.ravel(f), np.ravel(t))
    model.fallback_groups = tuple(fallbacks)
    if fallbacks:
        logger.warning("fit_isotonic: %d group(s) below 2 pairs fell back to the global map",
                       len(fallbacks))
    return model


def _fs_losses(sigma, delta):
    log_2pi = math.log(2 * math.pi)

    def rmsue(s):
        return math.sqrt(float(np.mean((delta - s * sigma) ** 2)))

    def rmsue_grad(s):
        val = rmsue(s)
        if val == 0:
            return 0.0
        return float(s * np.mean(sigma**2) - np.mean(delta * sigma)) / val

    def maue(s):
        return float(np.mean(np.abs(delta - s * sigma)))

    def maue_grad(s):
        return float(-np.mean(sigma * np.sign(delta - s * sigma)))

    m = float(np.mean((delta / sigma) ** 2))

    def nll(s):
        return 0.5 * (m / s**2) + math.log(s) + float(np.mean(np.log(sigma**2))) / 2 + log_2pi / 2

    def nll_grad(s):
        return (1.0 - m / s**2) / s

    return {"rmsue": (rmsue, rmsue_grad), "maue": (maue, maue_grad), "nll": (nll, nll_grad)}


def fit_factor(
    pairs,
    loss: str = "rmsue",
    mode: str = "absolute",
    epochs: int = 100,
    lr: float = 0.1,
    target_scale: float = GAUSSIAN_TARGET_SCALE,
    size_source: str = "predicted",
) -> CalibrationModel:
    """Fit a single scaling factor s by gradient descent on the chosen loss.

    All four coordinates are pooled. Descent starts at s=1 with the given
    step size and halves the step whenever it fails to decrease the loss,
    which keeps the fixed 100-epoch budget robust to data scale. The NLL
    loss ignores target_scale.
    """
    pairs = list(pairs)
    if not pairs:
        raise DomainError("fit_factor needs at least one matched pair")
    if loss not in FS_LOSSES:
        raise DomainError(f"unknown factor-scaling loss {loss!r}")
    sigmas, deltas, _ = _pair_arrays(pairs)
    if np.any(sigmas <= 0):
        raise DomainError("factor scaling requires all sigma > 0")
    if mode == "relative":
        norms = _pair_norms(pairs, size_source)
        sigmas = sigmas / norms
        deltas = deltas / norms
    sigma = sigmas.ravel()
    delta = deltas.ravel()
    if loss != "nll":
        delta = delta * target_scale

    loss_fn, grad_fn = _fs_losses(sigma, delta)[loss]
    s = 1.0
    step = lr
    cur = loss_fn(s)
    for _ in range(epochs):
        g = grad_fn(s)
        if g == 0.0:
            break
        for _ in range(60):
            cand = s - step * g
            if cand > 0:
                new = loss_fn(cand)
                if new < cur:
                    s, cur = cand, new
                    break
            step /= 2
        if abs(step * g) <= 1e-14 * max(1.0, s):
            break
    return CalibrationModel(
        scheme="fs",
        mode=mode,
        target_scale=target_scale if loss != "nll" else 1.0,
        size_source=size_source,
        factor=float(s),
        loss_used=loss,
    )


def _calibrated_sds(model: CalibrationModel, det: Detection, class_id: int) -> tuple[np.ndarray, bool]:
    sds = det.box.sds()
    if model.scheme == "fs":
        # Relative FS normalizes and denormalizes by the same size, so the
        # applied transform reduces to s * sigma in either mode.
        return model.factor * sds, False
    if model.mode == "relative":
        h, w = det.box.h.mean, det.box.w.mean
        if h <= 0 or w <= 0:
            raise DomainError("relative mode requires positive decoded sizes")
        norm = np.array([h, w, h, w])
    else:
        norm = np.ones(4)
    out = np.empty(4)
    fell_back = False
    for i, coord in enumerate(COORDS):
        m, fb = model.lookup(coord, class_id)
        fell_back |= fb
        out[i] = m(sds[i] / norm[i]) * norm[i]
    return out, fell_back


def apply_calibration(model: CalibrationModel, detections, classes=None) -> list[Detection]:
    """Replace each detection's sds with calibrated values; means untouched.

    classes overrides the class used for per-class lookups (e.g. ground
    truth classes); default is each detection's own predicted class.
    Unseen classes fall back to the global map (logged).
    """
    if model.size_source == "ground_truth" and model.mode == "relative":
        raise DomainError(
            "ground-truth-size relative models need pair context; use calibrate_pairs"
        )
    detections = list(detections)
    if classes is None:
        classes = [d.class_id for d in detections]
    if len(classes) != len(detections):
        raise DomainError("classes must align with detections")
    out = []
    n_fallback = 0
    for det, cls in zip(detections, classes):
        sds, fb = _calibrated_sds(model, det, int(cls))
        n_fallback += fb
        out.append(
            Detection(
                image_id=det.image_id,
                class_id=det.class_id,
                box=DecodedBox.from_arrays(det.box.means(), sds),
                score=det.score,
                quality=det.quality,
            )
        )
    if n_fallback:
        logger.warning("apply_calibration: %d detection(s) used the global fallback map",
                       n_fallback)
    return out


def calibrate_pairs(model: CalibrationModel, pairs, class_source: str = "ground_truth"):
    """Return pairs whose detections carry calibrated sds.

    class_source picks the class for per-class lookups: the ground-truth
    class (the paper's evaluation setting) or the detection's own.
    """
    pairs = list(pairs)
    if class_source == "ground_truth":
        classes = [p.ground_truth.class_id for p in pairs]
    elif class_source == "predicted":
        classes = [p.detection.class_id for p in pairs]
    else:
        raise DomainError(f"unknown class_source {class_source!r}")
    if model.size_source == "ground_truth" and model.mode == "relative" and model.scheme != "fs":
        new_dets = []
        for p, cls in zip(pairs, classes):
            h, w = p.ground_truth.center_size()[2:]
            norm = np.array([h, w, h, w])
            sds = p.detection.box.sds()
            out = np.empty(4)
            for i, coord in enumerate(COORDS):
                m, _ = model.lookup(coord, int(cls))
                out[i] = m(sds[i] / norm[i]) * norm[i]
            new_dets.append(
                Detection(
                    image_id=p.detection.image_id,
                    class_id=p.detection.class_id,
                    box=DecodedBox.from_arrays(p.detection.box.means(), out),
                    score=p.detection.score,
                    quality=p.detection.quality,
                )
            )
    else:
        new_dets = apply_calibration(model, [p.detection for p in pairs], classes)
    return [
        MatchedPair(detection=d, ground_truth=p.ground_truth, residual=p.residual, iou=p.iou)
        for d, p in zip(new_dets, pairs)
    ]


# ---------------------------------------------------------------------------
# Versioned text serialization (bit-exact round-trip via repr floats)

_HEADER = "boxuncert calibration-model v1"


def _fmt_key(key) -> str:
    co, ck = key
    return f"{co if co is not None else '*'} {ck if ck is not None else '*'}"


def model_to_text(model: CalibrationModel) -> str:
    lines = [
        _HEADER,
        f"scheme {model.scheme}",
        f"mode {model.mode}",
        f"size_source {model.size_source}",
        f"target_scale {model.target_scale!r}",
    ]
    if model.scheme == "fs":
        lines.append(f"loss {model.loss_used}")
        lines.append(f"factor {model.factor!r}")
    else:
        fb = ",".join(_fmt_key(k).replace(" ", ":") for k in model.fallback_groups)
        lines.append(f"fallback_groups {fb if fb else 'none'}")
        for key in sorted(model.maps, key=lambda k: (k[0] is not None, k[1] is not None, str(k))):
            m = model.maps[key]
            lines.append(f"map {_fmt_key(key)}")
            lines.append("breakpoints " + " ".join(repr(v) for v in m.breakpoints))
            lines.append("values " + " ".join(repr(v) for v in m.values))
    lines.append("end")
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> CalibrationModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise FormatError(f"not a calibration model file (expected header {_HEADER!r})")
    fields: dict[str, str] = {}
    maps: dict[tuple[str | None, int | None], IsotonicMap] = {}
    i = 1
    cur_key = None
    cur_bp = None
    while i < len(lines):
        line = lines[i]
        i += 1
        if line == "end":
            break
        tag, _, rest = line.partition(" ")
        if tag == "map":
            co_s, ck_s = rest.split()
            cur_key = (None if co_s == "*" else co_s, None if ck_s == "*" else int(ck_s))
        elif tag == "breakpoints":
            cur_bp = tuple(float(v) for v in rest.split())
        elif tag == "values":
            if cur_key is None or cur_bp is None:
                raise FormatError("values line outside a map block")
            maps[cur_key] = IsotonicMap(cur_bp, tuple(float(v) for v in rest.split()))
            cur_key, cur_bp = None, None
        else:
            fields[tag] = rest
    try:
        scheme = fields["scheme"]
        model = CalibrationModel(
            scheme=scheme,
            mode=fields["mode"],
            target_scale=float(fields["target_scale"]),
            size_source=fields.get("size_source", "predicted"),
            factor=float(fields["factor"]) if scheme == "fs" else None,
            loss_used=fields.get("loss"),
        )
    except KeyError as e:
        raise FormatError(f"calibration model file missing field {e}") from None
    if scheme != "fs":
        model.maps = maps
        if (None, None) not in maps:
            raise FormatError("calibration model file lacks the global map")
        fb = fields.get("fallback_groups", "none")
        if fb != "none":
            keys = []
            for item in fb.split(","):
                co_s, ck_s = item.split(":")
                keys.append((None if co_s == "*" else co_s, None if ck_s == "*" else int(ck_s)))
            model.fallback_groups = tuple(keys)
    return model
