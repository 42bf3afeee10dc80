"""Anchor grids, offset encoding, and distribution-aware decoding.

Coordinates follow the (y, x, h, w) order everywhere; corner boxes are
(ymin, xmin, ymax, xmax). Offsets are anchor-relative:

    y = y_hat * h_a + y_a        h = exp(h_hat) * h_a
    x = x_hat * w_a + x_a        w = exp(w_hat) * w_a

Decoding propagates a per-coordinate Gaussian through that map under five
variants: BASELINE (ignore sigma), LNORM (log-normal closed form), CHAIN
(transform-chain engine, identical results to LNORM), SAMP (Monte Carlo
with k samples), and FALSEDEC (the ablation that decodes sigma with the
mean's equations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dist
from .dist import Gaussian1, Moments1, TransformChain, Affine, Exp
from .errors import ConfigError, DomainError

__all__ = [
    "COORDS",
    "Anchor",
    "AnchorGridConfig",
    "GaussianBox4",
    "DecodedBox",
    "Variant",
    "parse_variant",
    "build_anchor_grid",
    "anchors_to_array",
    "encode",
    "decode",
    "decode_batch",
    "rescale",
    "rescale_batch",
    "nll_loss",
]

COORDS = ("y", "x", "h", "w")

_SAMP_CHUNK = 4096  # boxes per chunk in the batched sampling decode


@dataclass(frozen=True)
class Anchor:
    """Reference box: center (y_a, x_a) and size (h_a, w_a), sizes > 0."""

    y_a: float
    x_a: float
    h_a: float
    w_a: float

    def __post_init__(self):
        if self.h_a <= 0 or self.w_a <= 0:
            raise DomainError(f"anchor sizes must be positive, got h_a={self.h_a}, w_a={self.w_a}")


@dataclass(frozen=True)
class AnchorGridConfig:
    """Grid layout: one anchor set per cell of each strided feature map."""

    image_height: int
    image_width: int
    strides: tuple[int, ...] = (8, 16, 32, 64, 128)
    scales_per_cell: int = 3
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    base_scale: float = 4.0

    def __post_init__(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.scales_per_cell < 1 or not self.aspect_ratios:
            raise ConfigError("need at least one scale and one aspect ratio per cell")
        for s in self.strides:
            if s <= 0 or self.image_height % s or self.image_width % s:
                raise ConfigError(
                    f"stride {s} must divide image size "
                    f"{self.image_height}x{self.image_width}"
                )

    @property
    def anchors_per_cell(self) -> int:
        return self.scales_per_cell * len(self.aspect_ratios)

    @property
    def total_anchors(self) -> int:
        cells = sum(
            (self.image_height // s) * (self.image_width // s) for s in self.strides
        )
        return self.anchors_per_cell * cells

    @classmethod
    def from_mapping(cls, kv: dict) -> "AnchorGridConfig":
        """Build from the plain-text key-value config keys (field names)."""
        try:
            kwargs = {
                "image_height": int(kv["image_height"]),
                "image_width": int(kv["image_width"]),
            }
        except KeyError as e:
            raise ConfigError(f"anchor config missing required key {e}") from None
        if "strides" in kv:
            kwargs["strides"] = tuple(int(v) for v in str(kv["strides"]).split(","))
        if "scales_per_cell" in kv:
            kwargs["scales_per_cell"] = int(kv["scales_per_cell"])
        if "aspect_ratios" in kv:
            kwargs["aspect_ratios"] = tuple(float(v) for v in str(kv["aspect_ratios"]).split(","))
        if "base_scale" in kv:
            kwargs["base_scale"] = float(kv["base_scale"])
        return cls(**kwargs)


@dataclass(frozen=True)
class GaussianBox4:
    """Independent per-coordinate Gaussians over anchor-relative offsets."""

    y: Gaussian1
    x: Gaussian1
    h: Gaussian1
    w: Gaussian1

    def mu_array(self) -> np.ndarray:
        return np.array([self.y.mu, self.x.mu, self.h.mu, self.w.mu])

    def var_array(self) -> np.ndarray:
        return np.array([self.y.var, self.x.var, self.h.var, self.w.var])

    @classmethod
    def from_arrays(cls, mus, variances) -> "GaussianBox4":
        return cls(*(Gaussian1(float(m), float(v)) for m, v in zip(mus, variances)))


@dataclass(frozen=True)
class DecodedBox:
    """Image-space box distribution: center/size moments plus mean corners."""

    y: Moments1
    x: Moments1
    h: Moments1
    w: Moments1

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.y.mean - self.h.mean / 2,
            self.x.mean - self.w.mean / 2,
            self.y.mean + self.h.mean / 2,
            self.x.mean + self.w.mean / 2,
        )

    def means(self) -> np.ndarray:
        return np.array([self.y.mean, self.x.mean, self.h.mean, self.w.mean])

    def sds(self) -> np.ndarray:
        return np.array([self.y.sd, self.x.sd, self.h.sd, self.w.sd])

    @classmethod
    def from_arrays(cls, means, sds) -> "DecodedBox":
        return cls(*(Moments1(float(m), float(s)) for m, s in zip(means, sds)))


@dataclass(frozen=True)
class Variant:
    """Decode variant selector; use the class-method constructors."""

    kind: str
    k: int | None = None
    seed: int | None = None

    _KINDS = ("baseline", "lnorm", "chain", "samp", "falsedec")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ConfigError(f"unknown decode variant {self.kind!r}")
        if self.kind == "samp":
            if self.k is None or self.k < 2:
                raise DomainError("SAMP requires k >= 2 samples")
            if self.seed is None:
                raise ConfigError("SAMP requires a seed")

    @classmethod
    def baseline(cls):
        return cls("baseline")

    @classmethod
    def lnorm(cls):
        return cls("lnorm")

    @classmethod
    def chain(cls):
        return cls("chain")

    @classmethod
    def samp(cls, k: int, seed: int):
        return cls("samp", k=k, seed=seed)

    @classmethod
    def falsedec(cls):
        return cls("falsedec")


def parse_variant(spec: str, seed: int = 0) -> Variant:
    """Parse a CLI-style variant spec such as 'lnorm' or 'samp:1000'."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    if name == "samp":
        if not arg:
            raise ConfigError("samp variant needs a sample count, e.g. samp:1000")
        return Variant.samp(int(arg), seed)
    if arg:
        raise ConfigError(f"variant {name!r} takes no argument")
    return Variant(name)


def build_anchor_grid(config: AnchorGridConfig) -> list[Anchor]:
    """All anchors in level-major, then row-major, then per-cell
    (scale-major, ratio-minor) order; deterministic by construction."""
    anchors = []
    for stride in config.strides:
        sizes = []
        for i in range(config.scales_per_cell):
            scale = config.base_scale * stride * 2.0 ** (i / config.scales_per_cell)
            for ratio in config.aspect_ratios:
                sizes.append((scale / math.sqrt(ratio), scale * math.sqrt(ratio)))
        rows = config.image_height // stride
        cols = config.image_width // stride
        for r in range(rows):
            y_a = (r + 0.5) * stride
            for c in range(cols):
                x_a = (c + 0.5) * stride
                for h_a, w_a in sizes:
                    anchors.append(Anchor(y_a, x_a, h_a, w_a))
    return anchors


def anchors_to_array(anchors) -> np.ndarray:
    """(N, 4) array of (y_a, x_a, h_a, w_a)."""
    return np.array([(a.y_a, a.x_a, a.h_a, a.w_a) for a in anchors], dtype=float)


def encode(gt_corners, anchor: Anchor) -> np.ndarray:
    """Ground-truth corners -> anchor-relative offset means (y, x, h, w)."""
    ymin, xmin, ymax, xmax = (float(v) for v in gt_corners)
    h = ymax - ymin
    w = xmax - xmin
    if h <= 0 or w <= 0:
        raise DomainError(f"ground-truth box must have positive size, got h={h}, w={w}")
    y = (ymin + ymax) / 2
    x = (xmin + xmax) / 2
    return np.array(
        [
            (y - anchor.y_a) / anchor.h_a,
            (x - anchor.x_a) / anchor.w_a,
            math.log(h / anchor.h_a),
            math.log(w / anchor.w_a),
        ]
    )


def decode_batch(mus, variances, anchors, variant: Variant, train_correction: bool = False):
    """Decode N offset distributions against N anchors in one shot.

    Args:
        mus, variances: (N, 4) offset means/variances in (y, x, h, w) order.
        anchors: (N, 4) array of (y_a, x_a, h_a, w_a).
        variant: decode variant (see Variant).
        train_correction: subtract var/2 from the size means before the
            exponential, matching a model trained with the corrected loss.

    Returns:
        (means, sds): two (N, 4) arrays in pixels.
    """
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    if (
        mus.shape != variances.shape
        or mus.shape != anchors.shape
        or mus.ndim != 2
        or mus.shape[1] != 4
    ):
        raise DomainError("decode_batch expects matching (N, 4) arrays")
    if np.any(variances < 0):
        raise DomainError("offset variances must be >= 0")
    if np.any(anchors[:, 2:] <= 0):
        raise DomainError("anchor sizes must be positive")

    y_a, x_a, h_a, w_a = anchors.T
    sds = np.sqrt(variances)
    means_out = np.empty_like(mus)
    sds_out = np.empty_like(mus)

    # Centers are affine in the offsets for every variant.
    means_out[:, 0] = mus[:, 0] * h_a + y_a
    means_out[:, 1] = mus[:, 1] * w_a + x_a
    if variant.kind == "baseline":
        sds_out[:, 0] = 0.0
        sds_out[:, 1] = 0.0
    else:
        sds_out[:, 0] = sds[:, 0] * h_a
        sds_out[:, 1] = sds[:, 1] * w_a

    size_mus = mus[:, 2:].copy()
    size_vars = variances[:, 2:]
    if train_correction and variant.kind != "baseline":
        size_mus -= size_vars / 2
    scales = np.stack([h_a, w_a], axis=1)

    if variant.kind == "baseline":
        means_out[:, 2:] = np.exp(size_mus) * scales
        sds_out[:, 2:] = 0.0
    elif variant.kind == "falsedec":
        means_out[:, 2:] = np.exp(size_mus) * scales
        # zero variance stays a point mass; the broken exp(sd) decode only
        # applies where there is uncertainty to (mis)propagate
        sds_out[:, 2:] = np.where(size_vars > 0, np.exp(sds[:, 2:]) * scales, 0.0)
    elif variant.kind in ("lnorm", "chain"):
        # Both paths feed identical contiguous columns to the same ufunc
        # loops, so lnorm and chain outputs are bit-for-bit equal.
        for j in range(2):
            mu_j = np.ascontiguousarray(size_mus[:, j])
            var_j = np.ascontiguousarray(size_vars[:, j])
            scale_j = np.ascontiguousarray(scales[:, j])
            if variant.kind == "lnorm":
                m, s = dist._lognormal_mean_sd(mu_j, var_j)
                m = scale_j * m + 0.0
                s = np.abs(scale_j) * s
            else:
                chain = TransformChain([Exp(), Affine(scale=scale_j, shift=0.0)])
                m, s = dist._closed_form_mean_sd(chain.steps, mu_j, var_j)
            means_out[:, 2 + j] = m
            sds_out[:, 2 + j] = s
    elif variant.kind == "samp":
        rng = np.random.default_rng(variant.seed)
        n = mus.shape[0]
        for lo in range(0, n, _SAMP_CHUNK):
            hi = min(lo + _SAMP_CHUNK, n)
            for j in range(2):
                m, s = _mc_size_moments(
                    size_mus[lo:hi, j], size_vars[lo:hi, j], scales[lo:hi, j], variant.k, rng
                )
                means_out[lo:hi, 2 + j] = m
                sds_out[lo:hi, 2 + j] = s
    else:  # pragma: no cover - Variant validates kinds
        raise ConfigError(f"unknown decode variant {variant.kind!r}")
    return means_out, sds_out


def _mc_size_moments(mu, var, scale, k, rng):
    """Sample-based size moments for one coordinate over a chunk of boxes.

    Draws are standardized per box (same moment matching as
    dist.propagate_mc) before the exponential transform.
    """
    z = rng.standard_normal((k, mu.shape[0]))
    s = z.std(axis=0)
    safe = s > 0
    zn = np.where(safe, (z - z.mean(axis=0)) / np.where(safe, s, 1.0), 0.0)
    y = np.exp(mu + np.sqrt(var) * zn) * scale
    return y.mean(axis=0), y.std(axis=0)


def decode(
    offsets: GaussianBox4,
    anchor: Anchor,
    variant: Variant,
    train_correction: bool = False,
) -> DecodedBox:
    """Decode a single offset distribution; see decode_batch."""
    means, sds = decode_batch(
        offsets.mu_array()[None, :],
        offsets.var_array()[None, :],
        np.array([[anchor.y_a, anchor.x_a, anchor.h_a, anchor.w_a]]),
        variant,
        train_correction=train_correction,
    )
    return DecodedBox.from_arrays(means[0], sds[0])


def rescale_batch(means, sds, from_size, to_size):
    """Linearly rescale decoded moments from one image size to another."""
    fh, fw = from_size
    th, tw = to_size
    if fh <= 0 or fw <= 0 or th <= 0 or tw <= 0:
        raise DomainError("image sizes must be positive")
    factors = np.array([th / fh, tw / fw, th / fh, tw / fw])
    return np.asarray(means, dtype=float) * factors, np.asarray(sds, dtype=float) * factors


def rescale(box: DecodedBox, from_size, to_size) -> DecodedBox:
    """Rescale a single decoded box; sds scale with their axis factor."""
    means, sds = rescale_batch(box.means()[None, :], box.sds()[None, :], from_size, to_size)
    return DecodedBox.from_arrays(means[0], sds[0])


def nll_loss(mus, variances, targets, foreground, train_correction: bool = False) -> float:
    """Attenuated localization NLL over a batch of anchors.

    loss = (1 / (8 * N_pos)) * sum_i sum_j [(t_ij - mu_ij)^2 / var_ij
           + log var_ij] * m_i, with m the foreground mask. With
    train_correction the size coordinates use mu + var/2 in the residual.
    """
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    targets = np.asarray(targets, dtype=float)
    fg = np.asarray(foreground, dtype=bool)
    if (
        mus.shape != variances.shape
        or mus.shape != targets.shape
        or mus.ndim != 2
        or mus.shape[1] != 4
    ):
        raise DomainError("nll_loss expects matching (N, 4) arrays")
    if fg.shape != (mus.shape[0],):
        raise DomainError("foreground mask must be (N,)")
    n_pos = int(fg.sum())
    if n_pos == 0:
        raise DomainError("nll_loss requires at least one foreground element")
    if np.any(variances[fg] <= 0):
        raise DomainError("foreground variances must be positive (log undefined at 0)")
    mu_eff = mus.copy()
    if train_correction:
        mu_eff[:, 2:] += variances[:, 2:] / 2
    per = (targets[fg] - mu_eff[fg]) ** 2 / variances[fg] + np.log(variances[fg])
    return float(per.sum() / (8.0 * n_pos))
