"""Image I/O, patch sampling and seeded synthetic degradations.

Images are plain ``float32`` numpy arrays laid out ``(height, width, channels)``
with values in ``[0, 1]``.  Grayscale images keep a trailing channel axis of
size one so every routine can loop over channels uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from scipy.special import expit

MIN_SIDE = 8

KINDS = ("Rain", "GaussianNoise", "Blur", "Haze", "LowLight")

# Defaults for every kind; user params are merged on top and unknown keys rejected.
DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "GaussianNoise": {"sigma": 25.0},
    "Blur": {"mode": "gaussian", "sigma_b": 2.0, "length": 9.0, "angle": 0.0},
    "Haze": {"t": 0.5, "A": 0.8, "t_far": None},
    "LowLight": {"s": 0.3, "g": 1.0},
    "Rain": {
        "count": None,
        "angle_min": 70.0,
        "angle_max": 110.0,
        "length_min": 8.0,
        "length_max": 24.0,
        "intensity_min": 0.15,
        "intensity_max": 0.5,
        "blur": 3.0,
    },
}


class ImageDecodeError(ValueError):
    """Raised when a file cannot be read as an 8-bit grayscale or RGB PNG."""


class DegradationError(ValueError):
    """Raised for an invalid degradation kind or parameter."""


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the Image invariants and return ``img`` as float32 ``(h, w, c)``."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be (h, w, 1|3), got shape {arr.shape}")
    h, w, _ = arr.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr.astype(np.float32, copy=False)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise ImageDecodeError(f"{path}: format {fmt!r} is not PNG")
            if mode not in ("L", "RGB"):
                raise ImageDecodeError(
                    f"{path}: mode {mode!r} unsupported (need 8-bit 'L' or 'RGB')"
                )
            im.load()
            data = np.asarray(im, dtype=np.uint8)
    except ImageDecodeError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode PNG ({exc})") from exc
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float32) / np.float32(255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    PILImage.fromarray(data).save(Path(path), format="PNG")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        kind = _canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        unknown = set(self.params) - set(DEFAULT_PARAMS[kind])
        if unknown:
            raise DegradationError(f"{kind}: unknown params {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[kind], **self.params}
        object.__setattr__(self, "params", merged)
        if not (0 <= int(self.seed) < 2**64) or int(self.seed) != self.seed:
            raise DegradationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        _check_params(kind, merged)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "DegradationSpec":
        extra = set(obj) - {"kind", "params", "seed"}
        if extra:
            raise DegradationError(f"unknown spec keys {sorted(extra)}")
        if "kind" not in obj:
            raise DegradationError("spec needs a 'kind'")
        return cls(obj["kind"], dict(obj.get("params", {})), int(obj.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        return cls.from_dict(json.loads(text))


def _canonical_kind(kind: str) -> str:
    lookup = {k.lower(): k for k in KINDS}
    lookup.update({"noise": "GaussianNoise", "gaussian_noise": "GaussianNoise",
                   "low_light": "LowLight", "lowlight": "LowLight"})
    key = str(kind).lower()
    if key not in lookup:
        raise DegradationError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")
    return lookup[key]


def _check_params(kind: str, p: dict[str, Any]) -> None:
    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise DegradationError(f"{kind}: {msg}")

    if kind == "GaussianNoise":
        need(1.0 <= p["sigma"] <= 100.0, f"sigma must be in [1, 100], got {p['sigma']}")
    elif kind == "Blur":
        need(p["mode"] in ("gaussian", "motion"), f"mode must be gaussian|motion, got {p['mode']!r}")
        if p["mode"] == "gaussian":
            need(p["sigma_b"] > 0, "sigma_b must be positive")
        else:
            need(p["length"] >= 1, "motion length must be >= 1")
    elif kind == "Haze":
        need(0.0 < p["t"] <= 1.0, f"t must be in (0, 1], got {p['t']}")
        need(0.0 <= p["A"] <= 1.0, f"A must be in [0, 1], got {p['A']}")
        if p["t_far"] is not None:
            need(0.0 < p["t_far"] <= 1.0, f"t_far must be in (0, 1], got {p['t_far']}")
    elif kind == "LowLight":
        need(0.0 < p["s"] <= 1.0, f"s must be in (0, 1], got {p['s']}")
        need(p["g"] > 0, f"g must be positive, got {p['g']}")
    elif kind == "Rain":
        need(p["count"] is None or p["count"] >= 0, "count must be >= 0")
        need(p["angle_min"] <= p["angle_max"], "angle_min > angle_max")
        need(0 < p["length_min"] <= p["length_max"], "bad length range")
        need(0 <= p["intensity_min"] <= p["intensity_max"], "bad intensity range")
        need(p["blur"] >= 1, "blur must be >= 1 px")


def apply_degradation(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Degrade ``clean`` according to ``spec``; the result is clamped to [0, 1]."""
    clean = validate_image(clean)
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "GaussianNoise":
        noise = rng.standard_normal(clean.shape) * (p["sigma"] / 255.0)
        out = clean.astype(np.float64) + noise
    elif spec.kind == "Blur":
        if p["mode"] == "gaussian":
            kernel = gaussian_kernel(p["sigma_b"])
        else:
            kernel = motion_kernel(p["length"], p["angle"])
        out = _filter_channels(clean.astype(np.float64), kernel)
    elif spec.kind == "Haze":
        t = _transmission(clean.shape[0], p["t"], p["t_far"])
        out = clean.astype(np.float64) * t + p["A"] * (1.0 - t)
    elif spec.kind == "LowLight":
        out = clean * np.float32(p["s"])
        if p["g"] != 1.0:
            out = np.power(out.astype(np.float64), p["g"])
    else:
        out = clean.astype(np.float64) + rain_layer(clean.shape[:2], p, rng)[:, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def motion_kernel(length: float, angle_deg: float) -> np.ndarray:
    """Normalized line kernel of ``length`` px; angle 0 is horizontal."""
    radius = int(math.ceil(length / 2.0)) + 1
    k = np.zeros((2 * radius + 1, 2 * radius + 1))
    theta = math.radians(angle_deg)
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, max(2, int(4 * length)))
    _splat(k, radius - ts * math.sin(theta), radius + ts * math.cos(theta), np.ones_like(ts))
    return k / k.sum()


def _filter_channels(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="reflect")
    return out


def _transmission(h: int, t: float, t_far: float | None) -> np.ndarray | float:
    if t_far is None:
        return t
    # top row is far (t_far), bottom row near (t)
    return np.linspace(t_far, t, h)[:, None, None]


def _splat(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray, weights: np.ndarray) -> None:
    """Bilinear splat of weighted points onto ``canvas`` (out-of-range dropped)."""
    h, w = canvas.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    for dy, dx, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.add.at(canvas, (yy[ok], xx[ok]), (weights * wt)[ok])


def rain_layer(shape: tuple[int, int], p: dict[str, Any], rng: np.random.Generator) -> np.ndarray:
    """Additive streak layer.

    Each streak is a straight segment whose angle is measured from the
    horizontal axis (90 degrees is vertical), motion-blurred along its own
    direction by a ``blur``-px box, which tapers both ends linearly.
    """
    h, w = shape
    count = p["count"] if p["count"] is not None else max(1, (h * w) // 150)
    layer = np.zeros((h, w))
    step = 0.5
    half = p["blur"] / 2.0
    for _ in range(int(count)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        theta = math.radians(rng.uniform(p["angle_min"], p["angle_max"]))
        length = rng.uniform(p["length_min"], p["length_max"])
        intensity = rng.uniform(p["intensity_min"], p["intensity_max"])
        ts = np.arange(-half, length + half + step / 2, step)
        # box(blur) convolved with the indicator of [0, length]
        prof = np.clip(np.minimum(ts + half, length + half - ts) / p["blur"], 0.0, 1.0)
        ts = ts - length / 2.0
        _splat(layer, cy - ts * math.sin(theta), cx + ts * math.cos(theta),
               prof * intensity * step)
    return layer


def sample_patches(img: np.ndarray, size: int, count: int, seed: int) -> list[np.ndarray]:
    """Square crops at positions drawn from ``seed``.

    Positions depend only on (image shape, size, count, seed), so a clean and
    a degraded image cropped with the same seed stay aligned.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    if size > min(h, w) or size < 1:
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    ys, xs = patch_corners(h, w, size, count, seed)
    return [img[y:y + size, x:x + size].copy() for y, x in zip(ys, xs)]


def patch_corners(h: int, w: int, size: int, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - size + 1, size=count)
    xs = rng.integers(0, w - size + 1, size=count)
    return ys, xs


def synthetic_clean(h: int, w: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """Procedural stand-in for a natural photo.

    Layers a smooth color field, random flat shapes with soft edges, a few
    oriented gratings and a 1/f fractal texture.  The texture matters: photos
    have a power-law spectrum, so their trailing singular values stay well
    above zero, and without it the spectrum tail is unrealistically empty.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, channels))
    base = ndimage.gaussian_filter(rng.standard_normal((h, w, channels)),
                                   sigma=(max(h, w) / 6, max(h, w) / 6, 0), mode="wrap")
    base = (base - base.mean()) / (base.std() + 1e-12)
    img[:] = 0.5 + 0.12 * base

    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0.05, 0.95, size=channels)
        alpha = rng.uniform(0.5, 0.9)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
            d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 - 1.0
            mask = expit(-8.0 * d)
        else:
            hy, hx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
            d = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
            mask = expit(-1.5 * d)
        img = img * (1 - alpha * mask[:, :, None]) + alpha * mask[:, :, None] * color

    for _ in range(int(rng.integers(1, 4))):
        freq = rng.uniform(0.05, 0.25)
        ang = rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.03, 0.08)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(0.2, 0.5) * max(h, w)
        env = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2)))
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(ang) + yy * math.sin(ang)) + phase)
        img += (amp * env * wave)[:, :, None]

    texture = 0.7 * _fractal(h, w, 1, rng) + 0.3 * _fractal(h, w, channels, rng)
    img += 0.2 * texture
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def _fractal(h: int, w: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-std noise with a 1/f amplitude spectrum."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    out = np.empty((h, w, channels))
    for c in range(channels):
        spec = (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) / f
        spec[0, 0] = 0.0
        t = np.fft.ifft2(spec).real
        out[:, :, c] = (t - t.mean()) / t.std()
    return out
