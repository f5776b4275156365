"""Homogeneous image transforms and scaling.

Images are (H, W, 3) float32 arrays in [0, 1]; grayscale and sketch
variants keep three identical planes. Every transform maps [0, 1] into
[0, 1], and every random transform is a pure function of (image, rng).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

AUGMENT_KINDS = ("posterize", "equalize", "solarize", "contrast", "invert")

# visible-image channels plus the two derived modalities
CHANNEL_TYPES = ("R", "G", "B", "gray", "sketch")


def as_image(x):
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    return arr


def to_grayscale3(x):
    """Luma grayscale (0.299/0.587/0.114) replicated to three planes."""
    x = as_image(x)
    g = (x.astype(np.float64) @ GRAY_WEIGHTS).astype(np.float32)
    g = np.clip(g, 0.0, 1.0)
    return np.repeat(g[:, :, None], 3, axis=2)


def to_sketch(x, sigma=2.0):
    """Pencil-sketch rendering: invert grayscale, blur, color-dodge blend."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = as_image(x)
    g = to_grayscale3(x)[:, :, 0].astype(np.float64)
    blurred = ndimage.gaussian_filter(1.0 - g, sigma=sigma)
    s = np.minimum(1.0, g / (1.0 - blurred + 1e-3))
    s = np.clip(s, 0.0, 1.0).astype(np.float32)
    return np.repeat(s[:, :, None], 3, axis=2)


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"degenerate rect {self}")

    def fits(self, h, w):
        return (0 <= self.top and 0 <= self.left
                and self.top + self.height <= h and self.left + self.width <= w)

    @property
    def slices(self):
        return (slice(self.top, self.top + self.height),
                slice(self.left, self.left + self.width))

    @property
    def area(self):
        return self.height * self.width


RECT_AREA_RANGE = (0.02, 0.4)
RECT_ASPECT_RANGE = (0.3, 3.33)


def rand_rect(rng, h, w, tries=100):
    """Sample a rectangle with area fraction in [0.02, 0.4] and aspect in [0.3, 3.33].

    Resamples until the realized (post-rounding) area fraction is inside
    the range and the rect fits; falls back to a centered quarter-area
    rect after `tries` attempts.
    """
    if h < 8 or w < 8:
        raise ValueError(f"image too small for rect sampling: {h}x{w}")
    lo, hi = RECT_AREA_RANGE
    for _ in range(tries):
        target = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(*RECT_ASPECT_RANGE)  # height / width
        rh = int(round(np.sqrt(target * aspect)))
        rw = int(round(np.sqrt(target / aspect)))
        if rh < 1 or rw < 1 or rh > h or rw > w:
            continue
        if not (lo <= (rh * rw) / (h * w) <= hi):
            continue
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        return Rect(top, left, rh, rw)
    rh, rw = max(1, h // 2), max(1, w // 2)
    return Rect((h - rh) // 2, (w - rw) // 2, rh, rw)


def _paste(x, homogeneous, rect):
    out = x.copy()
    out[rect.slices] = homogeneous[rect.slices]
    return out


def local_grayscale_transform(x, rng):
    """Replace a random rectangle with its grayscale values; the rest is untouched."""
    x = as_image(x)
    gray = to_grayscale3(x)
    rect = rand_rect(rng, x.shape[0], x.shape[1])
    return _paste(x, gray, rect)


def local_homogeneous_transform(x, mode, rng):
    """Local paste of a homogeneous variant: grayscale, sketch, fused or augmented."""
    x = as_image(x)
    if mode == "grayscale":
        homogeneous = to_grayscale3(x)
    elif mode == "sketch":
        homogeneous = to_sketch(x)
    elif mode == "fused":
        homogeneous = channel_fusion(x, rng)
    elif mode == "augmented":
        homogeneous = apply_augment(x, None, rng)
    else:
        raise ValueError(f"unknown homogeneous mode {mode!r}")
    rect = rand_rect(rng, x.shape[0], x.shape[1])
    return _paste(x, homogeneous, rect)


def _channel_plane(x, gray, sketch, kind):
    if kind == "R":
        return x[:, :, 0]
    if kind == "G":
        return x[:, :, 1]
    if kind == "B":
        return x[:, :, 2]
    if kind == "gray":
        return gray[:, :, 0]
    return sketch[:, :, 0]


def channel_fusion(x, rng):
    """Rebuild a 3-plane image from 1-2 visible channels plus gray/sketch planes.

    Channel types never repeat, so the draw lands on one of the 54
    constrained arrangements of `enumerate_cf_variants`.
    """
    x = as_image(x)
    n_visible = int(rng.integers(1, 3))
    visible = [("R", "G", "B")[i] for i in rng.choice(3, size=n_visible, replace=False)]
    if n_visible == 1:
        derived = ["gray", "sketch"]
    else:
        derived = ["gray" if rng.random() < 0.5 else "sketch"]
    chosen = visible + derived
    order = rng.permutation(3)
    arrangement = [chosen[i] for i in order]

    gray = to_grayscale3(x)
    sketch = to_sketch(x)
    planes = [_channel_plane(x, gray, sketch, kind) for kind in arrangement]
    return np.stack(planes, axis=2).astype(np.float32)


def enumerate_cf_variants():
    """All ordered 3-slot arrangements of the 5 channel types, no repeats.

    Returns (arrangement, constrained) pairs; `constrained` flags the
    arrangements with exactly 1 or 2 visible (R/G/B) channels.
    """
    variants = []
    for arrangement in itertools.permutations(CHANNEL_TYPES, 3):
        n_visible = sum(1 for c in arrangement if c in ("R", "G", "B"))
        variants.append((arrangement, 1 <= n_visible <= 2))
    return variants


def apply_augment(x, kind, rng=None):
    """One photometric augmentation; kind=None draws uniformly from the set."""
    x = as_image(x)
    if kind is None:
        if rng is None:
            raise ValueError("kind=None requires an rng to draw from")
        kind = AUGMENT_KINDS[int(rng.integers(0, len(AUGMENT_KINDS)))]
    if kind == "posterize":
        q = (np.floor(x.astype(np.float64) * 255.0).astype(np.int64) & 0xF0)
        return (q / 255.0).astype(np.float32)
    if kind == "equalize":
        return _equalize(x)
    if kind == "solarize":
        return np.where(x >= 0.5, 1.0 - x, x).astype(np.float32)
    if kind == "contrast":
        mean = float((x.astype(np.float64) @ GRAY_WEIGHTS).mean())
        return np.clip(mean + 1.5 * (x.astype(np.float64) - mean), 0.0, 1.0).astype(np.float32)
    if kind == "invert":
        return (1.0 - x).astype(np.float32)
    raise ValueError(f"unknown augment kind {kind!r}")


def _equalize(x):
    # classic 256-bin histogram equalization, per channel
    out = np.empty_like(x)
    q = np.clip(np.floor(x.astype(np.float64) * 255.0), 0, 255).astype(np.int64)
    for c in range(3):
        hist = np.bincount(q[:, :, c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if nonzero.size <= 1:
            out[:, :, c] = x[:, :, c]
            continue
        step = (hist.sum() - nonzero[-1]) // 255
        if step == 0:
            out[:, :, c] = x[:, :, c]
            continue
        lut = (np.cumsum(hist) - hist) + step // 2
        lut = np.clip(lut // step, 0, 255)
        out[:, :, c] = (lut[q[:, :, c]] / 255.0).astype(np.float32)
    return out


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling with half-pixel-centered coordinates.

    Uses the lerp form v0 + t*(v1 - v0) so constant images are exact
    fixed points.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    x = as_image(x)
    h, w = x.shape[:2]
    if (out_h, out_w) == (h, w):
        return x.copy()

    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(src_y), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(src_x), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = np.clip(src_y - y0, 0.0, 1.0)[:, None, None]
    tx = np.clip(src_x - x0, 0.0, 1.0)[None, :, None]

    xd = x.astype(np.float64)
    tl = xd[y0][:, x0]
    tr = xd[y0][:, x1]
    bl = xd[y1][:, x0]
    br = xd[y1][:, x1]
    top = tl + tx * (tr - tl)
    bot = bl + tx * (br - bl)
    out = top + ty * (bot - top)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class ScalingPlan:
    """Resize chain applied before the final resize to the network input size."""

    steps: tuple = ()
    final: tuple = (64, 32)
    jitter: float = 0.0  # relative size jitter per step, 0 disables

    @staticmethod
    def circuitous(input_hw, jitter=0.0):
        """Default down-up-down chain, keeping the reference 110/256 and 50/128 ratios."""
        h, w = input_hw
        p1 = (_round_half_up(h * 110.0 / 256.0), _round_half_up(w * 50.0 / 128.0))
        p2 = (2 * p1[0], 2 * p1[1])
        return ScalingPlan(steps=(p1, p2, p1), final=(h, w), jitter=jitter)

    @staticmethod
    def single_resize(input_hw):
        """One down-resize and back: the single-step baseline chain."""
        h, w = input_hw
        p1 = (_round_half_up(h * 110.0 / 256.0), _round_half_up(w * 50.0 / 128.0))
        return ScalingPlan(steps=(p1,), final=(h, w))

    def to_dict(self):
        return {"steps": [list(s) for s in self.steps],
                "final": list(self.final), "jitter": self.jitter}

    @staticmethod
    def from_dict(d):
        return ScalingPlan(steps=tuple(tuple(s) for s in d["steps"]),
                           final=tuple(d["final"]), jitter=float(d.get("jitter", 0.0)))


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def circuitous_scale(x, plan, rng=None):
    """Run the resize chain, ending at the network input size."""
    x = as_image(x)
    for (h, w) in plan.steps:
        if h < 1 or w < 1:
            raise ValueError(f"invalid plan size {h}x{w}")
        if plan.jitter > 0.0 and rng is not None:
            h = max(1, _round_half_up(h * (1.0 + rng.uniform(-plan.jitter, plan.jitter))))
            w = max(1, _round_half_up(w * (1.0 + rng.uniform(-plan.jitter, plan.jitter))))
        x = bilinear_resize(x, h, w)
    return bilinear_resize(x, plan.final[0], plan.final[1])
