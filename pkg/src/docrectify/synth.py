"""Procedural distorted-page generator with exact ground-truth flow.

A clean page (white sheet, dark frame, horizontal ink stripes standing in
for text lines) is pulled through an analytic map ``h`` from distorted
coordinates to clean coordinates::

    h(p) = Hom(p + d(p))

where ``d`` sums sinusoidal folds and Gaussian bumps and ``Hom`` is a
projective map that shrinks and tilts the sheet inside the frame.  The
rectification flow is ``h`` inverted per pixel by fixed-point iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InversionError, SegmentationError, SpecError
from .rectifier import bilinear_warp

log = logging.getLogger(__name__)

GRADIENT_BOUND = 0.5


@dataclass(frozen=True)
class PageSpec:
    H: int = 96
    W: int = 96
    line_count: int = 6
    line_thickness: int = 3
    margin: int = 6
    ink: float = 0.15
    paper: float = 0.9
    border: int = 2
    border_inset: int = 3
    edge_softness: float = 0.7  # Gaussian sigma of the anti-aliasing ramp, pixels
    seed: int = 0

    def validate(self) -> None:
        for name in ("ink", "paper"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SpecError(f"{name} intensity {value} outside [0, 1]")
        if min(self.H, self.W) < 8:
            raise SpecError(f"page {self.H}x{self.W} too small")
        if self.line_count < 0 or self.line_thickness < 1 or self.border < 0:
            raise SpecError("line count, line thickness and border must be non-negative")
        top, bottom, left, right = self.text_box
        if bottom - top < 1 or right - left < 4:
            raise SpecError(f"margins leave no text area on a {self.H}x{self.W} page")
        if self.line_count and (bottom - top) / self.line_count < self.line_thickness + 1:
            raise SpecError(f"{self.line_count} lines of thickness {self.line_thickness} "
                            f"do not fit in {bottom - top} rows")

    @property
    def text_box(self) -> tuple[int, int, int, int]:
        edge = self.border_inset + self.border + self.margin
        return edge, self.H - edge, edge, self.W - edge


def line_rows(spec: PageSpec) -> list[tuple[int, int]]:
    """Half-open row ranges of the ink stripes."""
    top, bottom, _, _ = spec.text_box
    if spec.line_count == 0:
        return []
    pitch = (bottom - top) / spec.line_count
    out = []
    for i in range(spec.line_count):
        start = top + int(round(i * pitch + (pitch - spec.line_thickness) / 2))
        out.append((start, start + spec.line_thickness))
    return out


def gen_page(spec: PageSpec) -> np.ndarray:
    """Render the clean page as an ``[H, W, 3]`` float32 image."""
    spec.validate()
    page = np.full((spec.H, spec.W), spec.paper, dtype=np.float32)
    a, b = spec.border_inset, spec.border_inset + spec.border
    if spec.border:
        page[a:b, a:spec.W - a] = spec.ink
        page[spec.H - b:spec.H - a, a:spec.W - a] = spec.ink
        page[a:spec.H - a, a:b] = spec.ink
        page[a:spec.H - a, spec.W - b:spec.W - a] = spec.ink
    rng = np.random.default_rng(spec.seed)
    _, _, left, right = spec.text_box
    width = right - left
    for r0, r1 in line_rows(spec):
        # ragged right edge, occasionally a short closing line
        frac = rng.uniform(0.55, 1.0) if rng.random() < 0.35 else rng.uniform(0.85, 1.0)
        end = left + max(4, int(round(width * frac)))
        page[r0:r1, left:end] = spec.ink
    if spec.edge_softness > 0:
        # ramp the paper next to ink; ink pixels keep their exact value
        core = page == np.float32(spec.ink)
        blurred = ndimage.gaussian_filter(page.astype(np.float64), spec.edge_softness,
                                          mode="nearest")
        page = np.where(core, page, blurred).astype(np.float32)
    return np.repeat(page[..., None], 3, axis=2)


@dataclass(frozen=True)
class WarpSpec:
    zoom: float = 0.0  # page scale inside the frame is 1 / (1 + zoom)
    homography: float = 0.0  # max corner jitter, pixels
    fold_amp: tuple[float, float] = (0.0, 0.0)  # row / column displacement, pixels
    fold_freq: tuple[float, float] = (1.0, 1.0)  # periods across the frame
    bump_count: int = 0
    bump_amp: float = 0.0
    bump_sigma: float = 12.0
    seed: int = 0

    def gradient_bound(self, H: int, W: int) -> float:
        fold = (abs(self.fold_amp[0]) * 2 * math.pi * self.fold_freq[0] / W
                + abs(self.fold_amp[1]) * 2 * math.pi * self.fold_freq[1] / H)
        bump = self.bump_count * abs(self.bump_amp) / self.bump_sigma * math.exp(-0.5)
        return fold + bump

    def amplitude_bound(self) -> float:
        return abs(self.fold_amp[0]) + abs(self.fold_amp[1]) + self.bump_count * abs(self.bump_amp)


@dataclass
class WarpMap:
    """Analytic map from distorted coordinates to clean-page coordinates."""

    H: int
    W: int
    matrix: np.ndarray  # 3x3 homography acting on (u, v, 1)
    fold_amp: tuple[float, float]
    fold_freq: tuple[float, float]
    fold_phase: tuple[float, float]
    bump_centers: np.ndarray  # [K, 2]
    bump_vectors: np.ndarray  # [K, 2], amplitude times direction
    bump_sigma: float
    inverse_matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inverse_matrix = np.linalg.inv(self.matrix)

    def displacement(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        """Non-rigid part ``d`` at real coordinates (broadcasting arrays)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        du = self.fold_amp[0] * np.sin(2 * np.pi * self.fold_freq[0] * v / self.W
                                       + self.fold_phase[0])
        dv = self.fold_amp[1] * np.sin(2 * np.pi * self.fold_freq[1] * u / self.H
                                       + self.fold_phase[1])
        du = du + np.zeros_like(u)
        dv = dv + np.zeros_like(v)
        s2 = 2.0 * self.bump_sigma ** 2
        for (cu, cv), (au, av) in zip(self.bump_centers, self.bump_vectors):
            g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / s2)
            du = du + au * g
            dv = dv + av * g
        return du, dv

    def _project(self, M, u, v):
        den = M[2, 0] * u + M[2, 1] * v + M[2, 2]
        return ((M[0, 0] * u + M[0, 1] * v + M[0, 2]) / den,
                (M[1, 0] * u + M[1, 1] * v + M[1, 2]) / den)

    def __call__(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        du, dv = self.displacement(u, v)
        return self._project(self.matrix, u + du, v + dv)

    def unproject(self, u, v):
        return self._project(self.inverse_matrix, u, v)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four ``src`` points onto ``dst``."""
    A, rhs = [], []
    for (x, y), (X, Y) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -X * x, -X * y])
        A.append([0, 0, 0, x, y, 1, -Y * x, -Y * y])
        rhs.extend([X, Y])
    h = np.linalg.solve(np.array(A, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def gen_warp(spec: WarpSpec, H: int, W: int) -> WarpMap:
    bound = spec.gradient_bound(H, W)
    if bound >= GRADIENT_BOUND:
        raise SpecError(
            f"displacement gradient bound {bound:.3f} >= {GRADIENT_BOUND} "
            f"(fold_amp={spec.fold_amp}, bump_amp={spec.bump_amp}, "
            f"bump_count={spec.bump_count})")
    if spec.zoom < 0 or spec.homography < 0:
        raise SpecError(f"zoom {spec.zoom} and homography {spec.homography} must be >= 0")
    if spec.homography > min(H, W) / 8:
        raise SpecError(f"homography jitter {spec.homography} exceeds {min(H, W) / 8}")
    rng = np.random.default_rng(spec.seed)
    corners = np.array([[0, 0], [0, W - 1], [H - 1, 0], [H - 1, W - 1]], dtype=np.float64)
    jitter = rng.uniform(-1, 1, size=(4, 2)) * spec.homography
    if spec.zoom == 0 and spec.homography == 0:
        matrix = np.eye(3)
    else:
        center = np.array([(H - 1) / 2, (W - 1) / 2])
        matrix = _homography(corners, center + (1 + spec.zoom) * (corners - center) + jitter)
    phase = tuple(rng.uniform(0, 2 * np.pi, size=2))
    centers = rng.uniform([0, 0], [H - 1, W - 1], size=(spec.bump_count, 2))
    angles = rng.uniform(0, 2 * np.pi, size=spec.bump_count)
    vectors = spec.bump_amp * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return WarpMap(H, W, matrix, tuple(spec.fold_amp), tuple(spec.fold_freq), phase,
                   centers.reshape(-1, 2), vectors.reshape(-1, 2), spec.bump_sigma)


@dataclass
class Inversion:
    flow: np.ndarray  # [H, W, 2] displacement, float32
    residual: np.ndarray  # [H, W] |h(f(u, v)) - (u, v)| in pixels
    iterations: int


def invert_map(h: WarpMap, H: int, W: int, tol: float = 0.01, max_iter: int = 25,
               max_failure: float = 0.001) -> Inversion:
    """Per-pixel inverse of ``h`` sampled on the output grid.

    The projective part is inverted in closed form; the remaining
    ``x + d(x) = y`` is solved by the contraction ``x <- y - d(x)``.
    """
    u, v = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                       indexing="ij")
    yu, yv = h.unproject(u, v)
    xu, xv = yu.copy(), yv.copy()
    residual = np.full(u.shape, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        du, dv = h.displacement(xu, xv)
        xu, xv = yu - du, yv - dv
        hu, hv = h(xu, xv)
        residual = np.hypot(hu - u, hv - v)
        if residual.max() < tol:
            break
    failed = residual >= tol
    if failed.mean() > max_failure:
        raise InversionError(f"inversion did not converge on {failed.mean():.2%} of pixels, "
                             f"worst residual {residual.max():.4f} px")
    flow = np.stack([xu - u, xv - v], axis=-1).astype(np.float32)
    return Inversion(flow, residual, it)


def background_texture(H: int, W: int, seed: int, low: float = 0.02,
                       high: float = 0.25) -> np.ndarray:
    """Smooth seeded colour noise with values in ``[low, high]``."""
    rng = np.random.default_rng(seed)
    coarse = rng.random((6, 6, 3))
    smooth = ndimage.zoom(coarse, (H / 6, W / 6, 1), order=1, mode="nearest", grid_mode=True)
    return (low + (high - low) * smooth[:H, :W]).astype(np.float32)


@dataclass
class SyntheticSample:
    clean: np.ndarray  # [H, W, 3]
    distorted: np.ndarray  # [H, W, 3]
    mask: np.ndarray  # [H, W] in {0, 1}
    gt_flow: np.ndarray  # [H, W, 2] displacement, rectified -> distorted
    page: PageSpec
    warp: WarpSpec
    background_seed: int
    inversion_residual: float
    roundtrip_error: float

    @property
    def excluded(self) -> np.ndarray:
        return self.distorted * self.mask[..., None]

    def meta(self) -> dict:
        return {"page": asdict(self.page), "warp": asdict(self.warp),
                "background_seed": self.background_seed,
                "inversion_residual": self.inversion_residual,
                "roundtrip_error": self.roundtrip_error}


def interior(mask: np.ndarray, erode: int = 2) -> np.ndarray:
    """Mask eroded by ``erode`` pixels, treating the frame edge as outside."""
    if erode <= 0:
        return mask.astype(bool)
    return ndimage.binary_erosion(mask.astype(bool), iterations=erode, border_value=0)


def roundtrip_error(clean, distorted, mask, flow, erode: int = 2) -> float:
    """Mean absolute error between ``clean`` and the gt-rectified excluded image,
    over the eroded region of the rectified frame that maps onto the page."""
    excluded = (distorted * mask[..., None]).astype(np.float32)
    rect = bilinear_warp(excluded, flow).data
    covered = bilinear_warp(mask[..., None].astype(np.float32), flow).data[..., 0]
    region = interior(covered >= 0.999, erode)
    if not region.any():
        return float("inf")
    return float(np.abs(rect - clean)[region].mean())


ROUNDTRIP_TOL = 0.05


def _render(page: PageSpec, warp: WarpSpec, background_seed: int) -> SyntheticSample:
    H, W = page.H, page.W
    clean = gen_page(page)
    h = gen_warp(warp, H, W)
    u, v = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                       indexing="ij")
    qu, qv = h(u, v)
    coverage = ndimage.map_coordinates(np.ones((H, W)), [qu, qv], order=1,
                                       mode="grid-constant", cval=0.0)
    mask = (coverage >= 0.5).astype(np.float32)
    sampled = np.stack([ndimage.map_coordinates(clean[..., c].astype(np.float64), [qu, qv],
                                                order=1, mode="nearest")
                        for c in range(3)], axis=-1)
    background = background_texture(H, W, background_seed)
    distorted = np.where(mask[..., None] > 0, sampled, background).astype(np.float32)
    inv = invert_map(h, H, W)
    converged = inv.residual[np.isfinite(inv.residual)]
    err = roundtrip_error(clean, distorted, mask, inv.flow)
    return SyntheticSample(clean, distorted, mask, inv.flow, page, warp, background_seed,
                           float(converged.max()), err)


def gen_sample(page: PageSpec, warp: WarpSpec, background_seed: int,
               max_attempts: int = 8) -> SyntheticSample:
    """Render a sample; on a failed certificate retry with the next warp seed."""
    for attempt in range(max_attempts):
        try:
            sample = _render(page, warp, background_seed)
        except InversionError as exc:
            log.info("warp seed %d rejected: %s", warp.seed, exc)
        else:
            if sample.roundtrip_error < ROUNDTRIP_TOL:
                return sample
            log.info("warp seed %d rejected: round-trip error %.4f", warp.seed,
                     sample.roundtrip_error)
        warp = replace(warp, seed=warp.seed + 1)
    raise InversionError(f"no valid sample after {max_attempts} warp seeds")


def random_specs(corpus_seed: int, index: int, H: int = 96, W: int = 96,
                 severity: float = 1.0) -> tuple[PageSpec, WarpSpec, int]:
    """Per-sample specs drawn from a stream keyed by ``(corpus_seed, index)``."""
    rng = np.random.default_rng([corpus_seed, index])
    scale = min(H, W) / 96
    page = PageSpec(
        H=H, W=W,
        line_count=int(rng.integers(3, 7)),
        line_thickness=int(rng.integers(3, 5)),
        margin=int(round(rng.uniform(4, 8) * scale)),
        ink=float(rng.uniform(0.2, 0.4)),
        paper=float(rng.uniform(0.8, 0.95)),
        border=2,
        border_inset=3,
        seed=int(rng.integers(2**31)),
    )
    warp = WarpSpec(
        zoom=float(rng.uniform(0.1, 0.3)),
        homography=float(rng.uniform(0.0, 0.06) * min(H, W) * severity),
        fold_amp=(float(rng.uniform(-3, 3) * scale * severity),
                  float(rng.uniform(-2, 2) * scale * severity)),
        fold_freq=(float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.5, 1.5))),
        bump_count=int(rng.integers(0, 4)),
        bump_amp=float(rng.uniform(0.5, 3.0) * scale * severity),
        bump_sigma=float(rng.uniform(10, 22) * scale),
        seed=int(rng.integers(2**31)),
    )
    bound = warp.gradient_bound(H, W)
    if bound > 0.45:
        k = 0.45 / bound
        warp = replace(warp, fold_amp=(warp.fold_amp[0] * k, warp.fold_amp[1] * k),
                       bump_amp=warp.bump_amp * k)
    return page, warp, int(rng.integers(2**31))


def threshold_segment(image, threshold: float = 0.5) -> np.ndarray:
    """Bright-page segmentation: threshold, keep the largest blob, fill holes."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    # fill first: a dark frame printed near the sheet edge splits the paper
    # into an outer ring and an inner field
    fg = ndimage.binary_fill_holes(gray > threshold)
    labels, n = ndimage.label(fg)
    if n == 0:
        raise SegmentationError("no pixel above the threshold")
    sizes = np.bincount(labels.ravel())[1:]
    largest = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(largest).astype(np.float32)


def read_line_pattern(image, char_width: float = 4.0, dark: float = 0.5) -> str:
    """Transcribe the stripe layout of a page image into a string.

    Each ink band inside the central window becomes one run of ``x``
    characters, one per ``char_width`` pixels of ink; bands are separated by
    newlines.  This stands in for an OCR engine on synthetic pages.
    """
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    H, W = gray.shape
    r0, r1 = int(round(0.08 * H)), int(round(0.92 * H))
    c0, c1 = int(round(0.1 * W)), int(round(0.9 * W))
    window = gray[r0:r1, c0:c1] < dark
    counts = window.sum(axis=1)
    ink_rows = counts > 0.05 * window.shape[1]
    words = []
    labels, n = ndimage.label(ink_rows)
    for k in range(1, n + 1):
        band = counts[labels == k]
        words.append("x" * max(1, int(round(np.median(band) / char_width))))
    return "\n".join(words)
