"""Tessellation, edge-based tile QC, Macenko stain normalization and resizing."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .core import CohortManifest, SlideRecord, TileRecord, atomic_write_bytes
from .errors import (ConfigError, DegenerateStains, InsufficientTissue, ResolutionMismatch,
                     UnreadableImage)

log = logging.getLogger(__name__)

Image.MAX_IMAGE_PIXELS = None

# Widely used H&E reference basis (columns: hematoxylin, eosin).  The maxima
# are base-10 optical densities chosen so that eosin-dominant regions at
# reference intensity stay above the default background cut of 0.15 in every
# channel; with lighter eosin a refit cannot see the pure-eosin pixels.
REFERENCE_STAIN_MATRIX = np.array([[0.5626, 0.2159],
                                   [0.7201, 0.8012],
                                   [0.4062, 0.5581]])
REFERENCE_MAX_CONCENTRATIONS = np.array([0.9, 1.0])

MIN_TISSUE_PIXELS = 100


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2) or c.shape != (2,):
            raise ValueError("stain_matrix must be 3x2 and max_concentrations a 2-vector")
        if not np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6):
            raise ValueError("stain columns must have unit norm")
        if abs(float(np.dot(m[:, 0], m[:, 1]))) > 1.0 - 1e-9:
            raise ValueError("stain columns must be linearly independent")
        if not np.all(c > 0):
            raise ValueError("max_concentrations must be positive")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)


def reference_profile() -> StainProfile:
    return StainProfile(REFERENCE_STAIN_MATRIX / np.linalg.norm(REFERENCE_STAIN_MATRIX, axis=0),
                        REFERENCE_MAX_CONCENTRATIONS.copy())


@dataclass(frozen=True)
class PreprocessConfig:
    tile_native_px: int = 512
    target_mpp: float = 0.5
    output_px: int = 224
    od_background_threshold: float = 0.15
    angle_percentile: float = 1.0
    transmitted_light: int = 255
    concentration_percentile: float = 99.0
    edge_fraction_min: float = 0.02
    canny_low: float = 40.0
    canny_high: float = 100.0
    stain_fit: str = "tile"
    reference_profile: StainProfile = field(default_factory=reference_profile)

    def __post_init__(self):
        if not 0 < self.angle_percentile < 50:
            raise ConfigError("angle_percentile must lie in (0, 50)")
        if not 0 < self.od_background_threshold < 1:
            raise ConfigError("od_background_threshold must lie in (0, 1)")
        if not 0 < self.output_px <= self.tile_native_px:
            raise ConfigError("output_px must be positive and <= tile_native_px")
        if self.target_mpp <= 0:
            raise ConfigError("target_mpp must be positive")
        if self.stain_fit not in ("tile", "slide"):
            raise ConfigError("stain_fit must be 'tile' or 'slide'")


# --- geometry ------------------------------------------------------------------

@dataclass(frozen=True)
class TileGrid:
    """Cell layout of one slide: native stride and cell boundaries along each axis."""
    stride: float
    xs: tuple[int, ...]
    ys: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.xs) - 1, len(self.ys) - 1


def tile_grid(width: int, height: int, slide_mpp: float, cfg: PreprocessConfig) -> TileGrid:
    ratio = cfg.target_mpp / slide_mpp
    if not 0.25 <= ratio <= 4.0:
        raise ResolutionMismatch(
            f"slide at {slide_mpp} um/px needs a {ratio:.3g}x rescale to reach {cfg.target_mpp} um/px")
    stride = cfg.tile_native_px * ratio
    nx = int(math.floor(width / stride + 1e-9))
    ny = int(math.floor(height / stride + 1e-9))
    xs = tuple(int(math.floor(i * stride + 1e-9)) for i in range(nx + 1))
    ys = tuple(int(math.floor(j * stride + 1e-9)) for j in range(ny + 1))
    return TileGrid(stride, xs, ys)


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def tessellate(slide: SlideRecord, cfg: PreprocessConfig, image: np.ndarray | None = None,
               path: str | Path | None = None) -> list[tuple[TileRecord, np.ndarray]]:
    """Cut a slide into non-overlapping tiles at the target resolution.

    Returns (record, native pixels) pairs; pixels are ``tile_native_px`` square.
    Partial cells at the right and bottom borders are dropped.
    """
    if image is None:
        image = read_image(path if path is not None else slide.image_path)
    h, w = image.shape[:2]
    grid = tile_grid(w, h, slide.microns_per_pixel, cfg)
    n = cfg.tile_native_px
    out = []
    for j in range(len(grid.ys) - 1):
        for i in range(len(grid.xs) - 1):
            x0, x1 = grid.xs[i], grid.xs[i + 1]
            y0, y1 = grid.ys[j], grid.ys[j + 1]
            region = image[y0:y1, x0:x1]
            if region.shape[:2] != (n, n):
                region = _bilinear(region, n)
            rec = TileRecord(slide_id=slide.slide_id, x=x0, y=y0, native_size=x1 - x0,
                             output_size=cfg.output_px)
            out.append((rec, np.ascontiguousarray(region)))
    return out


# --- quality control -------------------------------------------------------------

def edge_fraction(tile: np.ndarray, cfg: PreprocessConfig) -> float:
    gray = cv2.cvtColor(np.ascontiguousarray(tile, dtype=np.uint8), cv2.COLOR_RGB2GRAY)
    edges = cv2.Canny(gray, cfg.canny_low, cfg.canny_high, L2gradient=True)
    return float(np.count_nonzero(edges)) / edges.size


def edge_filter(tile: np.ndarray, cfg: PreprocessConfig) -> tuple[bool, float]:
    frac = edge_fraction(tile, cfg)
    return frac >= cfg.edge_fraction_min, frac


# --- Macenko ---------------------------------------------------------------------

def optical_density(pixels: np.ndarray, i0: float) -> np.ndarray:
    """Base-10 optical density of an (..., 3) array."""
    return -np.log10((np.asarray(pixels, dtype=np.float64) + 1.0) / i0)


def nnls2(stains: np.ndarray, od: np.ndarray) -> np.ndarray:
    """Nonnegative least squares for a two-column basis, vectorized over pixels.

    ``stains`` is 3x2, ``od`` is Nx3; returns Nx2 concentrations.  With two
    unknowns the active set is one of four, so each is tried in closed form.
    """
    a, b = stains[:, 0], stains[:, 1]
    gram = stains.T @ stains
    rhs = od @ stains
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    both = np.stack([(gram[1, 1] * rhs[:, 0] - gram[0, 1] * rhs[:, 1]) / det,
                     (gram[0, 0] * rhs[:, 1] - gram[0, 1] * rhs[:, 0]) / det], axis=1)
    only_a = np.maximum(rhs[:, 0] / gram[0, 0], 0.0)
    only_b = np.maximum(rhs[:, 1] / gram[1, 1], 0.0)

    c = np.zeros_like(both)
    ok = (both >= 0).all(axis=1)
    c[ok] = both[ok]
    rest = ~ok
    if rest.any():
        r = od[rest]
        ra = r - only_a[rest, None] * a
        rb = r - only_b[rest, None] * b
        use_a = np.einsum("ij,ij->i", ra, ra) <= np.einsum("ij,ij->i", rb, rb)
        sub = np.zeros((r.shape[0], 2))
        sub[use_a, 0] = only_a[rest][use_a]
        sub[~use_a, 1] = only_b[rest][~use_a]
        c[rest] = sub
    return c


def _tissue_od(pixels: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    od = optical_density(pixels.reshape(-1, 3), cfg.transmitted_light)
    return od[(od >= cfg.od_background_threshold).all(axis=1)]


def fit_stain_matrix(od_tissue: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    if od_tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"only {od_tissue.shape[0]} pixels exceed OD {cfg.od_background_threshold}; "
            f"need {MIN_TISSUE_PIXELS}")
    cov = np.cov(od_tissue, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    lead, second = evals[2], evals[1]
    if not lead > 0 or second < 1e-8 * lead:
        raise DegenerateStains(f"optical densities span fewer than two directions "
                               f"(eigenvalues {lead:.3g}, {second:.3g})")
    v1, v2 = evecs[:, 2], evecs[:, 1]
    # Orient the leading axis along the (positive) mean OD so angles stay in (-pi/2, pi/2).
    if v1.sum() < 0:
        v1 = -v1
    if v2[0] < 0:
        v2 = -v2
    plane = np.stack([v1, v2], axis=1)
    proj = od_tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [cfg.angle_percentile, 100.0 - cfg.angle_percentile])
    s_lo = plane @ np.array([math.cos(lo), math.sin(lo)])
    s_hi = plane @ np.array([math.cos(hi), math.sin(hi)])
    s_lo /= np.linalg.norm(s_lo)
    s_hi /= np.linalg.norm(s_hi)
    h, e = (s_lo, s_hi) if s_lo[0] > s_hi[0] else (s_hi, s_lo)
    return np.stack([h, e], axis=1)


def macenko_fit(pixels: np.ndarray, cfg: PreprocessConfig) -> StainProfile:
    """Estimate the stain basis and robust concentration maxima of an RGB image."""
    od_tissue = _tissue_od(np.asarray(pixels), cfg)
    stains = fit_stain_matrix(od_tissue, cfg)
    od_all = optical_density(np.asarray(pixels).reshape(-1, 3), cfg.transmitted_light)
    conc = nnls2(stains, od_all)
    cmax = np.percentile(conc, cfg.concentration_percentile, axis=0)
    if not np.all(cmax > 0):
        raise InsufficientTissue("a stain has zero concentration at the configured percentile")
    return StainProfile(stains, cmax)


def macenko_normalize(pixels: np.ndarray, source: StainProfile | None,
                      cfg: PreprocessConfig) -> np.ndarray:
    """Map an RGB image onto the reference stain appearance; returns uint8."""
    pixels = np.asarray(pixels)
    if source is None:
        source = macenko_fit(pixels, cfg)
    ref = cfg.reference_profile
    i0 = cfg.transmitted_light
    od = optical_density(pixels.reshape(-1, 3), i0)
    conc = nnls2(source.stain_matrix, od)
    conc *= ref.max_concentrations / source.max_concentrations
    out = i0 * np.power(10.0, -(conc @ ref.stain_matrix.T)) - 1.0
    out = np.clip(np.rint(out), 0, min(i0, 255))
    return out.reshape(pixels.shape).astype(np.uint8)


def _bilinear(pixels: np.ndarray, px: int) -> np.ndarray:
    # float path: cv2's 8-bit fixed-point kernel adds +-1 jitter between identical rows
    out = cv2.resize(np.asarray(pixels, dtype=np.float32), (px, px), interpolation=cv2.INTER_LINEAR)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize(pixels: np.ndarray, output_px: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if h != w:
        raise ValueError(f"resize expects a square tile, got {w}x{h}")
    if h == output_px:
        return pixels.copy()
    return _bilinear(pixels, output_px)


# --- stage driver ----------------------------------------------------------------

def encode_png(pixels: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))
    if not ok:
        raise UnreadableImage("PNG encoding failed")
    return buf.tobytes()


def _process_tile(rec: TileRecord, native: np.ndarray, profile: StainProfile | None,
                  cfg: PreprocessConfig, out_dir: Path | None):
    passed, frac = edge_filter(native, cfg)
    if passed:
        try:
            normed = macenko_normalize(native, profile, cfg)
        except (InsufficientTissue, DegenerateStains) as exc:
            log.debug("tile %s dropped: %s", rec.tile_id, exc)
            passed = False
    tile_path = ""
    if passed:
        small = resize(normed, cfg.output_px)
        if out_dir is not None:
            tile_path = str(out_dir / f"{rec.tile_id}.png")
            atomic_write_bytes(tile_path, encode_png(small))
    return TileRecord(slide_id=rec.slide_id, x=rec.x, y=rec.y, native_size=rec.native_size,
                      output_size=cfg.output_px, qc_edge_fraction=frac, qc_pass=passed,
                      tile_path=tile_path)


def slide_profile(tiles: list[tuple[TileRecord, np.ndarray]], cfg: PreprocessConfig) -> StainProfile:
    """One stain profile from the QC-passing tiles of a slide."""
    keep = [px for _, px in tiles if edge_filter(px, cfg)[0]]
    if not keep:
        raise InsufficientTissue("no tile of the slide passes edge QC")
    return macenko_fit(np.concatenate([k.reshape(-1, 3) for k in keep]), cfg)


def preprocess_slide(slide: SlideRecord, cfg: PreprocessConfig, out_dir: str | Path | None,
                     image_path: str | Path | None = None, threads: int = 1) -> list[TileRecord]:
    tiles = tessellate(slide, cfg, path=image_path)
    out = Path(out_dir) if out_dir is not None else None
    profile = None
    if cfg.stain_fit == "slide":
        try:
            profile = slide_profile(tiles, cfg)
        except (InsufficientTissue, DegenerateStains) as exc:
            log.warning("slide %s: no slide-level stain profile (%s)", slide.slide_id, exc)
            return [TileRecord(slide_id=r.slide_id, x=r.x, y=r.y, native_size=r.native_size,
                               output_size=cfg.output_px, qc_edge_fraction=edge_fraction(px, cfg))
                    for r, px in tiles]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda t: _process_tile(t[0], t[1], profile, cfg, out), tiles))
    else:
        results = [_process_tile(r, px, profile, cfg, out) for r, px in tiles]
    return results


def preprocess_cohort(manifest: CohortManifest, cfg: PreprocessConfig, out_dir: str | Path,
                      threads: int = 1) -> list[TileRecord]:
    records = []
    for slide in manifest.slides:
        recs = preprocess_slide(slide, cfg, out_dir, image_path=manifest.resolve(slide),
                                threads=threads)
        log.info("slide %s: %d tiles, %d pass QC", slide.slide_id, len(recs),
                 sum(r.qc_pass for r in recs))
        records.extend(recs)
    return records
