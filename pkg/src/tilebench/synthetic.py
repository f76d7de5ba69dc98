"""Synthetic H&E-like images and demo cohorts.

Images are composed in optical-density space from two stain vectors and
per-pixel concentration fields, so the generator always knows the ground
truth a stain estimator should recover.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .core import CohortManifest, SlideRecord, SplitRole, Task, write_manifest
from .preprocess import REFERENCE_STAIN_MATRIX

HE_STAINS = REFERENCE_STAIN_MATRIX / np.linalg.norm(REFERENCE_STAIN_MATRIX, axis=0)


def compose_he(conc: np.ndarray, stains: np.ndarray = HE_STAINS, i0: int = 255,
               dtype=np.uint8) -> np.ndarray:
    """RGB image from an (H, W, 2) concentration field: v = i0 * 10**(-S c) - 1."""
    od = np.asarray(conc, dtype=np.float64) @ np.asarray(stains, dtype=np.float64).T
    px = i0 * np.power(10.0, -od) - 1.0
    if dtype == np.uint8:
        return np.clip(np.rint(px), 0, 255).astype(np.uint8)
    return np.clip(px, 0, i0)


def jitter_stains(rng: np.random.Generator, strength: float = 0.08,
                  base: np.ndarray = HE_STAINS) -> np.ndarray:
    s = base + rng.normal(0.0, strength, size=base.shape)
    s = np.abs(s)
    return s / np.linalg.norm(s, axis=0)


def _blobs(size: int, rng: np.random.Generator, count: int, radius: float,
           elongation: float = 1.0) -> np.ndarray:
    """Binary mask of ``count`` filled ellipses with jittered radii."""
    canvas = np.zeros((size, size), np.uint8)
    centers = rng.integers(0, size, size=(count, 2))
    radii = np.maximum(1.0, rng.normal(radius, radius * 0.15, size=count))
    angles = rng.uniform(0, 180, size=count)
    for (cx, cy), r, a in zip(centers, radii, angles):
        axes = (max(1, int(round(r * elongation))), max(1, int(round(r))))
        cv2.ellipse(canvas, (int(cx), int(cy)), axes, float(a), 0, 360, 1, -1)
    return canvas.astype(bool)


def tissue_tile(kind: str, size: int, rng: np.random.Generator, positive: bool = False,
                scale: float = 1.0, matrix_eosin: float = 0.35) -> np.ndarray:
    """(size, size, 2) hematoxylin/eosin concentrations for one tissue patch.

    ``kind`` is one of ``tumor``, ``stroma``, ``background``.  Nuclei are
    painted over an eosin-rich matrix, so each patch holds near-pure regions
    of both stains.  For tumor patches ``positive`` switches the morphology:
    large vesicular nuclei among dense small lymphocytes for positives,
    small crowded nuclei otherwise.  ``matrix_eosin`` sets the eosin level
    of cytoplasm and stroma; around 0.9 every tissue pixel clears the
    default Macenko background cut, 0.35 gives realistic pale cytoplasm.
    """
    area = (size / 512.0) ** 2
    k = size / 512.0
    if kind == "background":
        h = np.abs(rng.normal(0.0, 0.004, size=(size, size)))
        e = np.abs(rng.normal(0.0, 0.004, size=(size, size)))
    elif kind == "stroma":
        fib = rng.normal(0, 1, size=(size, size)).astype(np.float32)
        fib = cv2.GaussianBlur(fib, (0, 0), sigmaX=10, sigmaY=1.2)
        fib = (fib - fib.min()) / (np.ptp(fib) + 1e-9)
        e = matrix_eosin + 1.0 * fib
        h = np.full((size, size), 0.1)
        nuc = _blobs(size, rng, int(60 * area), 5 * k, elongation=3.0)
        h[nuc], e[nuc] = 1.2, 0.15
    elif kind == "tumor":
        e = matrix_eosin + 0.2 * rng.random((size, size))
        h = np.full((size, size), 0.1)
        if positive:
            nuc = _blobs(size, rng, int(120 * area), 13 * k)
            h[nuc], e[nuc] = 0.8, 0.12
            lym = _blobs(size, rng, int(300 * area), 3.5 * k)
            h[lym], e[lym] = 1.3, 0.08
        else:
            nuc = _blobs(size, rng, int(480 * area), 6.5 * k)
            h[nuc], e[nuc] = 1.2, 0.15
    else:
        raise ValueError(f"unknown tissue kind {kind!r}")
    conc = np.stack([h, e], axis=-1).astype(np.float32)
    conc = cv2.GaussianBlur(conc, (0, 0), 1.0)
    return np.clip(conc, 0.0, None).astype(np.float64) * scale


def tissue_image(kind: str, size: int, rng: np.random.Generator, positive: bool = False,
                 stains: np.ndarray = HE_STAINS, scale: float = 1.0,
                 matrix_eosin: float = 0.35) -> np.ndarray:
    return compose_he(tissue_tile(kind, size, rng, positive, scale, matrix_eosin), stains)


def make_slide(rng: np.random.Generator, layout: list[list[str]], positive: bool,
               tile_px: int = 512, stains: np.ndarray = HE_STAINS, scale: float = 1.0) -> np.ndarray:
    """Assemble a slide image from a grid of tissue kinds (rows of cells)."""
    rows = []
    for row in layout:
        rows.append(np.concatenate([tissue_tile(k, tile_px, rng, positive, scale) for k in row], axis=1))
    return compose_he(np.concatenate(rows, axis=0), stains)


DEMO_LAYOUT = [["tumor", "tumor", "stroma"],
               ["tumor", "tumor", "background"]]


def write_demo_cohort(root: str | Path, n_train: int = 60, n_test: int = 30, seed: int = 0,
                      layout: list[list[str]] | None = None, tile_px: int = 512,
                      extra_slide_every: int = 10) -> dict[str, Path]:
    """Write slides plus a training and an external manifest under ``root``.

    Half of the patients in each cohort are MSI-H.  The external cohort uses a
    different stain jitter and concentration scale, like a second scanning
    site.  Every ``extra_slide_every``-th training patient gets a second slide
    so the per-patient slide choice has work to do.
    """
    root = Path(root)
    slides_dir = root / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    layout = layout or DEMO_LAYOUT
    rng = np.random.default_rng(seed)
    paths = {}
    for role, n, site_scale in (("train", n_train, 1.0), ("test", n_test, 0.8)):
        site_stains = jitter_stains(rng, 0.05)
        records = []
        for i in range(n):
            pid = f"{role}-P{i:03d}"
            positive = i % 2 == 1
            n_slides = 2 if (role == "train" and extra_slide_every and i % extra_slide_every == 0) else 1
            for k in range(n_slides):
                sid = f"{pid}-S{k}"
                stains = jitter_stains(rng, 0.03, site_stains)
                img = make_slide(rng, layout, positive, tile_px, stains,
                                 site_scale * rng.uniform(0.85, 1.15))
                rel = f"slides/{sid}.png"
                ok, buf = cv2.imencode(".png", cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
                (root / rel).write_bytes(buf.tobytes())
                records.append(SlideRecord(slide_id=sid, patient_id=pid, cohort=f"demo-{role}",
                                           image_path=rel, microns_per_pixel=0.5,
                                           labels={"MSI": int(positive)}))
        manifest = CohortManifest(task=Task.MSI, slides=tuple(records),
                                  split_role=SplitRole.TRAIN if role == "train" else SplitRole.EXTERNAL_TEST)
        path = root / f"{role}_manifest.jsonl"
        write_manifest(manifest, path)
        paths[role] = path
    (root / "demo.json").write_text(json.dumps({"seed": seed, "n_train": n_train, "n_test": n_test}))
    return paths
