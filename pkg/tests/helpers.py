"""Fixture builders and brute-force oracles shared by the test modules."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import numpy as np

from tilebench.core import TileRecord
from tilebench.synthetic import HE_STAINS, jitter_stains

FOUR_SCORES = (0.1, 0.4, 0.35, 0.8)
FOUR_LABELS = (0, 0, 1, 1)


# --- metric oracles ------------------------------------------------------------------

def pairwise_auroc(scores, labels) -> Fraction:
    """O(n^2) Mann-Whitney count; ties score a half, kept exact as a rational."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    doubled = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return Fraction(doubled, 2 * len(pos) * len(neg))


def cutoff_ap(scores, labels) -> Fraction:
    """Average precision by enumerating every distinct threshold, exactly."""
    n_pos = sum(labels)
    total = Fraction(0)
    prev_tp = 0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        k = sum(1 for s in scores if s >= t)
        total += Fraction(tp - prev_tp, n_pos) * Fraction(tp, k)
        prev_tp = tp
    return total


def random_instance(rng: np.random.Generator, max_n: int = 200):
    n = int(rng.integers(2, max_n + 1))
    levels = int(rng.integers(2, 12)) if rng.random() < 0.5 else None
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    if levels is not None:
        scores = rng.integers(0, levels, n) / levels  # heavy ties
    else:
        scores = rng.random(n)
    return scores.tolist(), labels.tolist()


# --- stain fixtures ----------------------------------------------------------------

def plausible_stains(rng: np.random.Generator, strength: float = 0.08, floor: float = 0.2) -> np.ndarray:
    """Jittered H&E basis whose every OD component clears the background gate."""
    while True:
        s = jitter_stains(rng, strength)
        if s.min() >= floor:
            return s


def concentration_field(rng: np.random.Generator, stains: np.ndarray = HE_STAINS, n: int = 128,
                        beta: float = 0.15, margin: float = 1.5) -> np.ndarray:
    """(n, n, 2) field of background, pure-H, pure-E and mixed pixels.

    Pure-stain concentrations start at ``margin`` times the level where every
    OD channel clears ``beta``, so scaling the field by up to ``margin`` keeps
    the same pixels in the tissue set.
    """
    floor = beta / stains.min(axis=0) * margin
    kind = rng.integers(0, 4, n * n)
    c = np.zeros((n * n, 2))
    for k, col in ((1, 0), (2, 1)):
        m = kind == k
        c[m, col] = rng.uniform(floor[col], floor[col] * 1.3, m.sum())
    m = kind == 3
    c[m] = rng.uniform(floor * 0.7, floor * 0.9, (m.sum(), 2))
    return c.reshape(n, n, 2)


def angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    cos = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


# --- tessellation geometry: (width, height, um/px, expected tile origins) ---------------

GEOMETRY = [
    (1024, 1024, 0.5, [(0, 0), (512, 0), (0, 512), (512, 512)]),
    (1200, 900, 0.5, [(0, 0), (512, 0)]),
    (2048, 2048, 0.25, [(0, 0), (1024, 0), (0, 1024), (1024, 1024)]),
    (511, 4096, 0.5, []),
    (1536, 600, 1.0, [(0, 0), (256, 0), (512, 0), (768, 0), (1024, 0), (1280, 0),
                      (0, 256), (256, 256), (512, 256), (768, 256), (1024, 256), (1280, 256)]),
]


# --- tiles and manifests --------------------------------------------------------------

TUM = (0.0,) * 8 + (1.0,)
STR = (0.0,) * 7 + (1.0, 0.0)


def tum_tiles(slide_id: str, n: int, probs=TUM) -> list[TileRecord]:
    return [TileRecord(slide_id, 512 * i, 0, 512, 224, 0.1, True, probs) for i in range(n)]


def write_manifest_lines(path: Path, slides: list[dict], task: str = "MSI", role: str = "train") -> Path:
    lines = [json.dumps({"task": task, "split_role": role})] + [json.dumps(s) for s in slides]
    path.write_text("\n".join(lines) + "\n")
    return path


def slide_dict(i: int, patient: str | None = None, label: int | None = None, mpp: float = 0.5,
               image: str = "") -> dict:
    d = {"slide_id": f"S{i:03d}", "patient_id": patient or f"P{i:03d}", "cohort": "fx",
         "image_path": image, "microns_per_pixel": mpp, "labels": {}}
    if label is not None:
        d["labels"]["MSI"] = label
    return d


# --- gradient-check cases ---------------------------------------------------------------

def block_cases():
    """(name, module factory, input shape) for every block family, small enough for per-scalar differences."""
    from tilebench.nn import blocks as B

    return [
        ("residual", lambda: B.BasicBlock(3, 4, 2), (2, 3, 6, 6)),
        ("bottleneck", lambda: B.Bottleneck(4, 2, 1), (2, 4, 5, 5)),
        ("inverted_residual", lambda: B.InvertedResidual(3, 3, 1, 2), (2, 3, 5, 5)),
        ("mbconv", lambda: B.MBConv(3, 4, 2, 2, 5), (2, 3, 6, 6)),
        ("vit_stack", lambda: B.ViTEncoder(8, 4, 8, 2, 2, 16), (2, 3, 8, 8)),
        ("swin_stage", lambda: B.SwinStage(4, 2, 2, 2, 4, 2.0, merge=True), (2, 4, 4, 4)),
        ("bilstm2d", lambda: B.BiLSTM2D(3, 2, 4), (2, 3, 4, 3)),
        ("sequencer_block", lambda: B.Sequencer2DBlock(4, 2, 2.0), (1, 3, 3, 4)),
        ("mobilevit_block", lambda: B.MobileViTBlock(3, 4, 1, 2, 2, 2.0), (2, 3, 4, 4)),
        ("cmt_stem", lambda: B.CMTStem(3), (2, 3, 6, 6)),
        ("cmt_stage", lambda: B.CMTStage(3, 4, 1, 2, 2, 2, 2.0), (2, 3, 4, 4)),
    ]


def block_gradcheck(factory, shape, draw: int) -> float:
    """Worst relative error for one random draw of parameters, input and probe."""
    import torch

    from tilebench.nn.gradcheck import module_gradcheck

    torch.manual_seed(1000 + draw)
    module = factory()
    x = torch.randn(*shape, dtype=torch.float64)
    return module_gradcheck(module, [x], eps=1e-6, seed=draw)


def binormal_cohort(rng: np.random.Generator, n: int, shift: float = 1.0):
    """Balanced-ish cohort whose positive scores sit ``shift`` SDs above the negatives."""
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.normal(0.0, 1.0, n) + shift * labels
    return scores, labels


def mean_ci_width(n: int, cohorts: int = 8, n_boot: int = 1000, seed: int = 0) -> float:
    from tilebench.metrics import bootstrap_ci

    rng = np.random.default_rng(seed)
    widths = []
    for c in range(cohorts):
        s, y = binormal_cohort(rng, n)
        r = bootstrap_ci(s, y, "AUROC", n_boot, seed=c)
        widths.append(r.ci_high - r.ci_low)
    return float(np.mean(widths))
