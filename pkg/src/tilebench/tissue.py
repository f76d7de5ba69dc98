"""Nine-class tissue scoring and per-patient tumor tile sampling."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .core import CohortManifest, TileRecord, atomic_write_text, stable_hash
from .errors import MalformedProbs, MissingScore, NoTumorTiles, ParseError, UnreadableImage
from .preprocess import REFERENCE_STAIN_MATRIX, nnls2, optical_density

log = logging.getLogger(__name__)


class TissueClass(enum.IntEnum):
    ADI = 0
    BACK = 1
    DEB = 2
    LYM = 3
    MUC = 4
    MUS = 5
    NORM = 6
    STR = 7
    TUM = 8


CLASS_NAMES = tuple(c.name for c in TissueClass)
SCORE_FILE_HEADER = ("tile_id",) + CLASS_NAMES


class ScorerKind(str, enum.Enum):
    EXTERNAL = "external_scores_file"
    BUILTIN = "builtin_baseline"


@dataclass(frozen=True)
class TissueScorer:
    kind: ScorerKind
    source: str | None = None

    @classmethod
    def external(cls, path: str | os.PathLike) -> "TissueScorer":
        return cls(ScorerKind.EXTERNAL, str(path))

    @classmethod
    def builtin(cls) -> "TissueScorer":
        return cls(ScorerKind.BUILTIN)


def check_simplex(probs: Sequence[float], where: str = "") -> tuple[float, ...]:
    p = tuple(float(v) for v in probs)
    if len(p) != 9:
        raise MalformedProbs(f"{where}expected 9 probabilities, got {len(p)}")
    if not all(math.isfinite(v) and v >= 0 for v in p):
        raise MalformedProbs(f"{where}probabilities must be finite and >= 0")
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-6:
        raise MalformedProbs(f"{where}probabilities sum to {total:.6g}, not 1")
    return p


def tissue_class(tile: TileRecord) -> TissueClass | None:
    if tile.tissue_probs is None:
        return None
    return TissueClass(int(np.argmax(tile.tissue_probs)))


# --- external scores ---------------------------------------------------------------

def read_score_file(path: str | os.PathLike) -> dict[str, tuple[float, ...]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SCORE_FILE_HEADER:
            raise ParseError(f"{path}: expected header {','.join(SCORE_FILE_HEADER)}")
        scores = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 10:
                raise ParseError(f"{path}:{lineno}: expected 10 fields")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            scores[row[0]] = check_simplex(vals, f"{path}:{lineno}: ")
    return scores


def format_score_file(tiles: Iterable[TileRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SCORE_FILE_HEADER)
    for t in tiles:
        if t.tissue_probs is not None:
            w.writerow([t.tile_id, *(repr(float(p)) for p in t.tissue_probs)])
    return out.getvalue()


def write_score_file(tiles: Iterable[TileRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, format_score_file(tiles))


# --- builtin baseline --------------------------------------------------------------

# Nearest-prototype rule on three color statistics of an RGB tile:
#   tissue fraction  share of pixels with any channel OD above TISSUE_OD
#   mean OD          mean optical density over all pixels and channels
#   H share          sum of hematoxylin over sum of both stain concentrations,
#                    over tissue pixels, unmixed on the reference basis (0 if no tissue)
# Class probabilities are softmax(-||f - prototype||^2 / TEMPERATURE).
TISSUE_OD = 0.15
TEMPERATURE = 0.01
PROTOTYPES = np.array([
    # fraction, mean OD, H share
    [0.25, 0.08, 0.30],   # ADI: mostly empty fat vacuoles
    [0.00, 0.00, 0.00],   # BACK
    [0.90, 0.45, 0.45],   # DEB
    [1.00, 0.75, 0.70],   # LYM: dense small nuclei
    [0.70, 0.20, 0.30],   # MUC: pale mucin
    [1.00, 0.60, 0.05],   # MUS: dense eosin
    [1.00, 0.35, 0.35],   # NORM
    [1.00, 0.42, 0.08],   # STR: eosin-rich, sparse nuclei
    [1.00, 0.50, 0.22],   # TUM
])
_HE = REFERENCE_STAIN_MATRIX / np.linalg.norm(REFERENCE_STAIN_MATRIX, axis=0)


def color_features(pixels: np.ndarray, i0: int = 255) -> np.ndarray:
    od = optical_density(np.asarray(pixels).reshape(-1, 3), i0)
    tissue = (od > TISSUE_OD).any(axis=1)
    h_share = 0.0
    if tissue.any():
        conc = nnls2(_HE, od[tissue])
        total = conc.sum()
        h_share = float(conc[:, 0].sum() / total) if total > 0 else 0.0
    return np.array([tissue.mean(), od.mean(), h_share])


def baseline_probs(pixels: np.ndarray) -> tuple[float, ...]:
    d2 = ((PROTOTYPES - color_features(pixels)) ** 2).sum(axis=1)
    logits = -d2 / TEMPERATURE
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    return tuple(float(v) for v in p)


def _load_tile(tile: TileRecord, root: Path | None) -> np.ndarray:
    path = Path(tile.tile_path)
    if root is not None and not path.is_absolute():
        path = root / path
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{tile.tile_id}: {exc}") from None


def classify_tiles(tiles: Sequence[TileRecord], scorer: TissueScorer,
                   root: str | os.PathLike | None = None,
                   pixels: Mapping[str, np.ndarray] | None = None) -> list[TileRecord]:
    """Attach a 9-class probability vector to every tile.

    For the builtin scorer pixels come from ``pixels[tile_id]`` when given,
    else from each tile's PNG.
    """
    if scorer.kind == ScorerKind.EXTERNAL:
        table = read_score_file(scorer.source)
        out = []
        for t in tiles:
            if t.tile_id not in table:
                raise MissingScore(f"tile {t.tile_id} absent from {scorer.source}")
            out.append(replace(t, tissue_probs=table[t.tile_id]))
        return out
    base = Path(root) if root is not None else None
    out = []
    for t in tiles:
        px = pixels[t.tile_id] if pixels is not None else _load_tile(t, base)
        out.append(replace(t, tissue_probs=check_simplex(baseline_probs(px), f"{t.tile_id}: ")))
    return out


# --- tumor sampling ----------------------------------------------------------------

def select_tumor_tiles(tiles: Sequence[TileRecord], cap: int = 500, seed: int = 0,
                       patient_id: str | None = None, min_prob: float | None = None) -> list[TileRecord]:
    """Up to ``cap`` argmax-TUM tiles of one patient, drawn uniformly without replacement.

    The draw depends only on (patient_id, the sorted tile ids, seed).  Returned
    tiles are marked ``selected`` and sorted by tile id.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    tum = []
    for t in tiles:
        if t.tissue_probs is None:
            raise MalformedProbs(f"tile {t.tile_id} has no tissue probabilities")
        if tissue_class(t) != TissueClass.TUM:
            continue
        if min_prob is not None and t.tissue_probs[TissueClass.TUM] < min_prob:
            continue
        tum.append(t)
    owner = patient_id if patient_id is not None else ",".join(sorted({t.slide_id for t in tiles}))
    if not tum:
        raise NoTumorTiles(f"{owner}: no tumor tiles")
    tum.sort(key=lambda t: t.tile_id)
    if len(tum) > cap:
        rng = np.random.default_rng(stable_hash("tumor-sample", seed, owner))
        keep = np.sort(rng.choice(len(tum), size=cap, replace=False))
        tum = [tum[i] for i in keep]
    return [replace(t, selected=True) for t in tum]


def select_cohort_tiles(tiles: Sequence[TileRecord], manifest: CohortManifest, cap: int = 500,
                        seed: int = 0, min_prob: float | None = None
                        ) -> tuple[list[TileRecord], list[str]]:
    """Per-patient tumor sampling across a cohort.

    Returns (selected tiles, excluded patient ids); patients without tumor
    tiles are logged and excluded.
    """
    patient_of = {s.slide_id: s.patient_id for s in manifest.slides}
    groups: dict[str, list[TileRecord]] = {}
    for t in tiles:
        if t.slide_id not in patient_of:
            continue
        groups.setdefault(patient_of[t.slide_id], []).append(t)
    selected, excluded = [], []
    for pid in sorted(set(patient_of.values())):
        try:
            selected.extend(select_tumor_tiles(groups.get(pid, []), cap, seed, pid, min_prob))
        except NoTumorTiles as exc:
            log.warning("excluding patient: %s", exc)
            excluded.append(pid)
    return selected, excluded
