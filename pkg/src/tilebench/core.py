"""Domain records, cohort manifests and the small IO helpers every stage uses."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import InvariantViolation, ParseError


class Task(str, enum.Enum):
    MSI = "MSI"
    BRAF = "BRAF"
    CIMP = "CIMP"

    @property
    def positive_class(self) -> str:
        return _POSITIVE_CLASS[self]


_POSITIVE_CLASS = {
    Task.MSI: "MSI-H",
    Task.BRAF: "BRAF-mutant",
    Task.CIMP: "CIMP-H",
}


class SplitRole(str, enum.Enum):
    TRAIN = "train"
    EXTERNAL_TEST = "external_test"


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    cohort: str
    image_path: str
    microns_per_pixel: float
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.slide_id:
            raise InvariantViolation("empty slide_id")
        if not (isinstance(self.microns_per_pixel, (int, float))
                and math.isfinite(self.microns_per_pixel)
                and self.microns_per_pixel > 0):
            raise InvariantViolation(
                f"{self.slide_id}: microns_per_pixel must be > 0, got {self.microns_per_pixel!r}")
        for task, value in self.labels.items():
            if task not in Task.__members__:
                raise InvariantViolation(f"{self.slide_id}: unknown task {task!r}")
            if value not in (0, 1) or isinstance(value, bool):
                raise InvariantViolation(f"{self.slide_id}: label {task}={value!r} not in {{0,1}}")

    def label(self, task: Task | str) -> int | None:
        return self.labels.get(Task(task).value)


@dataclass(frozen=True)
class TileRecord:
    slide_id: str
    x: int
    y: int
    native_size: int
    output_size: int
    qc_edge_fraction: float = 0.0
    qc_pass: bool = False
    tissue_probs: tuple[float, ...] | None = None
    selected: bool = False
    tile_path: str = ""

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise InvariantViolation(f"tile origin must be >= 0, got ({self.x}, {self.y})")
        if not 0.0 <= self.qc_edge_fraction <= 1.0:
            raise InvariantViolation(f"qc_edge_fraction {self.qc_edge_fraction} outside [0, 1]")
        if self.tissue_probs is not None:
            if len(self.tissue_probs) != 9:
                raise InvariantViolation("tissue_probs must have 9 entries")
            if abs(math.fsum(self.tissue_probs) - 1.0) > 1e-6:
                raise InvariantViolation("tissue_probs must sum to 1")

    @property
    def tile_id(self) -> str:
        return f"{self.slide_id}_{self.x}_{self.y}"


@dataclass(frozen=True)
class CohortManifest:
    task: Task
    slides: tuple[SlideRecord, ...]
    split_role: SplitRole = SplitRole.TRAIN
    root: str = ""

    def __post_init__(self):
        seen = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise InvariantViolation(f"duplicate slide_id {s.slide_id!r}")
            seen.add(s.slide_id)

    def __len__(self):
        return len(self.slides)

    def label_counts(self) -> tuple[int, int]:
        """(positives, negatives) among slides labeled for the manifest task."""
        pos = neg = 0
        for s in self.slides:
            y = s.label(self.task)
            if y == 1:
                pos += 1
            elif y == 0:
                neg += 1
        return pos, neg

    def counts_report(self) -> str:
        pos, neg = self.label_counts()
        return f"{pos}:{neg}"

    def resolve(self, slide: SlideRecord) -> Path:
        p = Path(slide.image_path)
        return p if p.is_absolute() or not self.root else Path(self.root) / p

    def labeled(self) -> "CohortManifest":
        return replace(self, slides=tuple(s for s in self.slides if s.label(self.task) is not None))


def _slide_from_obj(obj: dict, lineno: int) -> SlideRecord:
    try:
        labels = obj.get("labels") or {}
        if not isinstance(labels, dict):
            raise ParseError(f"line {lineno}: labels must be an object")
        return SlideRecord(
            slide_id=str(obj["slide_id"]),
            patient_id=str(obj["patient_id"]),
            cohort=str(obj.get("cohort", "")),
            image_path=str(obj.get("image_path", "")),
            microns_per_pixel=obj["microns_per_pixel"],
            labels={str(k): v for k, v in labels.items()},
        )
    except KeyError as exc:
        raise ParseError(f"line {lineno}: missing field {exc.args[0]!r}") from None


def load_manifest(path: str | os.PathLike) -> CohortManifest:
    """Read a manifest: a header object (task, split_role) then one slide per line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    header = None
    slides = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ParseError(f"{path}:{lineno}: expected an object")
        if header is None:
            if "task" not in obj:
                raise ParseError(f"{path}:{lineno}: first record must be the header with a 'task' field")
            try:
                header = (Task(obj["task"]), SplitRole(obj.get("split_role", "train")))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            continue
        slides.append(_slide_from_obj(obj, lineno))
    if header is None:
        raise ParseError(f"{path}: empty manifest")
    return CohortManifest(task=header[0], slides=tuple(slides), split_role=header[1],
                          root=str(path.parent))


def dump_manifest(manifest: CohortManifest) -> str:
    lines = [json.dumps({"task": manifest.task.value, "split_role": manifest.split_role.value})]
    for s in manifest.slides:
        d = asdict(s)
        d["labels"] = dict(s.labels)
        lines.append(json.dumps(d))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: CohortManifest, path: str | os.PathLike) -> None:
    atomic_write_text(path, dump_manifest(manifest))


def stable_hash(*parts) -> int:
    """64-bit hash of the parts' string forms; stable across processes."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def select_one_slide_per_patient(manifest: CohortManifest, seed: int) -> CohortManifest:
    """Keep one slide per patient, chosen by hashing so input order is irrelevant."""
    best: dict[str, tuple[int, str, SlideRecord]] = {}
    for s in manifest.slides:
        key = (stable_hash("slide-choice", seed, s.patient_id, s.slide_id), s.slide_id, s)
        cur = best.get(s.patient_id)
        if cur is None or key[:2] < cur[:2]:
            best[s.patient_id] = key
    kept = {v[1] for v in best.values()}
    return replace(manifest, slides=tuple(s for s in manifest.slides if s.slide_id in kept))


# --- tile manifests ------------------------------------------------------------

def dump_tiles(tiles: Iterable[TileRecord]) -> str:
    out = io.StringIO()
    for t in tiles:
        d = asdict(t)
        d["tissue_probs"] = list(t.tissue_probs) if t.tissue_probs is not None else None
        out.write(json.dumps(d) + "\n")
    return out.getvalue()


def write_tiles(tiles: Iterable[TileRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, dump_tiles(tiles))


def load_tiles(path: str | os.PathLike) -> list[TileRecord]:
    tiles = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            probs = d.get("tissue_probs")
            d["tissue_probs"] = tuple(probs) if probs is not None else None
            tiles.append(TileRecord(**d))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return tiles


# --- score tables --------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRow:
    entity_id: str
    task: str
    score: float
    label: int | None


SCORE_HEADER = ("entity_id", "task", "score", "label")


def format_scores(rows: Sequence[ScoreRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    for r in rows:
        w.writerow([r.entity_id, r.task, repr(float(r.score)), "" if r.label is None else int(r.label)])
    return out.getvalue()


def write_scores(rows: Sequence[ScoreRow], path: str | os.PathLike) -> None:
    atomic_write_text(path, format_scores(rows))


def read_scores(path: str | os.PathLike) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SCORE_HEADER:
            raise ParseError(f"{path}: expected header {','.join(SCORE_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields")
            try:
                score = float(rec[2])
                label = int(rec[3]) if rec[3].strip() != "" else None
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if label not in (None, 0, 1):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1")
            rows.append(ScoreRow(rec[0], rec[1], score, label))
    return rows


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
