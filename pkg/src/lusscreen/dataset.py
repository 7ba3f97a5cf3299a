"""JSONL manifests, frame selection and video-grouped k-fold plans."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from types import MappingProxyType

from .errors import DataError, ImageFormatError, ManifestError
from .imageio import probe_image
from .rng import PCG32

log = logging.getLogger(__name__)

LABELS = ("covid", "healthy")
FIELDS = ("id", "image_path", "mask_path", "label", "video_id", "frame_index")
BALANCE_TOLERANCE = 0.20


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    label: str
    video_id: str
    frame_index: int
    mask_path: str | None = None

    @property
    def class_index(self) -> int:
        return LABELS.index(self.label)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in FIELDS})


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def videos(self) -> list[str]:
        return sorted({r.video_id for r in self.records})

    def class_counts(self) -> dict[str, int]:
        counts = Counter(r.label for r in self.records)
        return {label: counts.get(label, 0) for label in LABELS}

    def subset(self, records) -> "DatasetManifest":
        return DatasetManifest(tuple(records), self.root)


def select_frames(frame_count: int, stride: int) -> list[int]:
    """Indices 0, stride, 2*stride, ... below ``frame_count``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(range(0, max(frame_count, 0), stride))


def _parse_record(obj, lineno) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record is not a JSON object", lineno)
    missing = [f for f in FIELDS if f not in obj and f != "mask_path"]
    if missing:
        raise ManifestError(f"missing field(s) {', '.join(missing)}", lineno)
    for key in ("id", "image_path", "label", "video_id"):
        if not isinstance(obj[key], str) or not obj[key]:
            raise ManifestError(f"field {key!r} must be a non-empty string", lineno)
    mask = obj.get("mask_path")
    if mask is not None and (not isinstance(mask, str) or not mask):
        raise ManifestError("field 'mask_path' must be a non-empty string or null", lineno)
    idx = obj["frame_index"]
    if isinstance(idx, bool) or not isinstance(idx, int) or idx < 0:
        raise ManifestError("field 'frame_index' must be a non-negative integer", lineno)
    if obj["label"] not in LABELS:
        raise ManifestError(f"unknown label {obj['label']!r} (expected one of {', '.join(LABELS)})", lineno)
    return SampleRecord(obj["id"], obj["image_path"], obj["label"], obj["video_id"], idx, mask)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSONL manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from None
    root = path.parent
    records = []
    ids = set()
    frames = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
        rec = _parse_record(obj, lineno)
        if rec.id in ids:
            raise ManifestError(f"duplicate id {rec.id!r}", lineno)
        if (rec.video_id, rec.frame_index) in frames:
            raise ManifestError(f"frame {rec.frame_index} of video {rec.video_id!r} listed twice", lineno)
        if check_files:
            for rel in (rec.image_path, rec.mask_path):
                if rel is None:
                    continue
                full = rel if Path(rel).is_absolute() else root / rel
                if not full.is_file():
                    raise ManifestError(f"missing file {rel}", lineno)
                try:
                    probe_image(full)
                except ImageFormatError as exc:
                    raise ManifestError(f"unreadable image: {exc}", lineno) from None
        ids.add(rec.id)
        frames.add((rec.video_id, rec.frame_index))
        records.append(rec)
    return DatasetManifest(tuple(records), root)


def save_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignment: MappingProxyType

    def __post_init__(self):
        object.__setattr__(self, "assignment", MappingProxyType(dict(self.assignment)))
        bad = {v: f for v, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise DataError(f"fold indices outside [0, {self.k}): {bad}")

    def fold_of(self, record: SampleRecord) -> int:
        try:
            return self.assignment[record.video_id]
        except KeyError:
            raise DataError(f"video {record.video_id!r} has no fold assignment") from None

    def videos_in(self, fold: int) -> list[str]:
        return sorted(v for v, f in self.assignment.items() if f == fold)

    def split(self, manifest, fold: int):
        """(train records, test records) with ``fold`` held out."""
        train, test = [], []
        for rec in manifest:
            (test if self.fold_of(rec) == fold else train).append(rec)
        return train, test

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d) -> "FoldPlan":
        try:
            return cls(int(d["k"]), int(d["seed"]), {str(v): int(f) for v, f in d["assignment"].items()})
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataError(f"malformed fold plan: {exc}") from None

    @classmethod
    def load(cls, path) -> "FoldPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read fold plan {path}: {exc}") from None


def make_folds(manifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle the sorted video ids with PCG32, then deal them round-robin."""
    if k < 1:
        raise DataError(f"k must be positive, got {k}")
    videos = sorted({r.video_id for r in manifest})
    if len(videos) < k:
        raise DataError(f"{len(videos)} videos cannot fill {k} folds")
    PCG32.from_seed(seed).shuffle(videos)
    plan = FoldPlan(k, seed, {v: i % k for i, v in enumerate(videos)})
    class_balance(manifest, plan)
    return plan


def class_balance(manifest, plan: FoldPlan) -> list[float | None]:
    """COVID fraction per fold; logs a warning for folds off the global ratio by >20%."""
    records = list(manifest)
    total = len(records)
    if not total:
        return [None] * plan.k
    global_ratio = sum(r.label == "covid" for r in records) / total
    ratios = []
    for fold in range(plan.k):
        members = [r for r in records if plan.fold_of(r) == fold]
        ratio = sum(r.label == "covid" for r in members) / len(members) if members else None
        ratios.append(ratio)
        if ratio is not None and global_ratio > 0 and abs(ratio - global_ratio) / global_ratio > BALANCE_TOLERANCE:
            log.warning(
                "fold %d class ratio %.3f deviates from global %.3f by more than %d%%",
                fold, ratio, global_ratio, int(BALANCE_TOLERANCE * 100),
            )
    return ratios
