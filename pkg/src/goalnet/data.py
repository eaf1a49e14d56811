"""Dataset ingestion, windowing and synthetic scene generation.

Tracks are stored in an intermediate newline-delimited JSON format, one
track per line, with fields in this order::

    {"version": "v1", "video_id": ..., "track_id": ..., "start_frame": int,
     "image_size": [w, h], "frame_image_pattern": str,
     "boxes": [[x1, y1, x2, y2], ...], "split": str, "source": str}

Synthetic records may also carry ``"goal": [x, y]``.  ``frame_image_pattern``
is formatted with ``frame=<int>`` (and ``video_id``) to locate a scene image.
"""
from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from xml.parsers import expat
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import BoxTrack, PixelBox, Sample

log = logging.getLogger(__name__)

FORMAT_VERSION = "v1"
SPLITS = ("train", "val", "test")
SOURCES = ("jaad", "pie", "synthetic")

# PIE's standard split is by recording set.
PIE_SET_SPLITS = {
    "set01": "train", "set02": "train", "set04": "train",
    "set05": "val", "set06": "val",
    "set03": "test",
}


class IngestError(Exception):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class TrackRecord:
    track: BoxTrack
    image_size: tuple[int, int]
    frame_image_pattern: str
    goal: tuple[float, float] | None = None

    @property
    def video_id(self) -> str:
        return self.track.video_id

    def image_ref(self, frame: int) -> str:
        return self.frame_image_pattern.format(frame=frame, video_id=self.video_id)

    def to_json(self, split: str, source: str) -> str:
        rec = {
            "version": FORMAT_VERSION,
            "video_id": self.track.video_id,
            "track_id": self.track.track_id,
            "start_frame": self.track.frame_ids[0],
            "image_size": list(self.image_size),
            "frame_image_pattern": self.frame_image_pattern,
            "boxes": [[round(v, 6) for v in b.as_tuple()] for b in self.track.boxes],
            "split": split,
            "source": source,
        }
        if self.goal is not None:
            rec["goal"] = [round(float(g), 6) for g in self.goal]
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_dict(cls, rec: dict) -> "TrackRecord":
        if rec.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported record version {rec.get('version')!r}")
        track = BoxTrack.from_array(rec["boxes"], int(rec["start_frame"]),
                                    str(rec["track_id"]), str(rec["video_id"]))
        goal = tuple(rec["goal"]) if rec.get("goal") is not None else None
        return cls(track, tuple(rec["image_size"]), rec["frame_image_pattern"], goal)


@dataclass
class DatasetManifest:
    split: str
    records: list[TrackRecord]
    source: str
    fps: int = 30

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def video_ids(self) -> set[str]:
        return {r.video_id for r in self.records}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(rec.to_json(self.split, self.source) + "\n")

    @classmethod
    def read(cls, path, split: str | None = None) -> "DatasetManifest":
        path = Path(path)
        records, splits, sources = [], set(), set()
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    records.append(TrackRecord.from_dict(rec))
                except (ValueError, KeyError, TypeError) as exc:
                    raise IngestError(path, lineno, exc) from exc
                splits.add(rec.get("split", "train"))
                sources.add(rec.get("source", "synthetic"))
        if len(splits) > 1 or len(sources) > 1:
            raise IngestError(path, 0, f"mixed splits/sources {sorted(splits)} {sorted(sources)}")
        return cls(split or (splits.pop() if splits else "train"), records,
                   sources.pop() if sources else "synthetic")


@dataclass
class IngestReport:
    files: int = 0
    tracks: int = 0
    rejected_boxes: int = 0
    clamped_boxes: int = 0
    gap_splits: int = 0
    per_split: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"files": self.files, "tracks": self.tracks, "rejected_boxes": self.rejected_boxes,
                "clamped_boxes": self.clamped_boxes, "gap_splits": self.gap_splits,
                "per_split": dict(sorted(self.per_split.items()))}


def split_contiguous(frames: list[int], boxes: list[PixelBox]) -> list[tuple[list[int], list[PixelBox]]]:
    """Break a (sorted) frame/box sequence wherever frames are not consecutive."""
    pieces, cur_f, cur_b = [], [], []
    for f, b in zip(frames, boxes):
        if cur_f and f != cur_f[-1] + 1:
            pieces.append((cur_f, cur_b))
            cur_f, cur_b = [], []
        cur_f.append(f)
        cur_b.append(b)
    if cur_f:
        pieces.append((cur_f, cur_b))
    return pieces


def _default_pattern(source_kind: str, rel_video: Path) -> str:
    if source_kind == "pie":
        return f"images/{rel_video.parent.name}/{rel_video.name}/{{frame:05d}}.png"
    return f"images/{rel_video.name}/{{frame:05d}}.png"


def _parse_with_lines(path: Path) -> ET.Element:
    """ElementTree parse that records each element's source line as ``_line``."""
    builder = ET.TreeBuilder()
    parser = expat.ParserCreate()

    def start(tag, attrs):
        builder.start(tag, {**attrs, "_line": str(parser.CurrentLineNumber)})

    parser.StartElementHandler = start
    parser.EndElementHandler = builder.end
    parser.CharacterDataHandler = builder.data
    try:
        with path.open("rb") as fh:
            parser.ParseFile(fh)
        return builder.close()
    except expat.ExpatError as exc:
        raise IngestError(path, exc.lineno, f"malformed XML: {exc}") from exc


def parse_cvat_xml(path, source_kind: str, report: IngestReport, drop_occluded: bool = False,
                   video_id: str | None = None, pattern: str | None = None) -> list[TrackRecord]:
    """Parse one JAAD/PIE per-video CVAT annotation file into contiguous tracks."""
    path = Path(path)
    root = _parse_with_lines(path)
    w_node = root.find("./meta/task/original_size/width")
    h_node = root.find("./meta/task/original_size/height")
    if w_node is None or h_node is None:
        raise IngestError(path, 0, "missing meta/task/original_size")
    width, height = int(w_node.text), int(h_node.text)
    video_id = video_id or path.stem.removesuffix("_annt")
    pattern = pattern or _default_pattern(source_kind, path.with_name(video_id))
    out = []
    for track in root.findall("./track"):
        if track.get("label") not in (None, "pedestrian"):
            continue
        per_frame: dict[int, PixelBox] = {}
        tid = None
        for box in track.findall("./box"):
            line = int(box.get("_line", 0))
            if box.get("outside") == "1":
                continue
            id_node = box.find("./attribute[@name='id']")
            if id_node is not None and id_node.text:
                tid = id_node.text
            if drop_occluded and box.get("occluded") == "1":
                continue
            try:
                frame = int(box.get("frame"))
                x1, y1, x2, y2 = (float(box.get(k)) for k in ("xtl", "ytl", "xbr", "ybr"))
            except (TypeError, ValueError) as exc:
                raise IngestError(path, line, f"bad box attributes: {exc}") from exc
            if not (x2 > x1 and y2 > y1):
                report.rejected_boxes += 1
                continue
            cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
            cx2, cy2 = min(max(x2, 0.0), width), min(max(y2, 0.0), height)
            if not (cx2 > cx1 and cy2 > cy1):
                report.rejected_boxes += 1
                continue
            if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
                report.clamped_boxes += 1
            per_frame[frame] = PixelBox(cx1, cy1, cx2, cy2)
        if not per_frame:
            continue
        tid = tid or f"track{len(out)}"
        frames = sorted(per_frame)
        pieces = split_contiguous(frames, [per_frame[f] for f in frames])
        report.gap_splits += len(pieces) - 1
        for i, (fr, bx) in enumerate(pieces):
            suffix = f"#{i}" if len(pieces) > 1 else ""
            out.append(TrackRecord(BoxTrack(tuple(bx), tuple(fr), tid + suffix, video_id),
                                   (width, height), pattern))
    return out


def _read_split_lists(source_dir: Path, source_kind: str) -> dict[str, str]:
    """video id -> split, from ``split_ids/[default/]{train,val,test}.txt``."""
    mapping: dict[str, str] = {}
    for base in (source_dir / "split_ids" / "default", source_dir / "split_ids"):
        for split in SPLITS:
            f = base / f"{split}.txt"
            if f.exists():
                for vid in f.read_text(encoding="utf-8").split():
                    if vid in mapping and mapping[vid] != split:
                        raise IngestError(f, 0, f"video {vid} listed in two splits")
                    mapping[vid] = split
        if mapping:
            break
    return mapping


_AUX_SUFFIXES = ("_attributes", "_appearance", "_traffic", "_obd", "_vehicle")


def ingest_annotations(source_dir, source_kind: str, drop_occluded: bool = False,
                       default_split: str = "train") -> tuple[dict[str, DatasetManifest], IngestReport]:
    """Read every per-video annotation XML under ``source_dir``.

    Split membership comes from ``split_ids`` lists when present, PIE's set
    split otherwise, and ``default_split`` as a last resort.
    """
    source_dir = Path(source_dir)
    if source_kind not in ("jaad", "pie"):
        raise ValueError(f"unsupported source kind {source_kind!r}")
    if not source_dir.is_dir():
        raise FileNotFoundError(f"annotation directory {source_dir} does not exist")
    split_of = _read_split_lists(source_dir, source_kind)
    report = IngestReport()
    by_split: dict[str, list[TrackRecord]] = {s: [] for s in SPLITS}
    for xml in sorted(source_dir.rglob("*.xml")):
        if xml.stem.endswith(_AUX_SUFFIXES):
            continue
        video_id = xml.stem.removesuffix("_annt")
        rel = xml.relative_to(source_dir)
        set_name = rel.parent.name
        if source_kind == "pie":
            video_key = f"{set_name}/{video_id}"
            pattern = f"images/{set_name}/{video_id}/{{frame:05d}}.png"
            split = split_of.get(video_key) or split_of.get(video_id) or PIE_SET_SPLITS.get(set_name, default_split)
            video_id = video_key
        else:
            pattern = f"images/{video_id}/{{frame:05d}}.png"
            split = split_of.get(video_id, default_split)
        records = parse_cvat_xml(xml, source_kind, report, drop_occluded, video_id, pattern)
        report.files += 1
        report.tracks += len(records)
        report.per_split[split] += len(records)
        by_split[split].extend(records)
    manifests = {s: DatasetManifest(s, recs, source_kind) for s, recs in by_split.items() if recs}
    return manifests, report


def count_windows(track_len: int, obs_len: int, pred_len: int, stride: int) -> int:
    span = obs_len + pred_len
    return 0 if track_len < span else (track_len - span) // stride + 1


def slice_windows(manifest: DatasetManifest | Iterable[TrackRecord], obs_len: int = 15,
                  pred_len: int = 45, stride: int = 15) -> list[Sample]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    out = []
    for rec in records:
        tr = rec.track
        for i in range(count_windows(len(tr), obs_len, pred_len, stride)):
            s = i * stride
            obs = BoxTrack(tr.boxes[s:s + obs_len], tr.frame_ids[s:s + obs_len], tr.track_id, tr.video_id)
            fut = BoxTrack(tr.boxes[s + obs_len:s + obs_len + pred_len],
                           tr.frame_ids[s + obs_len:s + obs_len + pred_len], tr.track_id, tr.video_id)
            out.append(Sample(obs, fut, rec.image_ref(obs.frame_ids[-1]), rec.image_size))
    return out


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class Band:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def horizontal(self) -> bool:
        return (self.x2 - self.x1) >= (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: tuple[int, int] = (640, 384)
    walkable_bands: tuple[Band, ...] | None = None  # None: random layout per video
    agent_count: int = 5
    speed_range: tuple[float, float] = (1.0, 3.0)
    goal_jitter: float = 4.0
    track_len: int = 60
    turn_prob: float = 0.5

    def __post_init__(self):
        w, h = self.image_size
        if self.walkable_bands is not None:
            object.__setattr__(self, "walkable_bands", tuple(self.walkable_bands))
            for b in self.walkable_bands:
                if not (0 <= b.x1 < b.x2 <= w and 0 <= b.y1 < b.y2 <= h):
                    raise ValueError(f"band {b} outside the {w}x{h} image")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must be positive and ordered")
        if self.goal_jitter < 0 or self.agent_count < 1 or self.track_len < 2:
            raise ValueError("invalid synthetic spec")


BACKGROUND = (96, 96, 96)
BAND_COLORS = ((214, 200, 160), (240, 240, 240), (150, 200, 120))


def random_layout(rng: np.random.Generator, image_size) -> tuple[Band, ...]:
    w, h = image_size
    bh = rng.uniform(0.10, 0.16) * h
    yc = rng.uniform(0.45, 0.80) * h
    bw = rng.uniform(0.07, 0.11) * w
    xc = rng.uniform(0.25, 0.75) * w
    return (Band(0.0, yc - bh / 2, float(w), yc + bh / 2), Band(xc - bw / 2, 0.0, xc + bw / 2, float(h)))


def render_scene(bands, image_size) -> np.ndarray:
    w, h = image_size
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for i, b in enumerate(bands):
        img[int(round(b.y1)):int(round(b.y2)), int(round(b.x1)):int(round(b.x2))] = BAND_COLORS[i % len(BAND_COLORS)]
    return img


def box_size_at(cy: float, image_h: float) -> tuple[float, float]:
    """Perspective proxy: pedestrians lower in the frame are closer and larger."""
    h = 0.08 * image_h + 0.18 * cy
    return 0.4 * h, h


def _polyline(points: list[np.ndarray], n: int) -> np.ndarray:
    """``n`` positions moving at constant speed along the polyline."""
    seg = [np.linalg.norm(b - a) for a, b in zip(points[:-1], points[1:])]
    total = sum(seg)
    s = np.linspace(0.0, total, n)
    out = np.empty((n, 2))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    for i, si in enumerate(s):
        j = min(int(np.searchsorted(cum, si, side="right")) - 1, len(seg) - 1)
        frac = 0.0 if seg[j] == 0 else (si - cum[j]) / seg[j]
        out[i] = points[j] + frac * (points[j + 1] - points[j])
    return out


def _simulate_agent(rng, bands, spec: SyntheticSceneSpec):
    w, h = spec.image_size
    n = spec.track_len
    for _ in range(200):
        speed = rng.uniform(*spec.speed_range)
        length = speed * (n - 1)
        bi = int(rng.integers(len(bands)))
        band = bands[bi]
        axis = np.array([1.0, 0.0]) if band.horizontal else np.array([0.0, 1.0])
        d1 = axis * rng.choice([-1.0, 1.0])
        turn = len(bands) > 1 and rng.random() < spec.turn_prob
        if turn:
            other = bands[(bi + 1 + int(rng.integers(len(bands) - 1))) % len(bands)]
            pivot = np.array([other.center[0], band.center[1]]) if band.horizontal else \
                np.array([band.center[0], other.center[1]])
            a = rng.uniform(0.3, 0.7) * length
            d2 = (np.array([1.0, 0.0]) if other.horizontal else np.array([0.0, 1.0])) * rng.choice([-1.0, 1.0])
            start = pivot - a * d1
            goal = pivot + (length - a) * d2
            waypoints = [start, pivot, goal]
        else:
            lateral = rng.uniform(0.3, 0.7)
            if band.horizontal:
                start = np.array([rng.uniform(0, w), band.y1 + lateral * (band.y2 - band.y1)])
            else:
                start = np.array([band.x1 + lateral * (band.x2 - band.x1), rng.uniform(0, h)])
            goal = start + length * d1
            waypoints = [start, goal]
        jitter = np.zeros(2)
        if spec.goal_jitter > 0:
            theta = rng.uniform(0, 2 * np.pi)
            jitter = spec.goal_jitter * np.sqrt(rng.random()) * np.array([np.cos(theta), np.sin(theta)])
        waypoints[-1] = goal + jitter
        centers = _polyline(waypoints, n)
        sizes = np.array([box_size_at(cy, h) for cy in centers[:, 1]])
        x1y1 = centers - sizes / 2
        x2y2 = centers + sizes / 2
        if x1y1.min() < 0 or x2y2[:, 0].max() > w or x2y2[:, 1].max() > h:
            continue
        return np.concatenate([x1y1, x2y2], axis=1), goal
    raise RuntimeError("could not place an agent inside the frame; widen the image or reduce speeds")


def generate_synthetic(spec: SyntheticSceneSpec, n_tracks: int, seed: int, split: str = "train",
                       video_prefix: str = "syn") -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Agents walking piecewise-constant-velocity paths inside walkable bands.

    Returns the manifest and one rendered RGB scene (``H x W x 3`` uint8) per
    video.  Scene images are referenced as ``scenes/<video_id>.png``.
    """
    rng = np.random.default_rng(seed)
    records, images = [], {}
    n_videos = math.ceil(n_tracks / spec.agent_count)
    for v in range(n_videos):
        vid = f"{video_prefix}{v:04d}"
        bands = spec.walkable_bands or random_layout(rng, spec.image_size)
        images[vid] = render_scene(bands, spec.image_size)
        for a in range(min(spec.agent_count, n_tracks - v * spec.agent_count)):
            boxes, goal = _simulate_agent(rng, bands, spec)
            track = BoxTrack.from_array(boxes, 0, f"{vid}_p{a}", vid)
            records.append(TrackRecord(track, tuple(spec.image_size), f"scenes/{vid}.png",
                                       (float(goal[0]), float(goal[1]))))
    return DatasetManifest(split, records, "synthetic"), images


def write_synthetic(out_dir, manifest: DatasetManifest, images: dict[str, np.ndarray]) -> Path:
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    for vid, img in sorted(images.items()):
        Image.fromarray(img).save(out_dir / "scenes" / f"{vid}.png")
    path = out_dir / f"{manifest.split}.jsonl"
    manifest.write(path)
    return path
