"""Ingestion of physical-run footage: CVAT-style track CSVs plus scores.

Scores for each tracked object come either from a precomputed per-frame
score CSV or from re-running the detector over frames on disk at the
near-zero retrieval threshold. Frame gaps fill with score 0 and are
flagged in the report.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

from .detector import DetectorBackend, detect
from .metrics import DEFAULT_MATCH_IOU, DEFAULT_RETRIEVAL_THRESHOLD, box_iou
from .types import Box, TrackedScoreSeries, load_image

TRACK_COLUMNS = ("frame_index", "object_id", "x_min", "y_min", "x_max", "y_max")


def read_track_csv(path: str | Path) -> dict[str, dict[int, Box]]:
    """Parse a track CSV into {object_id: {frame_index: box}}.

    Accepts an optional header row matching the canonical column names.
    """
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not any(cell.strip() for cell in row):
                continue
            rows.append([cell.strip() for cell in row])
    if rows and rows[0][0] == TRACK_COLUMNS[0]:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"empty track file: {path}")

    tracks: dict[str, dict[int, Box]] = {}
    for row in rows:
        if len(row) != 6:
            raise ValueError(f"malformed track row {row} in {path}")
        frame = int(row[0])
        obj = row[1]
        box = (float(row[2]), float(row[3]), float(row[4]), float(row[5]))
        if box[0] >= box[2] or box[1] >= box[3]:
            raise ValueError(f"degenerate track box {box} at frame {frame} in {path}")
        tracks.setdefault(obj, {})[frame] = box
    return tracks


@dataclass
class PrecomputedScores:
    """Per-frame scores from a CSV with columns frame_index, object_id, objectness."""

    path: Path

    def score(self, object_id: str, frame: int, _box: Box) -> float | None:
        return self._table().get((object_id, frame))

    def _table(self) -> dict[tuple[str, int], float]:
        if not hasattr(self, "_cache"):
            table: dict[tuple[str, int], float] = {}
            with open(self.path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
            if rows and rows[0][0].strip() == "frame_index":
                rows = rows[1:]
            for row in rows:
                frame, obj, score = int(row[0]), row[1].strip(), float(row[2])
                if not 0.0 <= score <= 1.0:
                    raise ValueError(f"score out of range: {score} at frame {frame}")
                table[(obj, frame)] = score
            self._cache = table
        return self._cache


@dataclass
class FrameScores:
    """Scores retrieved by running the detector over frames on disk.

    Frame files are matched by the trailing integer in their stem
    (e.g. frame_000123.png). Per frame, the tracked box takes the
    highest-objectness detection with IoU >= min_iou among detections at
    the retrieval threshold; no such detection means score 0.
    """

    frames_dir: Path
    backend: DetectorBackend
    retrieval_threshold: float = DEFAULT_RETRIEVAL_THRESHOLD
    nms_iou: float = 0.4
    min_iou: float = DEFAULT_MATCH_IOU
    _detections: dict[int, list] = field(default_factory=dict, repr=False)
    _index: dict[int, Path] | None = field(default=None, repr=False)

    def _frame_path(self, frame: int) -> Path | None:
        if self._index is None:
            index = {}
            for p in sorted(Path(self.frames_dir).glob("*")):
                if p.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                    continue
                m = re.search(r"(\d+)$", p.stem)
                if m:
                    index[int(m.group(1))] = p
            self._index = index
        return self._index.get(frame)

    def score(self, object_id: str, frame: int, box: Box) -> float | None:
        if frame not in self._detections:
            path = self._frame_path(frame)
            if path is None:
                return None
            self._detections[frame] = detect(self.backend, load_image(path),
                                             self.retrieval_threshold, self.nms_iou)
        best = 0.0
        for det in self._detections[frame]:
            if box_iou(det.box, box) >= self.min_iou and det.objectness > best:
                best = det.objectness
        return best


def _scores_for_track(track: dict[int, Box], object_id: str,
                      source: PrecomputedScores | FrameScores,
                      gaps: list[str], side: str) -> list[float]:
    frames = sorted(track)
    lo, hi = frames[0], frames[-1]
    scores = []
    for frame in range(lo, hi + 1):
        if frame not in track:
            gaps.append(f"{side}/{object_id}: frame {frame} missing from track, scored 0")
            scores.append(0.0)
            continue
        found = source.score(object_id, frame, track[frame])
        if found is None:
            gaps.append(f"{side}/{object_id}: frame {frame} has no score source, scored 0")
            scores.append(0.0)
        else:
            scores.append(found)
    return scores


def ingest_physical_run(patched_track_csv: str | Path, clean_track_csv: str | Path,
                        patched_source: PrecomputedScores | FrameScores,
                        clean_source: PrecomputedScores | FrameScores,
                        conditions: dict[str, dict[str, str]] | None = None,
                        ) -> tuple[list[TrackedScoreSeries], list[str]]:
    """Build one TrackedScoreSeries per object tracked in both videos.

    Returns the series plus a report of filled gaps and skipped objects.
    Condition tags come from the optional sidecar mapping
    {object_id: {"lighting": ..., "motion": ...}}.
    """
    patched = read_track_csv(patched_track_csv)
    clean = read_track_csv(clean_track_csv)
    conditions = conditions or {}
    report: list[str] = []
    series = []
    for object_id in sorted(set(patched) | set(clean)):
        if object_id not in patched or object_id not in clean:
            report.append(f"object {object_id} missing from one video, skipped")
            continue
        tags = conditions.get(object_id, {"lighting": "both", "motion": "static"})
        series.append(TrackedScoreSeries(
            object_id=object_id,
            patched_scores=_scores_for_track(patched[object_id], object_id,
                                             patched_source, report, "patched"),
            clean_scores=_scores_for_track(clean[object_id], object_id,
                                           clean_source, report, "clean"),
            conditions=dict(tags),
        ))
    if not series:
        raise ValueError("no object appears in both patched and clean tracks")
    return series, report
