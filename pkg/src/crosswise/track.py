"""Greedy IoU + constant-velocity track association, and crop-pose merging.

A deliberately simple tracker: waiting-area targets are slow and sparse, so
greedy IoU matching with a distance-gated fallback holds identities well.
The interface isolates association so a heavier tracker could be swapped in.
All tie-breaks go to the lowest track id for determinism.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional

from .geom import GeometryError, IntersectionGeometry, ZoneKind
from .ingest import Detection, PoseDetection

IOU_MATCH_THRESHOLD = 0.3
DIST_GATE_FACTOR = 0.5       # of max(track bbox w, h)
POSE_GATE_FACTOR = 0.75      # of max(track bbox w, h)
RETIRE_AFTER_SECONDS = 2.0
HISTORY_CAPACITY = 64        # ring buffer, >= the 50-frame feature window


def iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class Track:
    track_id: int
    vru_class: str
    zone: ZoneKind
    history: Deque[tuple[int, tuple[float, float], tuple[float, float, float, float]]] = \
        field(default_factory=lambda: deque(maxlen=HISTORY_CAPACITY))
    last_seen: int = -1
    pose_latest: Optional[PoseDetection] = None  # full-frame coordinates

    @property
    def center(self) -> tuple[float, float]:
        return self.history[-1][1]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return self.history[-1][2]

    def predicted_center(self, frame_idx: int) -> tuple[float, float]:
        """Constant-velocity extrapolation from the last two history points."""
        if len(self.history) < 2:
            return self.center
        f1, p1, _ = self.history[-2]
        f2, p2, _ = self.history[-1]
        df = max(1, f2 - f1)
        vx = (p2[0] - p1[0]) / df
        vy = (p2[1] - p1[1]) / df
        dt = frame_idx - f2
        return (p2[0] + vx * dt, p2[1] + vy * dt)

    def observe(self, frame_idx: int, det: Detection, g: IntersectionGeometry) -> None:
        self.history.append((frame_idx, det.center, det.bbox))
        self.last_seen = frame_idx
        self.zone = g.classify_point(det.center)


@dataclass
class StepEvents:
    """What one association pass did, for the pipeline's bookkeeping."""

    updated: list[int] = field(default_factory=list)
    created: list[int] = field(default_factory=list)
    retired: list[int] = field(default_factory=list)


class TrackTable:
    """Owns the active track set; one pipeline stage updates it per frame."""

    def __init__(self, geometry: IntersectionGeometry):
        self.geometry = geometry
        self.tracks: dict[int, Track] = {}
        self._next_id = 1
        self._retire_after = int(RETIRE_AFTER_SECONDS * geometry.fps)

    def associate(self, detections: list[Detection], frame_idx: int) -> StepEvents:
        """Match detections to tracks, spawn the rest, retire stale tracks.

        Matching runs in two passes: greedy on descending IoU (>= 0.3), then
        the leftovers by distance to each track's extrapolated center gated
        at 0.5 * max(track bbox side).
        """
        events = StepEvents()
        free_tracks = set(self.tracks.keys())
        free_dets = set(range(len(detections)))

        pairs = []
        for tid in free_tracks:
            tb = self.tracks[tid].bbox
            for di in free_dets:
                v = iou(tb, detections[di].bbox)
                if v >= IOU_MATCH_THRESHOLD:
                    pairs.append((-v, tid, di))
        for _, tid, di in sorted(pairs):
            if tid in free_tracks and di in free_dets:
                self.tracks[tid].observe(frame_idx, detections[di], self.geometry)
                events.updated.append(tid)
                free_tracks.discard(tid)
                free_dets.discard(di)

        gated = []
        for tid in free_tracks:
            track = self.tracks[tid]
            px, py = track.predicted_center(frame_idx)
            gate = DIST_GATE_FACTOR * max(track.bbox[2], track.bbox[3])
            for di in free_dets:
                cx, cy = detections[di].center
                d = math.hypot(cx - px, cy - py)
                if d <= gate:
                    gated.append((d, tid, di))
        for _, tid, di in sorted(gated):
            if tid in free_tracks and di in free_dets:
                self.tracks[tid].observe(frame_idx, detections[di], self.geometry)
                events.updated.append(tid)
                free_tracks.discard(tid)
                free_dets.discard(di)

        for di in sorted(free_dets):
            det = detections[di]
            track = Track(self._next_id, det.vru_class,
                          self.geometry.classify_point(det.center))
            self._next_id += 1
            track.observe(frame_idx, det, self.geometry)
            self.tracks[track.track_id] = track
            events.created.append(track.track_id)

        for tid in sorted(self.tracks):
            if frame_idx - self.tracks[tid].last_seen > self._retire_after:
                del self.tracks[tid]
                events.retired.append(tid)

        events.updated.sort()
        return events

    def merge_pose(self, poses: list[PoseDetection]) -> list[int]:
        """Attach crop-frame poses to the nearest waiting/start-crossing track.

        Pose bboxes are translated to the full frame via the crop origin; a
        pose binds to the nearest eligible track center within 0.75 * max
        bbox side. One pose per track per frame; the nearest wins, then the
        lowest track id. Tracks already in a crossing zone never receive
        poses (the pose stage is switched off for them). Returns the track
        ids that received a pose.
        """
        eligible = [t for t in self.tracks.values() if t.zone.is_observing]
        if not eligible or not poses:
            return []

        candidates = []
        full_poses: list[Optional[PoseDetection]] = []
        cx0, cy0, _, _ = self.geometry.crop_rect
        for pi, pose in enumerate(poses):
            px, py = pose.center
            try:
                fx, fy = self.geometry.crop_to_full((px, py))
            except GeometryError:
                full_poses.append(None)  # center off the crop image: discard
                continue
            full_poses.append(pose.translated(cx0, cy0))
            for track in eligible:
                tx, ty = track.center
                gate = POSE_GATE_FACTOR * max(track.bbox[2], track.bbox[3])
                d = math.hypot(fx - tx, fy - ty)
                if d <= gate:
                    candidates.append((d, track.track_id, pi))

        assigned: list[int] = []
        used_tracks: set[int] = set()
        used_poses: set[int] = set()
        for d, tid, pi in sorted(candidates):
            if tid in used_tracks or pi in used_poses:
                continue
            self.tracks[tid].pose_latest = full_poses[pi]
            used_tracks.add(tid)
            used_poses.add(pi)
            assigned.append(tid)
        return sorted(assigned)
