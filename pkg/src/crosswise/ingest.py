"""Frame-record ingest: JSON-lines streams and the synthetic scenario generator.

The generator stands in for real camera footage: it spawns VRUs inside a
waiting area, lets them dwell with idle motion while their body and face
orientation converge toward the crosswalk they will take, then walks them
through the start-crossing buffer into the labeled crossing zone. Keypoints
come from a fixed 17-point skeletal template scaled to the bounding box, so
pose angles recovered downstream match the simulated orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .geom import IntersectionGeometry, point_in_polygon

VRU_CLASSES = ("pedestrian", "cyclist", "scooter", "e_scooter", "e_wheelchair")
CONDITIONS = ("day", "night", "rain")

N_KEYPOINTS = 17
KP_NOSE, KP_LEFT_SHOULDER, KP_RIGHT_SHOULDER = 0, 5, 6


class StreamFormatError(ValueError):
    """Malformed record stream; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]  # x, y, w, h in the full frame
    vru_class: str
    conf: float

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"detection bbox must have positive size: {self.bbox}")
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"detection conf out of [0,1]: {self.conf}")
        if self.vru_class not in VRU_CLASSES:
            raise ValueError(f"unknown VRU class {self.vru_class!r}")

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


@dataclass(frozen=True)
class PoseDetection:
    """One pose-model output in crop-image coordinates (COCO keypoint order)."""

    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (17, 3) of x, y, conf

    def __post_init__(self):
        kps = np.asarray(self.keypoints, dtype=float)
        if kps.shape != (N_KEYPOINTS, 3):
            raise ValueError(f"expected {N_KEYPOINTS} keypoints, got shape {kps.shape}")
        if np.any(kps[:, 2] < 0.0) or np.any(kps[:, 2] > 1.0):
            raise ValueError("keypoint confidences out of [0,1]")
        object.__setattr__(self, "keypoints", kps)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)

    def translated(self, dx: float, dy: float) -> "PoseDetection":
        kps = self.keypoints.copy()
        kps[:, 0] += dx
        kps[:, 1] += dy
        x, y, w, h = self.bbox
        return PoseDetection((x + dx, y + dy, w, h), kps)


@dataclass(frozen=True)
class FrameRecord:
    frame_idx: int
    ts_ms: int
    detections: tuple[Detection, ...]
    crop_poses: tuple[PoseDetection, ...]

    def __post_init__(self):
        if self.frame_idx < 0 or self.ts_ms < 0:
            raise ValueError("frame_idx and ts_ms must be non-negative")


# --- JSON-lines stream -----------------------------------------------------


def _record_to_obj(rec: FrameRecord) -> dict:
    return {
        "frame": rec.frame_idx,
        "ts_ms": rec.ts_ms,
        "dets": [{"bbox": list(d.bbox), "class": d.vru_class, "conf": d.conf}
                 for d in rec.detections],
        "poses": [{"bbox": list(p.bbox), "kps": p.keypoints.tolist()}
                  for p in rec.crop_poses],
    }


def _record_from_obj(obj: dict, line_no: int) -> FrameRecord:
    try:
        dets = tuple(
            Detection(tuple(float(v) for v in d["bbox"]), d["class"], float(d["conf"]))
            for d in obj.get("dets", []))
        poses = tuple(
            PoseDetection(tuple(float(v) for v in p["bbox"]),
                          np.asarray(p["kps"], dtype=float))
            for p in obj.get("poses", []))
        return FrameRecord(int(obj["frame"]), int(obj["ts_ms"]), dets, poses)
    except StreamFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise StreamFormatError(line_no, str(exc)) from exc


def write_stream(records: Iterable[FrameRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_obj(rec), separators=(",", ":")))
            fh.write("\n")


def read_stream(path: str | Path) -> Iterator[FrameRecord]:
    """Yield validated FrameRecords from a JSON-lines file, in file order.

    Raises StreamFormatError (with line number) for malformed lines,
    non-monotonic frame indices, or decreasing timestamps.
    """
    last_frame = -1
    last_ts = -1
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamFormatError(line_no, f"invalid JSON: {exc}") from exc
            rec = _record_from_obj(obj, line_no)
            if rec.frame_idx <= last_frame:
                raise StreamFormatError(
                    line_no, f"frame_idx {rec.frame_idx} not strictly increasing")
            if rec.ts_ms < last_ts:
                raise StreamFormatError(line_no, f"ts_ms {rec.ts_ms} decreased")
            last_frame, last_ts = rec.frame_idx, rec.ts_ms
            yield rec


# --- synthetic scenarios -----------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """Knobs for one synthetic intersection scenario."""

    n_vrus: int
    class_mix: dict[str, float] = field(default_factory=lambda: {"pedestrian": 1.0})
    label: Optional[str] = None      # force every VRU to one crosswalk; None alternates
    noise_sigma: float = 0.0         # keypoint jitter, px
    dropout: float = 0.0             # per-frame detection drop probability
    condition: str = "day"
    seed: int = 0
    max_concurrent: int = 6

    def __post_init__(self):
        if self.n_vrus <= 0:
            raise ValueError("n_vrus must be positive")
        total = sum(self.class_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"class mix must sum to 1, got {total}")
        for cls in self.class_mix:
            if cls not in VRU_CLASSES:
                raise ValueError(f"unknown VRU class {cls!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if self.label is not None and self.label not in ("A", "B"):
            raise ValueError("label must be A, B, or None")

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioSpec":
        return cls(
            n_vrus=int(obj["n_vrus"]),
            class_mix={k: float(v) for k, v in obj.get(
                "class_mix", {"pedestrian": 1.0}).items()},
            label=obj.get("label"),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            dropout=float(obj.get("dropout", 0.0)),
            condition=obj.get("condition", "day"),
            seed=int(obj.get("seed", 0)),
            max_concurrent=int(obj.get("max_concurrent", 6)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class VruTruth:
    """Ground truth for one simulated VRU, written alongside the record stream."""

    vru_id: int
    label: str
    vru_class: str
    spawn_frame: int
    exit_frame: int
    crossing_entry_frame: Optional[int]
    samples: list[tuple[int, float, float]]  # (frame, cx, cy) every SAMPLE_EVERY frames

    def center_at(self, frame: int) -> Optional[tuple[float, float]]:
        for f, x, y in self.samples:
            if f == frame:
                return (x, y)
        return None


SAMPLE_EVERY = 5

# Per-class bbox size (w, h, px) and walking speed (m/s).
_CLASS_SIZE = {
    "pedestrian": (34.0, 88.0),
    "cyclist": (46.0, 96.0),
    "scooter": (40.0, 90.0),
    "e_scooter": (40.0, 90.0),
    "e_wheelchair": (54.0, 74.0),
}
_CLASS_SPEED_MS = {
    "pedestrian": 1.35,
    "cyclist": 2.6,
    "scooter": 2.0,
    "e_scooter": 2.4,
    "e_wheelchair": 1.5,
}

# Skeletal template coefficients, COCO order. Offset from the bbox center is
# A*h*facing + B*span*perp + (0, C*h), span = 0.35*w. Shoulders sit 0.25*h
# below the bbox top, hips 0.55*h; only nose and shoulders drive features.
_KP_TEMPLATE = np.array([
    # A      B      C
    [0.10,  0.00, -0.25],   # nose
    [0.08,  0.15, -0.25],   # left eye
    [0.08, -0.15, -0.25],   # right eye
    [0.04,  0.30, -0.25],   # left ear
    [0.04, -0.30, -0.25],   # right ear
    [0.00,  0.50, -0.25],   # left shoulder
    [0.00, -0.50, -0.25],   # right shoulder
    [0.02,  0.55, -0.06],   # left elbow
    [0.02, -0.55, -0.06],   # right elbow
    [0.05,  0.58,  0.08],   # left wrist
    [0.05, -0.58,  0.08],   # right wrist
    [0.00,  0.34,  0.05],   # left hip
    [0.00, -0.34,  0.05],   # right hip
    [0.01,  0.30,  0.27],   # left knee
    [0.01, -0.30,  0.27],   # right knee
    [0.02,  0.26,  0.47],   # left ankle
    [0.02, -0.26,  0.47],   # right ankle
])

_ORIENT_JITTER = math.radians(40.0)  # initial body offset from the entry bearing
_ORIENT_FRAMES = 40                   # frames over which the offset decays to 0
_IDLE_SIGMA = 0.35                    # px per frame of idle drift while waiting
_DWELL_RANGE = (90, 161)              # frames
_POST_CROSS_FRAMES = 30               # frames walked after entering the crossing zone
_EDGE_MARGIN = 10.0                   # keep idle motion off shared zone edges


def _condition_noise(spec: ScenarioSpec) -> tuple[float, float]:
    sigma, dropout = spec.noise_sigma, spec.dropout
    if spec.condition == "night":
        sigma *= 2.0
        dropout += 0.05
    elif spec.condition == "rain":
        sigma *= 1.5
        dropout += 0.05
    return sigma, min(dropout, 0.95)


@dataclass
class _SimTrack:
    vru_id: int
    label: str
    vru_class: str
    spawn_frame: int
    centers: np.ndarray       # (n, 2)
    body_angles: np.ndarray   # (n,)
    bbox_wh: tuple[float, float]
    crossing_entry: Optional[int]
    face_angles: np.ndarray


def _sample_in_polygon(rng: np.random.Generator, poly, margin: float) -> tuple[float, float]:
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    lo = (min(xs) + margin, min(ys) + margin)
    hi = (max(xs) - margin, max(ys) - margin)
    for _ in range(1000):
        x = rng.uniform(lo[0], hi[0])
        y = rng.uniform(lo[1], hi[1])
        if point_in_polygon((x, y), poly):
            return (x, y)
    raise ValueError("could not place a VRU inside the waiting area")


def _simulate_vru(rng: np.random.Generator, vru_id: int, label: str, vru_class: str,
                  spawn_frame: int, g: IntersectionGeometry, sigma: float) -> _SimTrack:
    wait = g.waiting_areas[vru_id % len(g.waiting_areas)]
    entry = g.crosswalk_entries[label]
    cross_zone = next(z for z in g.crossing_zones if z.label == label)
    ccx = sum(p[0] for p in cross_zone.polygon) / len(cross_zone.polygon)
    ccy = sum(p[1] for p in cross_zone.polygon) / len(cross_zone.polygon)
    axis = math.atan2(ccy - entry[1], ccx - entry[0])

    w0, h0 = _CLASS_SIZE[vru_class]
    scale = rng.uniform(0.9, 1.1)
    bbox_wh = (w0 * scale, h0 * scale)
    ppm = g.px_per_meter if g.px_per_meter else 50.0
    speed = _CLASS_SPEED_MS[vru_class] * rng.uniform(0.9, 1.15) * ppm / g.fps

    dwell = int(rng.integers(*_DWELL_RANGE))
    offset0 = rng.uniform(-_ORIENT_JITTER, _ORIENT_JITTER)
    wobble = 0.006 * sigma

    x, y = _sample_in_polygon(rng, wait.polygon, _EDGE_MARGIN)
    xs = [p[0] for p in wait.polygon]
    ys = [p[1] for p in wait.polygon]
    lox, hix = min(xs) + _EDGE_MARGIN, max(xs) - _EDGE_MARGIN
    loy, hiy = min(ys) + _EDGE_MARGIN, max(ys) - _EDGE_MARGIN

    centers, body, face = [], [], []
    for k in range(dwell):
        dx, dy = rng.normal(0.0, _IDLE_SIGMA, 2)
        nx, ny = x + dx, y + dy
        if lox <= nx <= hix and loy <= ny <= hiy and point_in_polygon((nx, ny), wait.polygon):
            x, y = nx, ny
        bearing = math.atan2(entry[1] - y, entry[0] - x)
        decay = min(1.0, (dwell - k) / float(_ORIENT_FRAMES))
        b = bearing + offset0 * decay
        f = bearing + 0.3 * offset0 * decay
        if wobble > 0:
            b += rng.normal(0.0, wobble)
            f += rng.normal(0.0, wobble)
        centers.append((x, y))
        body.append(b)
        face.append(f)

    crossing_entry = None
    frames_after_cross = 0
    for _ in range(2000):
        dx, dy = entry[0] - x, entry[1] - y
        if math.hypot(dx, dy) > speed:
            heading = math.atan2(dy, dx)
        else:
            heading = axis
        x += speed * math.cos(heading)
        y += speed * math.sin(heading)
        centers.append((x, y))
        body.append(heading)
        face.append(heading)
        frame = spawn_frame + len(centers) - 1
        if crossing_entry is None and point_in_polygon((x, y), cross_zone.polygon):
            crossing_entry = frame
        if crossing_entry is not None:
            frames_after_cross += 1
            if frames_after_cross >= _POST_CROSS_FRAMES:
                break
        if not (0 <= x <= g.frame_size[0] and 0 <= y <= g.frame_size[1]):
            break

    return _SimTrack(vru_id, label, vru_class, spawn_frame,
                     np.asarray(centers), np.asarray(body), bbox_wh,
                     crossing_entry, np.asarray(face))


def _keypoints_for(sim: _SimTrack, k: int, rng: np.random.Generator,
                   sigma: float) -> np.ndarray:
    cx, cy = sim.centers[k]
    w, h = sim.bbox_wh
    span = 0.35 * w
    phi_b = sim.body_angles[k]
    phi_f = sim.face_angles[k]
    fb = np.array([math.cos(phi_b), math.sin(phi_b)])
    ff = np.array([math.cos(phi_f), math.sin(phi_f)])
    perp = np.array([-fb[1], fb[0]])

    pts = (np.array([cx, cy])
           + np.outer(_KP_TEMPLATE[:, 0] * h, fb)
           + np.outer(_KP_TEMPLATE[:, 1] * span, perp)
           + np.outer(_KP_TEMPLATE[:, 2] * h, np.array([0.0, 1.0])))
    # Nose carries the face direction so the face angle is recoverable.
    mid = (pts[KP_LEFT_SHOULDER] + pts[KP_RIGHT_SHOULDER]) / 2.0
    pts[KP_NOSE] = mid + 0.10 * h * ff

    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    conf = rng.uniform(0.55, 0.95, N_KEYPOINTS)
    conf[KP_LEFT_SHOULDER] = rng.uniform(0.70, 0.98)
    conf[KP_RIGHT_SHOULDER] = rng.uniform(0.70, 0.98)
    conf = np.clip(conf - min(0.3, sigma * 0.03), 0.05, 1.0)
    return np.column_stack([pts, conf])


def generate_scenario(spec: ScenarioSpec,
                      g: IntersectionGeometry) -> tuple[list[FrameRecord], list[VruTruth]]:
    """Build a deterministic synthetic record stream plus per-VRU ground truth."""
    rng = np.random.default_rng(spec.seed)
    sigma, dropout = _condition_noise(spec)

    classes = list(spec.class_mix.keys())
    probs = np.array([spec.class_mix[c] for c in classes])

    sims: list[_SimTrack] = []
    avg_len = (sum(_DWELL_RANGE) // 2) + 110
    gap = max(12, avg_len // max(1, spec.max_concurrent))
    for i in range(spec.n_vrus):
        vru_class = classes[int(rng.choice(len(classes), p=probs))]
        label = spec.label if spec.label else ("A" if i % 2 == 0 else "B")
        spawn = i * gap + int(rng.integers(0, 6))
        sims.append(_simulate_vru(rng, i, label, vru_class, spawn, g, sigma))

    truths = [VruTruth(
        vru_id=s.vru_id, label=s.label, vru_class=s.vru_class,
        spawn_frame=s.spawn_frame,
        exit_frame=s.spawn_frame + len(s.centers) - 1,
        crossing_entry_frame=s.crossing_entry,
        samples=[(s.spawn_frame + k, float(s.centers[k, 0]), float(s.centers[k, 1]))
                 for k in range(len(s.centers))
                 if (s.spawn_frame + k) % SAMPLE_EVERY == 0],
    ) for s in sims]

    cx0, cy0, cw, ch = g.crop_rect
    night = spec.condition == "night"
    rain = spec.condition == "rain"
    last_frame = max(t.exit_frame for t in truths)

    records: list[FrameRecord] = []
    for frame in range(last_frame + 1):
        dets: list[Detection] = []
        poses: list[PoseDetection] = []
        for sim in sims:
            k = frame - sim.spawn_frame
            if k < 0 or k >= len(sim.centers):
                continue
            if dropout > 0 and rng.random() < dropout:
                continue
            x, y = sim.centers[k]
            w, h = sim.bbox_wh
            conf = rng.uniform(0.75, 0.95)
            if night:
                conf -= 0.08
            elif rain:
                conf -= 0.05
            dets.append(Detection((x - w / 2.0, y - h / 2.0, w, h),
                                  sim.vru_class, round(max(0.3, conf), 4)))
            in_crop = (cx0 <= x <= cx0 + cw) and (cy0 <= y <= cy0 + ch)
            crossing = sim.crossing_entry is not None and frame >= sim.crossing_entry
            if in_crop and not crossing:
                kps = _keypoints_for(sim, k, rng, sigma)
                kps[:, 0] -= cx0
                kps[:, 1] -= cy0
                poses.append(PoseDetection(
                    (x - w / 2.0 - cx0, y - h / 2.0 - cy0, w, h), kps))
        records.append(FrameRecord(
            frame_idx=frame,
            ts_ms=round(frame * 1000.0 / g.fps),
            detections=tuple(dets),
            crop_poses=tuple(poses),
        ))
    return records, truths


# --- ground-truth file -------------------------------------------------------


def write_labels(truths: list[VruTruth], path: str | Path) -> None:
    obj = {"schema": "crosswise-labels/1", "vrus": [
        {"vru_id": t.vru_id, "label": t.label, "class": t.vru_class,
         "spawn_frame": t.spawn_frame, "exit_frame": t.exit_frame,
         "crossing_entry_frame": t.crossing_entry_frame,
         "samples": [[f, x, y] for f, x, y in t.samples]}
        for t in truths]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def read_labels(path: str | Path) -> list[VruTruth]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return [VruTruth(
        vru_id=int(v["vru_id"]), label=v["label"], vru_class=v["class"],
        spawn_frame=int(v["spawn_frame"]), exit_frame=int(v["exit_frame"]),
        crossing_entry_frame=(int(v["crossing_entry_frame"])
                              if v["crossing_entry_frame"] is not None else None),
        samples=[(int(f), float(x), float(y)) for f, x, y in v["samples"]],
    ) for v in obj["vrus"]]
