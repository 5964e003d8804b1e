"""Intersection zone geometry: polygon zones, containment queries, crop mapping.

Zones are declared per camera in a JSON config (image-plane pixel
coordinates) and are immutable after load, so any number of pipeline
workers may query the same instance concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

Point = tuple[float, float]
Polygon = Sequence[Point]


class GeometryError(ValueError):
    """Raised for invalid zone configs or out-of-bounds coordinate maps."""


class ZoneType(Enum):
    OUTSIDE = "outside"
    WAITING = "waiting"
    START_CROSSING = "start_crossing"
    CROSSING = "crossing"


# Resolution order when zones overlap: a VRU on a crosswalk is crossing
# no matter what else contains the point.
ZONE_PRIORITY = {
    ZoneType.OUTSIDE: 0,
    ZoneType.WAITING: 1,
    ZoneType.START_CROSSING: 2,
    ZoneType.CROSSING: 3,
}


@dataclass(frozen=True)
class ZoneKind:
    """Result of a point classification: which kind of zone, and which zone."""

    kind: ZoneType
    zone_id: Optional[str] = None
    label: Optional[str] = None  # crosswalk letter (A/B) where the zone carries one

    @property
    def is_observing(self) -> bool:
        """True in the zones where pose extraction and prediction are active."""
        return self.kind in (ZoneType.WAITING, ZoneType.START_CROSSING)


OUTSIDE = ZoneKind(ZoneType.OUTSIDE)


@dataclass(frozen=True)
class Zone:
    zone_id: str
    polygon: tuple[Point, ...]
    label: Optional[str] = None


def polygon_area(poly: Polygon) -> float:
    """Unsigned shoelace area of a polygon."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def _on_segment(px: float, py: float, ax: float, ay: float, bx: float, by: float,
                eps: float = 1e-9) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps * max(1.0, abs(bx - ax) + abs(by - ay)):
        return False
    return (min(ax, bx) - eps <= px <= max(ax, bx) + eps
            and min(ay, by) - eps <= py <= max(ay, by) + eps)


def point_in_polygon(p: Point, poly: Polygon) -> bool:
    """Even-odd (ray casting) containment test; boundary points count as inside.

    Raises GeometryError for polygons with fewer than 3 vertices or zero area.
    """
    if len(poly) < 3:
        raise GeometryError(f"polygon needs >= 3 vertices, got {len(poly)}")
    if polygon_area(poly) <= 0.0:
        raise GeometryError("degenerate polygon with zero area")
    x, y = p
    n = len(poly)
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if _on_segment(x, y, xi, yi, xj, yj):
            return True
        if (yi > y) != (yj > y):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
            if x < x_cross:
                inside = not inside
        j = i
    return inside


@dataclass(frozen=True)
class IntersectionGeometry:
    """Declared zones of interest for one camera view.

    ``crop_rect`` is the (x, y, w, h) region handed to the pose model; it must
    contain every waiting-area polygon. ``px_per_meter`` converts speeds to
    m/s when present, otherwise speeds stay in normalized pixel units.
    """

    waiting_areas: tuple[Zone, ...]
    start_crossing_zones: tuple[Zone, ...]
    crossing_zones: tuple[Zone, ...]
    crosswalk_entries: dict[str, Point]
    crop_rect: tuple[float, float, float, float]
    fps: int
    px_per_meter: Optional[float] = None
    frame_size: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        if self.fps <= 0:
            raise GeometryError(f"fps must be positive, got {self.fps}")
        if self.px_per_meter is not None and self.px_per_meter <= 0:
            raise GeometryError("px_per_meter must be positive when set")
        cx, cy, cw, ch = self.crop_rect
        if cw <= 0 or ch <= 0:
            raise GeometryError("crop_rect must have positive size")
        for zone in (*self.waiting_areas, *self.start_crossing_zones, *self.crossing_zones):
            if len(zone.polygon) < 3 or polygon_area(zone.polygon) <= 0.0:
                raise GeometryError(f"zone {zone.zone_id!r} polygon is degenerate")
        for zone in self.waiting_areas:
            for (px, py) in zone.polygon:
                if not (cx <= px <= cx + cw and cy <= py <= cy + ch):
                    raise GeometryError(
                        f"crop_rect does not contain waiting area {zone.zone_id!r}")
        labels = sorted({z.label for z in self.crossing_zones if z.label})
        if labels != ["A", "B"]:
            raise GeometryError(
                f"crossing zones must carry labels A and B, got {labels}")
        for letter in ("A", "B"):
            if letter not in self.crosswalk_entries:
                raise GeometryError(f"missing crosswalk entry {letter!r}")
        if self.frame_size == (0.0, 0.0):
            object.__setattr__(self, "frame_size", self._default_frame_size())

    def _default_frame_size(self) -> tuple[float, float]:
        xs = [self.crop_rect[0] + self.crop_rect[2]]
        ys = [self.crop_rect[1] + self.crop_rect[3]]
        for zone in (*self.waiting_areas, *self.start_crossing_zones, *self.crossing_zones):
            xs.extend(p[0] for p in zone.polygon)
            ys.extend(p[1] for p in zone.polygon)
        return (float(math.ceil(max(xs))), float(math.ceil(max(ys))))

    @property
    def frame_diagonal(self) -> float:
        return math.hypot(self.frame_size[0], self.frame_size[1])

    @property
    def frame_area(self) -> float:
        return self.frame_size[0] * self.frame_size[1]

    # --- queries ---------------------------------------------------------

    def classify_point(self, p: Point) -> ZoneKind:
        """Map a full-frame point to its zone.

        Total: every point maps to exactly one ZoneKind. Overlaps resolve by
        priority Crossing > StartCrossing > Waiting > Outside; within one
        priority tier the first zone in declaration order wins.
        """
        for zones, kind in ((self.crossing_zones, ZoneType.CROSSING),
                            (self.start_crossing_zones, ZoneType.START_CROSSING),
                            (self.waiting_areas, ZoneType.WAITING)):
            for zone in zones:
                if point_in_polygon(p, zone.polygon):
                    return ZoneKind(kind, zone.zone_id, zone.label)
        return OUTSIDE

    def crop_to_full(self, p: Point) -> Point:
        """Translate a crop-image point back to full-frame coordinates."""
        cx, cy, cw, ch = self.crop_rect
        x, y = p
        if not (0.0 <= x <= cw and 0.0 <= y <= ch):
            raise GeometryError(f"point {p} outside crop bounds {cw}x{ch}")
        return (cx + x, cy + y)

    def full_to_crop(self, p: Point) -> Point:
        """Inverse of crop_to_full; errors when the point is not in the crop."""
        cx, cy, cw, ch = self.crop_rect
        x, y = p[0] - cx, p[1] - cy
        if not (0.0 <= x <= cw and 0.0 <= y <= ch):
            raise GeometryError(f"point {p} outside crop rect")
        return (x, y)

    def waiting_area_for(self, p: Point) -> Optional[Zone]:
        """The waiting area containing p, else the nearest one by centroid."""
        for zone in self.waiting_areas:
            if point_in_polygon(p, zone.polygon):
                return zone
        if not self.waiting_areas:
            return None
        def centroid_dist(zone: Zone) -> float:
            cx = sum(q[0] for q in zone.polygon) / len(zone.polygon)
            cy = sum(q[1] for q in zone.polygon) / len(zone.polygon)
            return math.hypot(p[0] - cx, p[1] - cy)
        return min(self.waiting_areas, key=centroid_dist)

    # --- config file -----------------------------------------------------

    @classmethod
    def from_dict(cls, cfg: dict) -> "IntersectionGeometry":
        def zones(key: str) -> tuple[Zone, ...]:
            out = []
            for item in cfg.get(key, []):
                out.append(Zone(
                    zone_id=str(item["id"]),
                    polygon=tuple((float(x), float(y)) for x, y in item["polygon"]),
                    label=item.get("label"),
                ))
            return tuple(out)

        entries = {k: (float(v[0]), float(v[1]))
                   for k, v in cfg["crosswalk_entries"].items()}
        frame_size = cfg.get("frame_size")
        return cls(
            waiting_areas=zones("waiting_areas"),
            start_crossing_zones=zones("start_crossing_zones"),
            crossing_zones=zones("crossing_zones"),
            crosswalk_entries=entries,
            crop_rect=tuple(float(v) for v in cfg["crop_rect"]),
            fps=int(cfg["fps"]),
            px_per_meter=(float(cfg["px_per_meter"])
                          if cfg.get("px_per_meter") is not None else None),
            frame_size=(tuple(float(v) for v in frame_size)
                        if frame_size else (0.0, 0.0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "IntersectionGeometry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        def zones(items: tuple[Zone, ...]) -> list:
            return [{"id": z.zone_id, "label": z.label,
                     "polygon": [[x, y] for x, y in z.polygon]} for z in items]

        return {
            "fps": self.fps,
            "px_per_meter": self.px_per_meter,
            "frame_size": list(self.frame_size),
            "crop_rect": list(self.crop_rect),
            "waiting_areas": zones(self.waiting_areas),
            "start_crossing_zones": zones(self.start_crossing_zones),
            "crossing_zones": zones(self.crossing_zones),
            "crosswalk_entries": {k: list(v) for k, v in self.crosswalk_entries.items()},
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def demo_geometry(fps: int = 20, px_per_meter: Optional[float] = 50.0) -> IntersectionGeometry:
    """A canonical one-corner intersection used by the simulator and tests.

    One waiting area in the frame's lower middle serving crosswalk A (west)
    and crosswalk B (north); start-crossing buffers sit between the waiting
    area and each crosswalk.
    """
    return IntersectionGeometry(
        waiting_areas=(
            Zone("wait", ((520.0, 420.0), (680.0, 420.0), (680.0, 560.0), (520.0, 560.0))),
        ),
        start_crossing_zones=(
            Zone("start_a", ((440.0, 420.0), (520.0, 420.0), (520.0, 560.0), (440.0, 560.0)), "A"),
            Zone("start_b", ((520.0, 340.0), (680.0, 340.0), (680.0, 420.0), (520.0, 420.0)), "B"),
        ),
        crossing_zones=(
            Zone("cross_a", ((200.0, 420.0), (440.0, 420.0), (440.0, 560.0), (200.0, 560.0)), "A"),
            Zone("cross_b", ((520.0, 100.0), (680.0, 100.0), (680.0, 340.0), (520.0, 340.0)), "B"),
        ),
        crosswalk_entries={"A": (440.0, 490.0), "B": (600.0, 340.0)},
        crop_rect=(480.0, 380.0, 240.0, 200.0),
        fps=fps,
        px_per_meter=px_per_meter,
        frame_size=(1280.0, 720.0),
    )
