"""Axis-aligned box math and polygon helpers shared by spotting and evaluation.

Boxes are (x_min, y_min, x_max, y_max); polygons are (U, 2) arrays of control
points. All coordinates are normalized to [0, 1] unless noted.
"""

from __future__ import annotations

import numpy as np


class BoxError(ValueError):
    """Inverted or otherwise invalid box coordinates."""


def validate_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,):
        raise BoxError(f"box must have 4 coordinates, got shape {b.shape}")
    if b[0] > b[2] or b[1] > b[3]:
        raise BoxError(f"inverted box {b.tolist()} (min must not exceed max)")
    return b


def box_area(box) -> float:
    b = np.asarray(box, dtype=np.float64)
    return float(max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0))


def box_intersection(a, b) -> float:
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[2], b[2])
    y1 = min(a[3], b[3])
    return float(max(x1 - x0, 0.0) * max(y1 - y0, 0.0))


def box_iou(a, b) -> float:
    a = validate_box(a)
    b = validate_box(b)
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def giou(box_a, box_b) -> float:
    """Generalized IoU in (-1, 1]: IoU minus the enclosing-box dead-area ratio.

    Degenerate zero-area boxes are allowed and yield finite values.
    """
    a = validate_box(box_a)
    b = validate_box(box_b)
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    iou = inter / union if union > 0 else 0.0
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if enclose <= 0:
        return iou
    return iou - (enclose - union) / enclose


def polygon_hull_box(polygon) -> np.ndarray:
    """Axis-aligned bounding box of a control-point polygon."""
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
        raise BoxError(f"polygon must be (U, 2), got shape {pts.shape}")
    return np.array([pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()])


def resample_polygon(polygon, num_points: int) -> np.ndarray:
    """Resample a closed polygon to `num_points` control points by arc-length
    interpolation along its edges. Vertices of the input are not necessarily
    preserved, but the traced contour is."""
    pts = np.asarray(polygon, dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(pts[:1], num_points, axis=0)
    targets = np.linspace(0.0, total, num_points, endpoint=False)
    out = np.empty((num_points, 2))
    for i, s in enumerate(targets):
        k = int(np.searchsorted(cum, s, side="right") - 1)
        k = min(k, len(seg) - 1)
        frac = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        out[i] = closed[k] + frac * (closed[k + 1] - closed[k])
    return out


def box_to_polygon(box, num_points: int = 4) -> np.ndarray:
    b = validate_box(box)
    corners = np.array([[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]]])
    if num_points == 4:
        return corners
    return resample_polygon(corners, num_points)


def cxcywh_to_xyxy(box) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
