"""Synthesis of fisheye-distorted head-pose samples with location labels.

The pipeline takes a flat labeled face image (or a rendered pose marker),
pastes its face crop onto a large neutral canvas at a sampled polar
location, pushes the whole canvas through the fisheye mapping, transports
the face box through the same mapping, and crops a fixed-size sample
around it.  Pose labels ride along unchanged; the sampled location becomes
the location label.

Rasters are uint8 (H, W, 3) row-major with row 0 at the top.  Conversions
between pixel and normalized coordinates go through geometry.ImageGeometry.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as geo
from .geometry import (
    BoundingBox,
    ImageGeometry,
    NormalizedPoint,
    PolarLocation,
    from_polar,
    transport_box,
)

log = logging.getLogger(__name__)

DEFAULT_FILL = (128, 128, 128)


class PlacementError(RuntimeError):
    """Requested placement pushes the face crop off the canvas."""


class ManifestError(ValueError):
    """Manifest file is malformed or carries invalid labels."""


@dataclass(frozen=True)
class EulerAngles:
    """Head pose in degrees: pitch (up/down), yaw (left/right), roll (tilt)."""

    pitch: float
    yaw: float
    roll: float

    def __post_init__(self):
        for name, v in (("pitch", self.pitch), ("yaw", self.yaw), ("roll", self.roll)):
            if not math.isfinite(v) or abs(v) > 180.0:
                raise ValueError(f"{name} must be a finite angle in [-180, 180], got {v!r}")


@dataclass(frozen=True)
class PixelBox:
    """Integer pixel box, half-open: columns [left, right), rows [top, bottom)."""

    left: int
    top: int
    right: int
    bottom: int

    def __post_init__(self):
        if self.right <= self.left or self.bottom <= self.top:
            raise ValueError(f"empty pixel box {self}")

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top


@dataclass
class SourceSample:
    """Flat labeled input: full image, face box, pose, optional landmarks."""

    image: np.ndarray
    face_box: PixelBox
    pose: EulerAngles
    source_id: str
    landmarks: np.ndarray | None = None


@dataclass
class FisheyeSample:
    """Synthesized training sample: distorted crop, pose, polar location."""

    image: np.ndarray
    pose: EulerAngles
    location: PolarLocation
    source_id: str
    landmarks: np.ndarray | None = None


@dataclass(frozen=True)
class CanvasSpec:
    """Canvas assembly parameters: side = scale * max(face box dims)."""

    scale: float = 5.0
    fill: tuple = DEFAULT_FILL
    crop_margin: float = 1.2
    crop_size: int = 224


# ---------------------------------------------------------------------------
# bilinear resampling


def _bilinear(img: np.ndarray, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Clamp-to-edge bilinear sampling of an (H, W, 3) image at float positions."""
    h, w = img.shape[:2]
    c = np.clip(cols, 0.0, w - 1.0)
    r = np.clip(rows, 0.0, h - 1.0)
    c0 = np.floor(c).astype(np.intp)
    r0 = np.floor(r).astype(np.intp)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fc = (c - c0)[..., None]
    fr = (r - r0)[..., None]
    img = img.astype(np.float64)
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# marker rendering

# Rigid tri-colored gnomon, mirror-symmetric about the x = 0 plane: a red
# crossbar along x, a green stem hanging down y, a blue nose toward the
# camera along +z.  The asymmetric arm lengths plus depth shading make the
# projected silhouette pose-unambiguous.
_MARKER_ARMS = (
    ((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), (208, 58, 48)),
    ((0.0, 0.0, 0.0), (0.0, -1.25, 0.0), (56, 186, 74)),
    ((0.0, 0.0, 0.0), (0.0, 0.0, 0.8), (62, 88, 228)),
)
_MARKER_EXTENT = 1.25 + 0.14  # longest arm plus disc radius


@dataclass(frozen=True)
class MarkerSpec:
    render_size: int = 96
    background: tuple = DEFAULT_FILL
    disc_radius: float = 0.14
    discs_per_arm: int = 25
    depth_shade: float = 0.35

    @property
    def projection_scale(self) -> float:
        # Largest scale that keeps every rotation of the marker on-raster.
        return (self.render_size / 2.0 - 1.0) / _MARKER_EXTENT


def rotation_matrix(pose: EulerAngles) -> np.ndarray:
    """World-from-head rotation, applied as roll about z, pitch about x, yaw about y."""
    p, y, r = (math.radians(v) for v in (pose.pitch, pose.yaw, pose.roll))
    rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return rz @ rx @ ry


def render_marker(pose: EulerAngles, spec: MarkerSpec = MarkerSpec()):
    """Render the marker under a pose; returns (raster, tight PixelBox).

    Weak-perspective projection with painter-ordered depth-shaded discs;
    farther discs are both occluded and darker, so mirror-ambiguous poses
    produce distinct rasters.
    """
    size = spec.render_size
    rot = rotation_matrix(pose)
    centers = []
    colors = []
    for a, b, color in _MARKER_ARMS:
        t = np.linspace(0.0, 1.0, spec.discs_per_arm)[:, None]
        pts = (1.0 - t) * np.asarray(a) + t * np.asarray(b)
        centers.append(pts @ rot.T)
        colors.extend([color] * spec.discs_per_arm)
    centers = np.concatenate(centers, axis=0)
    order = np.argsort(centers[:, 2], kind="stable")  # far to near; stable for z ties

    raster = np.empty((size, size, 3), dtype=np.float64)
    raster[:] = spec.background
    half = (size - 1) / 2.0
    s = spec.projection_scale
    r_px = spec.disc_radius * s
    for k in order:
        cx, cy, cz = centers[k]
        px = half + s * cx
        py = half - s * cy
        zn = max(-1.0, min(1.0, cz / _MARKER_EXTENT))
        shade = 1.0 - spec.depth_shade * (1.0 - zn) / 2.0
        color = np.asarray(colors[k], dtype=np.float64) * shade
        lo_c = max(int(math.floor(px - r_px - 1)), 0)
        hi_c = min(int(math.ceil(px + r_px + 1)), size - 1)
        lo_r = max(int(math.floor(py - r_px - 1)), 0)
        hi_r = min(int(math.ceil(py + r_px + 1)), size - 1)
        if lo_c > hi_c or lo_r > hi_r:
            continue
        cols = np.arange(lo_c, hi_c + 1, dtype=np.float64)
        rows = np.arange(lo_r, hi_r + 1, dtype=np.float64)
        d = np.hypot(cols[None, :] - px, rows[:, None] - py)
        alpha = np.clip(r_px + 0.5 - d, 0.0, 1.0)[:, :, None]
        patch = raster[lo_r : hi_r + 1, lo_c : hi_c + 1]
        patch *= 1.0 - alpha
        patch += alpha * color
    out = _to_uint8(raster)

    bg = np.asarray(spec.background, dtype=np.uint8)
    nz = np.any(out != bg, axis=2)
    rows_nz = np.flatnonzero(nz.any(axis=1))
    cols_nz = np.flatnonzero(nz.any(axis=0))
    box = PixelBox(int(cols_nz[0]), int(rows_nz[0]), int(cols_nz[-1]) + 1, int(rows_nz[-1]) + 1)
    return out, box


def generate_marker_dataset(
    n: int,
    seed: int,
    spec: MarkerSpec = MarkerSpec(),
    pitch_range=(-60.0, 60.0),
    yaw_range=(-60.0, 60.0),
    roll_range=(-45.0, 45.0),
) -> list:
    """Render n markers with per-sample seeded poses drawn uniformly."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, i)))
        pose = EulerAngles(
            pitch=float(rng.uniform(*pitch_range)),
            yaw=float(rng.uniform(*yaw_range)),
            roll=float(rng.uniform(*roll_range)),
        )
        image, box = render_marker(pose, spec)
        out.append(SourceSample(image=image, face_box=box, pose=pose, source_id=f"marker-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# placement and canvas assembly


def sample_placement(rng, rho_max: float = 0.8) -> PolarLocation:
    """Uniform polar placement: rho in [0, rho_max), theta in [-180, 180)."""
    rho = float(rng.uniform(0.0, rho_max))
    theta = float(rng.uniform(-180.0, 180.0))
    return PolarLocation(theta, rho)


def build_canvas(source: SourceSample, loc: PolarLocation, spec: CanvasSpec = CanvasSpec()):
    """Paste the face crop onto a neutral canvas at the requested location.

    Returns (canvas, face box in canvas-normalized coordinates).  Raises
    PlacementError when the crop would clip the canvas edge.
    """
    box = source.face_box
    fw, fh = box.width, box.height
    side = int(round(spec.scale * max(fw, fh)))
    g = ImageGeometry(side, side)
    center = from_polar(loc)
    ccol, crow = g.to_pixel(center)
    left = int(round(ccol - (fw - 1) / 2.0))
    top = int(round(crow - (fh - 1) / 2.0))
    if left < 0 or top < 0 or left + fw > side or top + fh > side:
        raise PlacementError(
            f"face box {fw}x{fh} at rho={loc.rho:.3f}, theta={loc.theta_deg:.1f} "
            f"clips the {side}px canvas"
        )
    canvas = np.empty((side, side, 3), dtype=np.uint8)
    canvas[:] = np.asarray(spec.fill, dtype=np.uint8)
    canvas[top : top + fh, left : left + fw] = source.image[box.top : box.bottom, box.left : box.right]

    center_norm = g.to_normalized(left + (fw - 1) / 2.0, top + (fh - 1) / 2.0)
    nbox = BoundingBox(
        center=center_norm,
        half_width=(fw - 1) / 2.0 / g.half_width,
        half_height=(fh - 1) / 2.0 / g.half_height,
    )
    return canvas, nbox


# ---------------------------------------------------------------------------
# warping

_GRID_CACHE: dict = {}
_GRID_CACHE_CAP = 40


def _inverse_grid(width: int, height: int, tol: float):
    """Per-size cache of the destination-to-source pixel lookup.

    Returns (flat indices of in-disk pixels, source cols, source rows for
    those pixels).  Content-independent, so one grid serves every canvas of
    the same size.
    """
    key = (width, height, tol)
    hit = _GRID_CACHE.get(key)
    if hit is not None:
        return hit
    g = ImageGeometry(width, height)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    nx = (cols - g.half_width) / g.half_width
    ny = (g.half_height - rows) / g.half_height
    inside = np.hypot(nx, ny) <= geo.MAX_MAPPED_RADIUS
    idx = np.flatnonzero(inside.ravel())
    sx, sy, ok = geo.inverse_arrays(nx.ravel()[idx], ny.ravel()[idx], tol=tol, max_iter=60)
    idx = idx[ok]
    src_cols = g.half_width + sx[ok] * g.half_width
    src_rows = g.half_height - sy[ok] * g.half_height
    if len(_GRID_CACHE) >= _GRID_CACHE_CAP:
        _GRID_CACHE.pop(next(iter(_GRID_CACHE)))
    _GRID_CACHE[key] = (idx, src_cols, src_rows)
    return idx, src_cols, src_rows


def warp_canvas(canvas: np.ndarray, fill=DEFAULT_FILL, tol: float = 1e-8) -> np.ndarray:
    """Resample a raster through the fisheye mapping, destination-driven.

    Every output pixel inside the mapped disk is bilinearly sampled at its
    preimage; pixels outside the disk take the fill color.
    """
    h, w = canvas.shape[:2]
    idx, src_cols, src_rows = _inverse_grid(w, h, tol)
    out = np.empty((h * w, 3), dtype=np.float64)
    out[:] = fill
    out[idx] = _bilinear(canvas, src_cols, src_rows)
    return _to_uint8(out.reshape(h, w, 3))


# ---------------------------------------------------------------------------
# cropping


def _crop_axes(g: ImageGeometry, box: BoundingBox, margin: float, out_size: int):
    """Source sampling positions for a square crop around a normalized box."""
    half_px = max(box.half_width * g.half_width, box.half_height * g.half_height)
    half_px = max(half_px * margin, 1.0)
    ccol, crow = g.to_pixel(box.center)
    t = np.linspace(-1.0, 1.0, out_size)
    return ccol + t * half_px, crow + t * half_px


def crop_face(
    image: np.ndarray, box: BoundingBox, margin: float = 1.2, out_size: int = 224
) -> np.ndarray:
    """Square crop around the box, expanded by margin, resampled to out_size.

    Samples clamp at the image edge, which simply extends the surrounding
    fill when the box sits near the rim.
    """
    g = ImageGeometry(image.shape[1], image.shape[0])
    src_cols, src_rows = _crop_axes(g, box, margin, out_size)
    cols = np.broadcast_to(src_cols[None, :], (out_size, out_size))
    rows = np.broadcast_to(src_rows[:, None], (out_size, out_size))
    return _to_uint8(_bilinear(image, cols, rows))


# ---------------------------------------------------------------------------
# end-to-end synthesis


def synthesize_sample(
    source: SourceSample, loc: PolarLocation, spec: CanvasSpec = CanvasSpec()
) -> FisheyeSample:
    """Deterministically synthesize one sample at a given placement."""
    canvas, nbox = build_canvas(source, loc, spec)
    warped = warp_canvas(canvas, fill=spec.fill)
    tbox = transport_box(nbox)
    crop = crop_face(warped, tbox, margin=spec.crop_margin, out_size=spec.crop_size)

    landmarks = None
    if source.landmarks is not None:
        g = ImageGeometry(canvas.shape[1], canvas.shape[0])
        ccol, crow = g.to_pixel(nbox.center)
        left = ccol - (source.face_box.width - 1) / 2.0
        top = crow - (source.face_box.height - 1) / 2.0
        lcol = left + (source.landmarks[:, 0] - source.face_box.left)
        lrow = top + (source.landmarks[:, 1] - source.face_box.top)
        nx = (lcol - g.half_width) / g.half_width
        ny = (g.half_height - lrow) / g.half_height
        mx, my = geo.forward_arrays(nx, ny)
        wcol = g.half_width + mx * g.half_width
        wrow = g.half_height - my * g.half_height
        src_cols, src_rows = _crop_axes(g, tbox, spec.crop_margin, spec.crop_size)
        step_c = src_cols[1] - src_cols[0]
        step_r = src_rows[1] - src_rows[0]
        landmarks = np.stack(
            [(wcol - src_cols[0]) / step_c, (wrow - src_rows[0]) / step_r], axis=1
        )

    return FisheyeSample(
        image=crop,
        pose=source.pose,
        location=loc,
        source_id=source.source_id,
        landmarks=landmarks,
    )


def synthesize_dataset(
    sources,
    seed: int,
    spec: CanvasSpec = CanvasSpec(),
    rho_max: float = 0.8,
    max_retries: int = 20,
) -> list:
    """Synthesize one fisheye sample per source with per-sample seeded placement.

    Placements that clip the canvas are redrawn; sources that fail
    max_retries times are skipped with a warning.
    """
    out = []
    for i, source in enumerate(sources):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, i)))
        for _ in range(max_retries):
            loc = sample_placement(rng, rho_max=rho_max)
            try:
                out.append(synthesize_sample(source, loc, spec))
                break
            except PlacementError:
                continue
        else:
            log.warning("skipping %s: no valid placement in %d draws", source.source_id, max_retries)
    return out


# ---------------------------------------------------------------------------
# manifests and on-disk datasets


def write_manifest(rows, path) -> None:
    """Write records as JSON lines with sorted keys (byte-deterministic)."""
    path = Path(path)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def _require(row: dict, key: str, lineno, path):
    if key not in row:
        raise ManifestError(f"{path}:{lineno}: missing required field {key!r}")
    return row[key]


def _check_finite(row: dict, keys, lineno, path):
    for key in keys:
        v = _require(row, key, lineno, path)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise ManifestError(f"{path}:{lineno}: field {key!r} is not a finite number: {v!r}")


def read_manifest(path, required=("image", "source_id", "pitch", "yaw", "roll")) -> list:
    """Parse and validate a JSONL manifest; errors carry the line number."""
    path = Path(path)
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON record: {e.msg}") from None
            if not isinstance(row, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            numeric = [k for k in ("pitch", "yaw", "roll") if k in required]
            for key in required:
                _require(row, key, lineno, path)
            _check_finite(row, numeric, lineno, path)
            if "theta_deg" in row or "rho" in row:
                _check_finite(row, ("theta_deg", "rho"), lineno, path)
                if not 0.0 <= row["rho"] < 1.0:
                    raise ManifestError(f"{path}:{lineno}: rho {row['rho']!r} outside [0, 1)")
            if "box" in row:
                box = row["box"]
                if (
                    not isinstance(box, list)
                    or len(box) != 4
                    or not all(isinstance(v, int) for v in box)
                ):
                    raise ManifestError(f"{path}:{lineno}: box must be [left, top, right, bottom]")
            rows.append(row)
    return rows


def _save_image(image: np.ndarray, path: Path) -> None:
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_dataset(samples, out_dir) -> Path:
    """Write synthesized samples as PNGs plus a manifest; returns manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        rel = f"images/{i:05d}.png"
        _save_image(s.image, out_dir / rel)
        rows.append(
            {
                "image": rel,
                "source_id": s.source_id,
                "pitch": s.pose.pitch,
                "yaw": s.pose.yaw,
                "roll": s.pose.roll,
                "theta_deg": s.location.theta_deg,
                "rho": s.location.rho,
            }
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(rows, manifest)
    return manifest


def load_dataset(dataset_dir) -> list:
    dataset_dir = Path(dataset_dir)
    rows = read_manifest(dataset_dir / "manifest.jsonl")
    samples = []
    for row in rows:
        if "theta_deg" not in row:
            raise ManifestError(f"{dataset_dir}: record {row.get('source_id')} lacks a location")
        samples.append(
            FisheyeSample(
                image=_load_image(dataset_dir / row["image"]),
                pose=EulerAngles(row["pitch"], row["yaw"], row["roll"]),
                location=PolarLocation(row["theta_deg"], row["rho"]),
                source_id=str(row["source_id"]),
            )
        )
    return samples


def save_source_dataset(samples, out_dir) -> Path:
    """Write flat source samples (image + face box + pose) with a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        rel = f"images/{i:05d}.png"
        _save_image(s.image, out_dir / rel)
        rows.append(
            {
                "image": rel,
                "source_id": s.source_id,
                "pitch": s.pose.pitch,
                "yaw": s.pose.yaw,
                "roll": s.pose.roll,
                "box": [s.face_box.left, s.face_box.top, s.face_box.right, s.face_box.bottom],
            }
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(rows, manifest)
    return manifest


def load_source_dataset(dataset_dir) -> list:
    dataset_dir = Path(dataset_dir)
    rows = read_manifest(
        dataset_dir / "manifest.jsonl",
        required=("image", "source_id", "pitch", "yaw", "roll", "box"),
    )
    samples = []
    for row in rows:
        samples.append(
            SourceSample(
                image=_load_image(dataset_dir / row["image"]),
                face_box=PixelBox(*row["box"]),
                pose=EulerAngles(row["pitch"], row["yaw"], row["roll"]),
                source_id=str(row["source_id"]),
            )
        )
    return samples
