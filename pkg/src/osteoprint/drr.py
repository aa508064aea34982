"""Parametric X-ray projection rendering and 2D dataset generation.

Volumes are projected with an orthographic parallel beam: the volume is
rotated about its X axis by ``rx`` and about its Y axis by ``ry`` (the ML
view adds a 90 degree pre-rotation about the long axis), rays run along
the world Z axis, and each detector pixel integrates attenuation by
trilinear sampling at half-voxel steps.  Pixel values follow
``1 - exp(-integral)`` scaled by the source intensity and clamped to
[0, 1].  Rendered views are blurred, composed side by side (AP left, ML
right), scale-normalized against a known-size ruler, and persisted as
16-bit binary PGM plus a JSON-lines manifest.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .phantom import SpecimenRecord, VoxelVolume

AP = "AP"
ML = "ML"
COMBINED = "COMBINED"

MANIFEST_NAME = "dataset.jsonl"


class GridError(ValueError):
    """Pose/energy grid with an empty dimension or bad steps."""


class RenderError(ArithmeticError):
    """Non-finite or nonphysical values during projection."""


class CompositionError(ValueError):
    """AP/ML views that cannot be composed."""


class ScaleError(ValueError):
    """Scale normalization would require upscaling."""


class ImageIOError(IOError):
    """Malformed PGM data."""


def worker_count(requested: int | None = None) -> int:
    """Effective worker count, capped by the OSTEO_THREADS environment variable."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("OSTEO_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass(frozen=True)
class PoseEnergy:
    """Viewing pose (degrees) and radiation energy (keV) of one projection."""

    rx: float
    ry: float
    energy: float


@dataclass(frozen=True)
class GridConfig:
    rx_interval: tuple[float, float] = (70.0, 112.0)
    rx_step: float = 3.0
    ry_interval: tuple[float, float] = (-21.0, 22.0)
    ry_step: float = 3.0
    energy_interval: tuple[float, float] = (140.0, 161.0)
    energy_step: float = 6.0
    resolution: tuple[int, int] = (64, 128)  # per-view (width, height) px
    blur_sigma: float = 1.0
    i0: float = 1.0

    def validate(self) -> None:
        for step, name in ((self.rx_step, "rx_step"), (self.ry_step, "ry_step"),
                           (self.energy_step, "energy_step")):
            if step <= 0:
                raise GridError(f"{name} must be > 0, got {step}")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise GridError(f"resolution must be positive, got {self.resolution}")
        if self.blur_sigma < 0:
            raise GridError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


@dataclass
class ImageMeta:
    specimen_id: int
    view: str
    pose: PoseEnergy
    scale_ap: float = 1.0
    scale_ml: float = 1.0


@dataclass
class RadiographImage:
    """2D grayscale projection; ``pixels`` is (height, width) float32 in [0, 1]."""

    pixels: np.ndarray
    meta: ImageMeta

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> None:
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")


def _sequence(lo: float, hi: float, step: float) -> list[float]:
    tol = 1e-9 * max(1.0, abs(step))
    values = []
    k = 0
    while True:
        v = lo + k * step
        if v > hi + tol:
            break
        values.append(v)
        k += 1
    return values


def pose_grid(config: GridConfig) -> list[PoseEnergy]:
    """Cartesian pose/energy grid, rx-major, then ry, then energy."""
    config.validate()
    rxs = _sequence(*config.rx_interval, config.rx_step)
    rys = _sequence(*config.ry_interval, config.ry_step)
    energies = _sequence(*config.energy_interval, config.energy_step)
    for vals, name in ((rxs, "rx"), (rys, "ry"), (energies, "energy")):
        if not vals:
            raise GridError(f"{name} sequence is empty for the configured interval")
    return [PoseEnergy(rx, ry, e) for rx in rxs for ry in rys for e in energies]


def energy_lut(energy: float) -> float:
    """Monotone attenuation scale: higher energy penetrates more."""
    return 1.0 - 0.01 * (energy - 140.0)


def _rot_x(deg: float) -> np.ndarray:
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(deg: float) -> np.ndarray:
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(deg: float) -> np.ndarray:
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def detector_pixel_size(volume: VoxelVolume, config: GridConfig) -> float:
    """mm per detector pixel: the volume diagonal always fits the image height."""
    extent = np.array(volume.extent_mm())
    return float(np.linalg.norm(extent) / config.resolution[1])


PAD = 2  # zero-voxel border so trilinear sampling never needs bounds masks


def _pad_volume(data: np.ndarray) -> np.ndarray:
    padded = np.zeros(tuple(n + 2 * PAD for n in data.shape), dtype=np.float32)
    padded[PAD:-PAD, PAD:-PAD, PAD:-PAD] = data
    return padded


def _trilinear_sample(padded_flat, padded_dims, px, py, pz):
    """Trilinear samples at fractional padded-grid coordinates.

    Coordinates come as contiguous per-component arrays.  Points beyond
    the padding clamp into the zero border, so values match zero-outside
    interpolation exactly.
    """
    nx, ny, nz = padded_dims
    ix = np.floor(px)
    iy = np.floor(py)
    iz = np.floor(pz)
    fx = px - ix
    fy = py - iy
    fz = pz - iz
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    ix = np.clip(ix.astype(np.int32), 0, nx - 2)
    iy = np.clip(iy.astype(np.int32), 0, ny - 2)
    iz = np.clip(iz.astype(np.int32), 0, nz - 2)
    flat0 = (ix * ny + iy) * nz + iz
    oy, ox = nz, ny * nz

    c00 = padded_flat[flat0] * gz + padded_flat[flat0 + 1] * fz
    c01 = padded_flat[flat0 + oy] * gz + padded_flat[flat0 + oy + 1] * fz
    c10 = padded_flat[flat0 + ox] * gz + padded_flat[flat0 + ox + 1] * fz
    c11 = padded_flat[flat0 + ox + oy] * gz + padded_flat[flat0 + ox + oy + 1] * fz
    c0 = c00 * gy + c01 * fy
    c1 = c10 * gy + c11 * fy
    return c0 * gx + c1 * fx


def render_projection(volume: VoxelVolume, pose: PoseEnergy, view: str,
                      config: GridConfig) -> RadiographImage:
    """Orthographic parallel-beam projection of one volume.

    Deterministic; raises :class:`RenderError` on non-finite accumulation
    or a nonphysical energy (non-positive attenuation scale).
    """
    volume.validate()
    config.validate()
    if view not in (AP, ML):
        raise ValueError(f"view must be AP or ML, got {view!r}")
    lut = energy_lut(pose.energy)
    if lut <= 0:
        raise RenderError(f"energy {pose.energy} keV gives non-positive attenuation")

    rot = _rot_y(pose.ry) @ _rot_x(pose.rx)
    if view == ML:
        rot = rot @ _rot_z(90.0)

    w_px, h_px = config.resolution
    pitch = detector_pixel_size(volume, config)
    xs = (np.arange(w_px) - (w_px - 1) / 2.0) * pitch
    ys = ((h_px - 1) / 2.0 - np.arange(h_px)) * pitch
    px_x, px_y = np.meshgrid(xs, ys)  # (h, w)

    # Ray extent along world z from the rotated bounding box corners.
    half = np.array(volume.extent_mm()) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-half[0], half[0])
                        for sy in (-half[1], half[1]) for sz in (-half[2], half[2])])
    zw = (corners @ rot.T)[:, 2]
    step = min(volume.spacing) / 2.0
    t0, t1 = zw.min() - step, zw.max() + step
    n_steps = int(np.ceil((t1 - t0) / step)) + 1

    # World -> object: v = R^T w; world points vary only along z per step.
    base_world = np.column_stack([px_x.ravel(), px_y.ravel(), np.full(px_x.size, t0)])
    base_obj = (base_world @ rot).astype(np.float32)
    dir_obj = (rot[2, :] * step).astype(np.float32)
    spacing = np.asarray(volume.spacing, dtype=np.float32)
    origin = (np.array(volume.dims, dtype=np.float32) - 1.0) / 2.0 + PAD
    base_idx = base_obj / spacing + origin
    dir_idx = dir_obj / spacing

    padded = _pad_volume(volume.data)
    padded_flat = padded.reshape(-1)
    acc = np.zeros(px_x.size, dtype=np.float64)
    chunk = max(1, int(2.5e6) // px_x.size)
    for s0 in range(0, n_steps, chunk):
        ks = np.arange(s0, min(s0 + chunk, n_steps), dtype=np.float32)[:, None]
        px = np.ascontiguousarray(base_idx[None, :, 0] + ks * dir_idx[0]).reshape(-1)
        py = np.ascontiguousarray(base_idx[None, :, 1] + ks * dir_idx[1]).reshape(-1)
        pz = np.ascontiguousarray(base_idx[None, :, 2] + ks * dir_idx[2]).reshape(-1)
        samples = _trilinear_sample(padded_flat, padded.shape, px, py, pz)
        acc += samples.reshape(len(ks), -1).sum(axis=0, dtype=np.float64)

    integral = acc * (lut * step)
    if not np.all(np.isfinite(integral)):
        raise RenderError("non-finite attenuation integral")
    pixels = np.clip(config.i0 * (1.0 - np.exp(-integral)), 0.0, 1.0)
    image = RadiographImage(pixels.reshape(h_px, w_px).astype(np.float32),
                            ImageMeta(specimen_id=-1, view=view, pose=pose))
    image.validate()
    return image


def gaussian_blur(image: RadiographImage, sigma: float) -> RadiographImage:
    """Separable Gaussian blur, kernel truncated at 3 sigma, replicate edges."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return RadiographImage(image.pixels.copy(), dataclasses.replace(image.meta))
    blurred = ndi.gaussian_filter(image.pixels.astype(np.float64), sigma=sigma,
                                  mode="nearest", truncate=3.0)
    pixels = np.clip(blurred, 0.0, 1.0).astype(np.float32)
    return RadiographImage(pixels, dataclasses.replace(image.meta))


def compose_views(ap: RadiographImage, ml: RadiographImage) -> RadiographImage:
    """Concatenate AP (left) and ML (right) views of the same projection."""
    if ap.meta.view != AP or ml.meta.view != ML:
        raise CompositionError(
            f"expected AP and ML views, got {ap.meta.view} and {ml.meta.view}"
        )
    if ap.height != ml.height:
        raise CompositionError(f"height mismatch: {ap.height} vs {ml.height}")
    if ap.meta.specimen_id != ml.meta.specimen_id:
        raise CompositionError(
            f"specimen mismatch: {ap.meta.specimen_id} vs {ml.meta.specimen_id}"
        )
    if ap.meta.pose != ml.meta.pose:
        raise CompositionError("pose mismatch between views")
    pixels = np.hstack([ap.pixels, ml.pixels])
    meta = ImageMeta(ap.meta.specimen_id, COMBINED, ap.meta.pose,
                     scale_ap=ap.meta.scale_ap, scale_ml=ml.meta.scale_ml)
    return RadiographImage(pixels, meta)


# ---------------------------------------------------------------------------
# Scale normalization
# ---------------------------------------------------------------------------

def choose_target_px_per_mm(ruler_px_values, ruler_mm: float) -> float:
    """Target resolution from the smallest ruler so no image needs upscaling."""
    values = [float(v) for v in np.ravel(np.asarray(ruler_px_values, dtype=object))]
    if not values or min(values) <= 0:
        raise ScaleError("ruler sizes must be positive")
    return min(values) / ruler_mm


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _shrink_and_pad(half: np.ndarray, c: float) -> np.ndarray:
    if c == 1.0:
        return half.copy()
    h, w = half.shape
    new_h = max(1, int(round(h * c)))
    new_w = max(1, int(round(w * c)))
    small = _resize_bilinear(half, new_h, new_w)
    out = np.zeros((h, w), dtype=np.float64)
    top = (h - new_h) // 2
    left = (w - new_w) // 2
    out[top:top + new_h, left:left + new_w] = small
    return out


def scale_normalize(images: list[RadiographImage], ruler_px, ruler_mm: float,
                    target_px_per_mm: float) -> list[RadiographImage]:
    """Shrink image content so the ruler spans the same pixels everywhere.

    ``ruler_px`` holds one measured ruler size per image: a scalar for
    single-view images, an (ap, ml) pair for combined images, whose halves
    are scaled independently.  Shrunk content is centered and padded with
    black back to the original resolution.
    """
    if len(ruler_px) != len(images):
        raise ScaleError(f"{len(ruler_px)} ruler values for {len(images)} images")
    out = []
    for image, ruler in zip(images, ruler_px):
        combined = image.meta.view == COMBINED
        rulers = tuple(np.ravel(ruler).astype(float))
        if combined and len(rulers) != 2:
            raise ScaleError("combined images need an (ap, ml) ruler pair")
        if not combined and len(rulers) != 1:
            raise ScaleError("single-view images need one ruler value")
        coeffs = []
        for r in rulers:
            if r <= 0:
                raise ScaleError(f"ruler size must be positive, got {r}")
            c = target_px_per_mm * ruler_mm / r
            if c > 1.0 + 1e-9:
                raise ScaleError(
                    f"coefficient {c:.6f} > 1 would upscale content; "
                    "choose the target from the smallest ruler"
                )
            coeffs.append(min(c, 1.0))
        if combined:
            w_half = image.width // 2
            left = _shrink_and_pad(image.pixels[:, :w_half], coeffs[0])
            right = _shrink_and_pad(image.pixels[:, w_half:], coeffs[1])
            pixels = np.hstack([left, right])
            meta = dataclasses.replace(image.meta, scale_ap=coeffs[0], scale_ml=coeffs[1])
        else:
            pixels = _shrink_and_pad(image.pixels, coeffs[0])
            if image.meta.view == AP:
                meta = dataclasses.replace(image.meta, scale_ap=coeffs[0])
            else:
                meta = dataclasses.replace(image.meta, scale_ml=coeffs[0])
        out.append(RadiographImage(np.clip(pixels, 0.0, 1.0).astype(np.float32), meta))
    return out


# ---------------------------------------------------------------------------
# PGM persistence
# ---------------------------------------------------------------------------

def write_pgm16(pixels: np.ndarray, path) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian samples)."""
    h, w = pixels.shape
    samples = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(samples.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit binary PGM into float32 pixels in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ImageIOError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 65535:
        raise ImageIOError(f"{path}: expected maxval 65535, got {maxval}")
    data = np.frombuffer(raw, dtype=">u2", offset=m.end(), count=-1)
    if data.size != w * h:
        raise ImageIOError(f"{path}: expected {w * h} samples, got {data.size}")
    return (data.reshape(h, w).astype(np.float32)) / 65535.0


# ---------------------------------------------------------------------------
# Dataset rendering
# ---------------------------------------------------------------------------

def plan_dataset(specimen_ids: list[int], config: GridConfig) -> list[dict]:
    """Manifest rows (without pixel data) for every specimen x grid entry."""
    grid = pose_grid(config)
    rows = []
    for sid in specimen_ids:
        for image_id, pose in enumerate(grid):
            rows.append({
                "specimen_id": int(sid),
                "image_id": int(image_id),
                "rx": float(pose.rx),
                "ry": float(pose.ry),
                "energy": float(pose.energy),
                "view": COMBINED,
                "scale_ap": 1.0,
                "scale_ml": 1.0,
                "path": f"s{sid:03d}_i{image_id:04d}.pgm",
            })
    return rows


def render_combined_image(volume: VoxelVolume, specimen_id: int, pose: PoseEnergy,
                          config: GridConfig,
                          target_px_per_mm: float | None = None,
                          ruler_mm: float = 10.0) -> RadiographImage:
    """Full per-image pipeline: render both views, blur, compose, normalize."""
    views = {}
    for view in (AP, ML):
        img = render_projection(volume, pose, view, config)
        img.meta.specimen_id = specimen_id
        views[view] = gaussian_blur(img, config.blur_sigma)
    combined = compose_views(views[AP], views[ML])
    ruler_px = ruler_mm / detector_pixel_size(volume, config)
    if target_px_per_mm is None:
        target_px_per_mm = choose_target_px_per_mm([ruler_px], ruler_mm)
    return scale_normalize([combined], [(ruler_px, ruler_px)], ruler_mm,
                           target_px_per_mm)[0]


def render_dataset(population: list[SpecimenRecord], config: GridConfig, out_dir,
                   threads: int | None = None,
                   ruler_mm: float = 10.0) -> list[dict]:
    """Render, post-process and persist the full labeled image dataset.

    Writes one combined PGM per specimen x grid entry plus ``dataset.jsonl``;
    file contents are deterministic for fixed inputs regardless of the
    worker count.  Returns the manifest rows.
    """
    if not population:
        raise ValueError("population must be non-empty")
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = pose_grid(config)
    volumes = {rec.specimen_id: rec.volume for rec in population}
    rows = plan_dataset(sorted(volumes), config)

    # All volumes share the detector geometry, so the common ruler defines
    # the target and per-image coefficients come out of scale_normalize.
    rulers = {sid: ruler_mm / detector_pixel_size(vol, config)
              for sid, vol in volumes.items()}
    target = choose_target_px_per_mm(list(rulers.values()), ruler_mm)

    def _render_row(row):
        pose = grid[row["image_id"]]
        path = out_dir / row["path"]
        try:
            image = render_combined_image(volumes[row["specimen_id"]],
                                          row["specimen_id"], pose, config,
                                          target_px_per_mm=target, ruler_mm=ruler_mm)
            write_pgm16(image.pixels, path)
        except OSError as err:
            raise IOError(f"failed writing {path}: {err}") from err
        return dict(row, scale_ap=image.meta.scale_ap, scale_ml=image.meta.scale_ml)

    n_workers = worker_count(threads)
    if n_workers <= 1:
        done = [_render_row(row) for row in rows]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
            done = list(pool.map(_render_row, rows))
    done.sort(key=lambda r: (r["specimen_id"], r["image_id"]))
    save_dataset_manifest(done, out_dir / MANIFEST_NAME)
    return done


def save_dataset_manifest(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def load_dataset_manifest(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            rows.append(json.loads(line))
    return rows


def load_manifest_images(rows: list[dict], base_dir) -> np.ndarray:
    """Stack the manifest's images into an (n, height, width) float32 array."""
    base_dir = Path(base_dir)
    images = []
    for row in rows:
        path = base_dir / row["path"]
        try:
            images.append(read_pgm16(path))
        except FileNotFoundError as err:
            raise IOError(f"missing image file: {path}") from err
    return np.stack(images) if images else np.zeros((0, 0, 0), dtype=np.float32)
