"""Synthetic long-bone voxel phantoms.

Generates a reproducible population of curved-tube phantoms (hollow shaft,
ellipsoidal flared ends) on a regular voxel grid.  Each specimen is a
deterministic function of its seed, so datasets can be regenerated
bit-identically.  Volumes are stored in a small binary format (``VVOL``)
together with a JSON-lines population manifest.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"VVOL"
VOLUME_VERSION = 1

DEFAULT_DIMS = (64, 64, 160)
DEFAULT_SPACING = (0.5, 0.5, 0.5)


class ParameterError(ValueError):
    """Phantom parameters outside their admissible domain."""


class PopulationError(ValueError):
    """Invalid population request (e.g. zero specimens)."""


class VolumeIOError(IOError):
    """Corrupt, truncated or wrong-version volume file."""


@dataclass(frozen=True)
class PhantomParams:
    """Shape and density parameters of one phantom.

    Lengths and radii are in mm; densities are normalized attenuation
    coefficients (dimensionless).  ``condyle_radii`` are the semi-axes of
    the ellipsoids forming the flared ends.
    """

    length: float = 68.0
    shaft_radius: float = 6.0
    shaft_curvature: float = 0.003  # 1/mm, curvature of the shaft arc
    condyle_radii: tuple[float, float, float] = (10.0, 9.0, 8.0)
    cortical_density: float = 0.85
    marrow_density: float = 0.12
    background_density: float = 0.0

    def validate(self) -> None:
        r = self.condyle_radii
        if len(r) != 3 or any(v <= 0 for v in r):
            raise ParameterError(f"condyle_radii must be 3 positive values, got {r}")
        if self.shaft_radius <= 0:
            raise ParameterError(f"shaft_radius must be > 0, got {self.shaft_radius}")
        if self.length <= 4.0 * self.shaft_radius:
            raise ParameterError(
                f"length {self.length} must exceed 4 x shaft_radius "
                f"({4.0 * self.shaft_radius})"
            )
        if self.shaft_curvature < 0:
            raise ParameterError("shaft_curvature must be >= 0")
        if not (0.5 <= self.cortical_density <= 1.0):
            raise ParameterError(f"cortical_density {self.cortical_density} not in [0.5, 1.0]")
        if not (0.05 <= self.marrow_density <= 0.2):
            raise ParameterError(f"marrow_density {self.marrow_density} not in [0.05, 0.2]")
        if not (0.0 <= self.background_density <= 0.05):
            raise ParameterError(
                f"background_density {self.background_density} not in [0.0, 0.05]"
            )
        if not (self.cortical_density > self.marrow_density > self.background_density):
            raise ParameterError(
                "densities must satisfy cortical > marrow > background, got "
                f"{self.cortical_density} / {self.marrow_density} / {self.background_density}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["condyle_radii"] = list(self.condyle_radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        kwargs = dict(d)
        kwargs["condyle_radii"] = tuple(kwargs["condyle_radii"])
        return cls(**kwargs)


@dataclass
class VoxelVolume:
    """3D scalar density grid with physical voxel spacing.

    ``data`` has shape ``(nx, ny, nz)``; on disk it is serialized
    x-fastest (Fortran order of that shape).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def validate(self) -> None:
        nx, ny, nz = self.dims
        if self.data.shape != (nx, ny, nz):
            raise ParameterError(f"data shape {self.data.shape} != dims {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("volume contains non-finite densities")
        if np.any(self.data < 0):
            raise ParameterError("volume contains negative densities")

    def extent_mm(self) -> tuple[float, float, float]:
        """Physical edge lengths of the grid in mm."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def world_coordinates(self):
        """1D voxel-center coordinate arrays (x, y, z) in mm, grid-centered."""
        return tuple(
            (np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(self.dims, self.spacing)
        )


@dataclass
class SpecimenRecord:
    specimen_id: int
    seed: int
    params: PhantomParams
    volume: VoxelVolume


def _ellipsoid_field(x, y, z, center, semi_axes):
    # Approximate signed distance: scaled radial residual times the
    # smallest semi-axis, accurate near the surface which is all the
    # smoothing step needs.
    cx, cy, cz = center
    a, b, c = semi_axes
    q = np.sqrt(((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2)
    return (q - 1.0) * min(a, b, c)


def _rasterize(params: PhantomParams, dims, spacing) -> np.ndarray:
    nx, ny, nz = dims
    sx, sy, sz = spacing
    x = (np.arange(nx) - (nx - 1) / 2.0) * sx
    y = (np.arange(ny) - (ny - 1) / 2.0) * sy
    z = (np.arange(nz) - (nz - 1) / 2.0) * sz
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")

    L = params.length
    r = params.shaft_radius
    curv = params.shaft_curvature
    ca, cb, cc = params.condyle_radii
    half_shaft = L / 2.0 - cc  # shaft reaches the end-ellipsoid centers

    extent = (nx * sx, ny * sy, nz * sz)
    # Occupancy decays to exact background half a smoothing width past the
    # surface, so half a voxel of clearance guarantees a clean border.
    margin = 0.5 * min(spacing)
    head_offset = 0.25 * ca
    bow = curv * half_shaft**2 / 3.0
    reach_x = max(bow + r, bow + head_offset + ca, bow + 0.85 * ca)
    reach_y = max(r, cb, 0.5 * cb + 0.62 * cb)
    if L / 2.0 + margin > extent[2] / 2.0:
        raise ParameterError(f"phantom length {L} mm does not fit grid extent {extent[2]} mm")
    if reach_x + margin > extent[0] / 2.0 or reach_y + margin > extent[1] / 2.0:
        raise ParameterError("phantom cross-section does not fit grid extent")

    # Shaft axis bowed along x; zero-mean offset keeps the bone centered.
    x0 = 0.5 * curv * (Z**2 - half_shaft**2 / 3.0)
    radial = np.sqrt((X - x0) ** 2 + Y**2)
    f_shaft = np.maximum(radial - r, np.abs(Z) - half_shaft)

    # Marrow cavity: narrower tube, capped well before the ends.
    f_cavity = np.maximum(radial - 0.62 * r, np.abs(Z) - (half_shaft - 2.0 * r))

    # Proximal end: one laterally offset ellipsoid ("head").
    zp = half_shaft
    xp = 0.5 * curv * (zp**2 - half_shaft**2 / 3.0)
    f_head = _ellipsoid_field(X, Y, Z, (xp - head_offset, 0.0, zp), (ca, cb, cc))

    # Distal end: two side-by-side ellipsoids ("condyles").
    zd = -half_shaft
    xd = 0.5 * curv * (zd**2 - half_shaft**2 / 3.0)
    cond_axes = (0.85 * ca, 0.62 * cb, cc)
    f_c1 = _ellipsoid_field(X, Y, Z, (xd, +0.5 * cb, zd), cond_axes)
    f_c2 = _ellipsoid_field(X, Y, Z, (xd, -0.5 * cb, zd), cond_axes)

    f_bone = np.minimum(np.minimum(f_shaft, f_head), np.minimum(f_c1, f_c2))

    # One-voxel smoothstep across each implicit boundary.
    w = min(spacing)
    occ_bone = np.clip(0.5 - f_bone / w, 0.0, 1.0)
    occ_cavity = np.clip(0.5 - f_cavity / w, 0.0, 1.0)

    density = params.background_density + (
        params.cortical_density - params.background_density
    ) * occ_bone
    density -= (params.cortical_density - params.marrow_density) * occ_cavity * occ_bone
    return density.astype(np.float32)


def _perturbed_params(base: PhantomParams, variation: float, rng: np.random.Generator):
    # One uniform factor per scalar field, drawn in a fixed order.
    draws = rng.uniform(1.0 - variation, 1.0 + variation, size=9)
    return PhantomParams(
        length=float(base.length * draws[0]),
        shaft_radius=float(base.shaft_radius * draws[1]),
        shaft_curvature=float(base.shaft_curvature * draws[2]),
        condyle_radii=(
            float(base.condyle_radii[0] * draws[3]),
            float(base.condyle_radii[1] * draws[4]),
            float(base.condyle_radii[2] * draws[5]),
        ),
        cortical_density=float(base.cortical_density * draws[6]),
        marrow_density=float(base.marrow_density * draws[7]),
        background_density=float(base.background_density * draws[8]),
    )


def generate_specimen(
    seed: int,
    base: PhantomParams | None = None,
    variation: float = 0.1,
    dims=DEFAULT_DIMS,
    spacing=DEFAULT_SPACING,
) -> tuple[VoxelVolume, PhantomParams]:
    """Generate one phantom volume with seeded shape variation.

    Realized parameters are the base values perturbed multiplicatively by
    uniform draws in [1 - variation, 1 + variation].  Deterministic for a
    fixed (seed, base, variation, dims, spacing).
    """
    if base is None:
        base = PhantomParams()
    base.validate()
    if not (0.0 <= variation <= 0.5):
        raise ParameterError(f"variation {variation} not in [0, 0.5]")
    rng = np.random.Generator(np.random.PCG64(seed))
    if variation == 0.0:
        realized = base
    else:
        realized = _perturbed_params(base, variation, rng)
    realized.validate()
    data = _rasterize(realized, dims, spacing)
    vol = VoxelVolume(dims=tuple(dims), spacing=tuple(spacing), data=data)
    vol.validate()
    return vol, realized


def specimen_seed(population_seed: int, specimen_id: int) -> int:
    """Derived per-specimen seed; distinct and stable per (seed, id)."""
    ss = np.random.SeedSequence([int(population_seed), int(specimen_id)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_population(
    n: int,
    seed: int,
    base: PhantomParams | None = None,
    variation: float = 0.1,
    dims=DEFAULT_DIMS,
    spacing=DEFAULT_SPACING,
) -> list[SpecimenRecord]:
    """Generate ``n`` specimens with ids 0..n-1 and distinct derived seeds."""
    if n < 1:
        raise PopulationError(f"population size must be >= 1, got {n}")
    records = []
    for sid in range(n):
        child = specimen_seed(seed, sid)
        vol, realized = generate_specimen(child, base, variation, dims, spacing)
        records.append(SpecimenRecord(sid, child, realized, vol))
    return records


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_volume(volume: VoxelVolume, path) -> None:
    """Write a volume in the VVOL binary format (little-endian, x-fastest)."""
    volume.validate()
    nx, ny, nz = volume.dims
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<B", VOLUME_VERSION))
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<3f", *volume.spacing))
        f.write(np.asarray(volume.data, dtype="<f4").flatten(order="F").tobytes())


def load_volume(path) -> VoxelVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeIOError(f"{path}: bad magic {raw[:4]!r}")
    version = raw[4]
    if version != VOLUME_VERSION:
        raise VolumeIOError(f"{path}: unsupported volume version {version}")
    header_end = 5 + 12 + 12
    if len(raw) < header_end:
        raise VolumeIOError(f"{path}: truncated header")
    nx, ny, nz = struct.unpack_from("<3I", raw, 5)
    spacing = struct.unpack_from("<3f", raw, 17)
    expected = header_end + 4 * nx * ny * nz
    if len(raw) != expected:
        raise VolumeIOError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw[header_end:], dtype="<f4").reshape((nx, ny, nz), order="F")
    vol = VoxelVolume(dims=(nx, ny, nz), spacing=tuple(float(s) for s in spacing),
                      data=np.array(data))
    vol.validate()
    return vol


def save_population(records: list[SpecimenRecord], out_dir) -> Path:
    """Write all volumes plus a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "population.jsonl"
    with open(manifest_path, "w") as mf:
        for rec in records:
            vol_path = out_dir / f"specimen_{rec.specimen_id:03d}.vvol"
            save_volume(rec.volume, vol_path)
            row = {
                "specimen_id": rec.specimen_id,
                "seed": rec.seed,
                "params": rec.params.to_dict(),
                "volume_path": vol_path.name,
            }
            mf.write(json.dumps(row) + "\n")
    return manifest_path


def load_population(manifest_path) -> list[SpecimenRecord]:
    manifest_path = Path(manifest_path)
    records = []
    with open(manifest_path) as mf:
        for line in mf:
            row = json.loads(line)
            vol = load_volume(manifest_path.parent / row["volume_path"])
            records.append(
                SpecimenRecord(
                    specimen_id=int(row["specimen_id"]),
                    seed=int(row["seed"]),
                    params=PhantomParams.from_dict(row["params"]),
                    volume=vol,
                )
            )
    return records
