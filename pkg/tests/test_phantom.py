import numpy as np
import pytest
import scipy.ndimage as ndi

from osteoprint.phantom import (
    ParameterError,
    PhantomParams,
    PopulationError,
    VolumeIOError,
    generate_population,
    generate_specimen,
    load_population,
    load_volume,
    save_population,
    save_volume,
)

SMALL_DIMS = (32, 32, 80)
SMALL_SPACING = (1.0, 1.0, 1.0)


def small_specimen(seed, variation=0.1, base=None):
    return generate_specimen(seed, base=base, variation=variation,
                             dims=SMALL_DIMS, spacing=SMALL_SPACING)


class TestGenerateSpecimen:
    def test_deterministic(self):
        v1, p1 = small_specimen(7)
        v2, p2 = small_specimen(7)
        assert np.array_equal(v1.data, v2.data)
        assert p1 == p2

    def test_distinct_seeds_differ(self):
        v1, _ = small_specimen(7)
        v2, _ = small_specimen(8)
        assert np.any(v1.data != v2.data)

    def test_zero_variation_keeps_base(self):
        base = PhantomParams()
        _, realized = small_specimen(5, variation=0.0, base=base)
        assert realized == base

    def test_invalid_variation_rejected(self):
        with pytest.raises(ParameterError):
            small_specimen(1, variation=0.6)

    def test_invalid_base_rejected(self):
        bad = PhantomParams(length=10.0, shaft_radius=6.0)  # violates length > 4r
        with pytest.raises(ParameterError):
            small_specimen(1, base=bad)

    def test_density_ordering_enforced(self):
        with pytest.raises(ParameterError):
            PhantomParams(marrow_density=0.3).validate()  # above allowed range
        # boundary: marrow must stay strictly above background
        with pytest.raises(ParameterError):
            PhantomParams(marrow_density=0.05, background_density=0.05).validate()

    def test_oversized_phantom_rejected(self):
        base = PhantomParams(length=120.0)
        with pytest.raises(ParameterError):
            generate_specimen(1, base=base, variation=0.0,
                              dims=(32, 32, 64), spacing=(1.0, 1.0, 1.0))


class TestDensityInvariants:
    def test_density_range(self):
        for seed in range(5):
            vol, p = small_specimen(seed)
            assert vol.data.min() >= 0.0
            assert vol.data.max() <= p.cortical_density + 1e-6

    def test_cortical_voxels_single_component(self):
        # Flood-fill oracle: 26-connected labeling of the cortical set.
        structure = np.ones((3, 3, 3), dtype=bool)
        for seed in range(5):
            vol, p = small_specimen(seed)
            mask = vol.data >= p.cortical_density - 1e-4
            assert mask.any()
            _, n = ndi.label(mask, structure=structure)
            assert n == 1

    def test_marrow_cavity_present(self):
        vol, p = small_specimen(3)
        near_marrow = np.abs(vol.data - p.marrow_density) < 1e-3
        assert near_marrow.any()


class TestPopulation:
    def test_full_scale_population_count(self):
        records = generate_population(29, seed=1, dims=(16, 16, 40),
                                      spacing=(2.0, 2.0, 2.0))
        assert len(records) == 29
        assert [r.specimen_id for r in records] == list(range(29))

    def test_single_specimen(self):
        records = generate_population(1, seed=1, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        assert len(records) == 1
        assert records[0].specimen_id == 0

    def test_empty_population_rejected(self):
        with pytest.raises(PopulationError):
            generate_population(0, seed=1)

    def test_population_deterministic(self):
        a = generate_population(3, seed=9, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        b = generate_population(3, seed=9, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        for ra, rb in zip(a, b):
            assert ra.seed == rb.seed
            assert ra.params == rb.params
            assert np.array_equal(ra.volume.data, rb.volume.data)

    def test_specimen_seeds_distinct(self):
        records = generate_population(8, seed=2, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        seeds = [r.seed for r in records]
        assert len(set(seeds)) == len(seeds)


class TestVolumeIO:
    def test_round_trip(self, tmp_path):
        vol, _ = small_specimen(4)
        path = tmp_path / "v.vvol"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.dims == vol.dims
        assert back.spacing == pytest.approx(vol.spacing)
        assert np.array_equal(back.data, vol.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vvol"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(VolumeIOError):
            load_volume(path)

    def test_truncated(self, tmp_path):
        vol, _ = small_specimen(4)
        path = tmp_path / "v.vvol"
        save_volume(vol, path)
        data = path.read_bytes()
        path.write_bytes(data[:-17])
        with pytest.raises(VolumeIOError):
            load_volume(path)

    def test_version_mismatch(self, tmp_path):
        vol, _ = small_specimen(4)
        path = tmp_path / "v.vvol"
        save_volume(vol, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeIOError):
            load_volume(path)

    def test_population_manifest_round_trip(self, tmp_path):
        records = generate_population(3, seed=6, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        manifest = save_population(records, tmp_path)
        back = load_population(manifest)
        assert [r.specimen_id for r in back] == [0, 1, 2]
        for ra, rb in zip(records, back):
            assert ra.params == rb.params
            assert np.array_equal(ra.volume.data, rb.volume.data)

    def test_manifest_regeneration_identical(self, tmp_path):
        r1 = generate_population(2, seed=6, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        r2 = generate_population(2, seed=6, dims=SMALL_DIMS, spacing=SMALL_SPACING)
        m1 = save_population(r1, tmp_path / "a")
        m2 = save_population(r2, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for i in range(2):
            fa = (tmp_path / "a" / f"specimen_{i:03d}.vvol").read_bytes()
            fb = (tmp_path / "b" / f"specimen_{i:03d}.vvol").read_bytes()
            assert fa == fb
