"""Subpocket carving, cavity invariants, and the two spatial concepts."""

import math

import numpy as np
import pytest

from fraglink.chem import vdw_radius
from fraglink.fragment import Fragment
from fraglink.geom import canonical_frame, fibonacci_sphere, rotation_matrix
from fraglink.pocket import (
    DEFAULT_POCKET_CONFIG,
    EmptySubpocketError,
    PocketConfig,
    Subpocket,
    compute_spatial_factors,
    extract_subpocket,
    nonpolar_occupation,
    subpocket_from_residues,
    surface_complementarity,
)
from fixtures_mols import carbon_cage, mol, protein


def single_atom_arm(symbol="C", x=0.0, y=0.0, z=0.0) -> Fragment:
    return Fragment.from_molecule(mol([(symbol, x, y, z)], []))


def cage_protein(radius=4.5, n=24):
    return protein(carbon_cage(radius=radius, n=n))


def stub_subpocket(prot, indices, sp_id=0) -> Subpocket:
    return Subpocket(
        id=sp_id,
        protein=prot,
        protein_atoms=tuple(indices),
        center=(0.0, 0.0, 0.0),
        voxel_centers=np.zeros((0, 3)),
        voxel_nonpolar=np.zeros(0, dtype=bool),
        capacity=0,
    )


class TestExtraction:
    def test_cage_membership(self):
        prot = cage_protein()
        sp = extract_subpocket(prot, single_atom_arm(), subpocket_id=7)
        assert sp.id == 7
        assert sp.protein_atoms == tuple(range(24))
        assert len(sp.residue_keys()) == 24

    def test_expands_to_whole_residue(self):
        prot = protein(
            [
                ("N", 5.9, 0.0, 0.0, "N", "ALA", 1),
                ("C", 9.0, 0.0, 0.0, "CB", "ALA", 1),
                ("C", 13.0, 0.0, 0.0, "CB", "ALA", 2),
            ]
        )
        sp = extract_subpocket(prot, single_atom_arm())
        assert sp.protein_atoms == (0, 1)

    def test_solvent_never_joins(self):
        specs = carbon_cage() + [("O", 2.0, 0.0, 0.0, "O", "HOH", 99, "A", True)]
        sp = extract_subpocket(protein(specs), single_atom_arm())
        assert 24 not in sp.protein_atoms

    def test_no_atoms_in_range_raises(self):
        prot = cage_protein()
        with pytest.raises(EmptySubpocketError):
            extract_subpocket(prot, single_atom_arm(x=100.0))

    def test_armless_arm_raises(self):
        arm = Fragment.from_molecule(mol([("H", 0.0, 0.0, 0.0)], []))
        with pytest.raises(EmptySubpocketError):
            extract_subpocket(cage_protein(), arm)

    def test_capacity_matches_volume(self):
        cfg = DEFAULT_POCKET_CONFIG
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        volume = len(sp.voxel_centers) * cfg.voxel_size**3
        assert sp.capacity == int(np.floor(volume / cfg.volume_per_atom))
        assert sp.capacity > 0

    def test_center_is_voxel_mean(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        np.testing.assert_allclose(sp.center, sp.voxel_centers.mean(axis=0), atol=1e-12)

    def test_extraction_is_deterministic(self):
        prot = cage_protein()
        a = extract_subpocket(prot, single_atom_arm())
        b = extract_subpocket(prot, single_atom_arm())
        assert np.array_equal(a.voxel_centers, b.voxel_centers)
        assert np.array_equal(a.voxel_nonpolar, b.voxel_nonpolar)
        assert a.protein_atoms == b.protein_atoms


class TestCavity:
    def setup_method(self):
        self.prot = cage_protein()
        self.sp = extract_subpocket(self.prot, single_atom_arm())
        self.cfg = self.sp.config

    def test_voxels_exist(self):
        assert len(self.sp.voxel_centers) > 0
        assert len(self.sp.voxel_nonpolar) == len(self.sp.voxel_centers)

    def test_voxels_stay_inside_shell(self):
        d = np.linalg.norm(
            self.sp.voxel_centers[:, None, :] - self.sp.atom_coords[None, :, :], axis=2
        )
        assert d.min(axis=1).max() <= self.cfg.shell + 1e-9

    def test_voxels_clear_every_vdw_sphere(self):
        coords = self.prot.coords
        radii = np.array([vdw_radius(a.element) for a in self.prot.atoms])
        d = np.linalg.norm(
            self.sp.voxel_centers[:, None, :] - coords[None, :, :], axis=2
        )
        assert (d - radii[None, :]).min() > 0.0

    def test_voxels_sit_on_global_lattice(self):
        frac = self.sp.voxel_centers / self.cfg.voxel_size - 0.5
        np.testing.assert_allclose(frac, np.round(frac), atol=1e-9)

    def test_polarity_follows_nearest_atom(self):
        # one C residue and one N residue with the arm between them
        prot = protein(
            [
                ("C", 0.0, 0.0, 0.0, "CB", "ALA", 1),
                ("N", 7.0, 0.0, 0.0, "N", "ALA", 2),
            ]
        )
        sp = extract_subpocket(prot, single_atom_arm(x=3.5))
        d = np.linalg.norm(
            sp.voxel_centers[:, None, :] - sp.atom_coords[None, :, :], axis=2
        )
        nearest = d.argmin(axis=1)
        elements = np.array([prot.atoms[i].element for i in sp.protein_atoms])
        np.testing.assert_array_equal(
            sp.voxel_nonpolar, np.isin(elements[nearest], (6, 16))
        )
        assert sp.voxel_nonpolar.any() and not sp.voxel_nonpolar.all()

    def test_voxel_set_matches_brute_force_scan(self):
        # independent lattice scan: enumerate every candidate voxel and apply
        # the shell/clearance definition one voxel at a time
        coords = self.prot.coords
        radii = np.array([vdw_radius(a.element) for a in self.prot.atoms])
        step = self.cfg.voxel_size
        lo = np.floor((coords.min(axis=0) - self.cfg.shell - 1.0) / step).astype(int)
        hi = np.ceil((coords.max(axis=0) + self.cfg.shell + 1.0) / step).astype(int)
        expected = []
        for kx in range(lo[0], hi[0]):
            for ky in range(lo[1], hi[1]):
                for kz in range(lo[2], hi[2]):
                    p = (np.array([kx, ky, kz]) + 0.5) * step
                    d = np.linalg.norm(coords - p, axis=1)
                    if d.min() <= self.cfg.shell and (d > radii).all():
                        expected.append(p)
        expected = np.array(expected)
        got = self.sp.voxel_centers[np.lexsort(self.sp.voxel_centers.T[::-1])]
        expected = expected[np.lexsort(expected.T[::-1])]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_water_neither_blocks_nor_contributes(self):
        dry = extract_subpocket(protein([("C", 0.0, 0.0, 0.0, "CB", "ALA", 1)]), single_atom_arm(x=2.5))
        wet = extract_subpocket(
            protein(
                [
                    ("C", 0.0, 0.0, 0.0, "CB", "ALA", 1),
                    ("O", 2.5, 0.0, 0.0, "O", "HOH", 9, "A", True),
                ]
            ),
            single_atom_arm(x=2.5),
        )
        assert np.array_equal(dry.voxel_centers, wet.voxel_centers)
        assert np.array_equal(dry.voxel_nonpolar, wet.voxel_nonpolar)


class TestNonpolarOccupation:
    def test_matches_direct_recount(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        arm = single_atom_arm(x=1.0, y=0.5)
        voxels = sp.voxel_centers[sp.voxel_nonpolar]
        d = np.linalg.norm(voxels - np.array([1.0, 0.5, 0.0]), axis=1)
        expected = float((d <= vdw_radius(6)).mean())
        assert nonpolar_occupation(sp, arm) == pytest.approx(expected, abs=1e-12)
        assert 0.0 < nonpolar_occupation(sp, arm) < 1.0

    def test_distant_arm_scores_zero(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        assert nonpolar_occupation(sp, single_atom_arm(x=50.0)) == 0.0

    def test_polar_cavity_scores_zero(self):
        specs = [("N", x, y, z, "N", "ALA", k + 1) for k, (_, x, y, z, *_r) in enumerate(carbon_cage())]
        sp = extract_subpocket(protein(specs), single_atom_arm())
        assert not sp.voxel_nonpolar.any()
        assert nonpolar_occupation(sp, single_atom_arm()) == 0.0

    def test_bigger_arm_covers_more(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        small = single_atom_arm(x=1.5)
        big = Fragment.from_molecule(
            mol([("C", 1.5, 0.0, 0.0), ("C", -1.5, 0.0, 0.0), ("C", 0.0, 1.5, 0.0)], [])
        )
        assert nonpolar_occupation(sp, big) > nonpolar_occupation(sp, small)

    def test_adding_atoms_never_lowers_coverage(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        rng = np.random.default_rng(3)
        atoms: list[tuple] = []
        previous = 0.0
        for _ in range(6):
            x, y, z = rng.uniform(-2.5, 2.5, size=3)
            atoms.append(("C", float(x), float(y), float(z)))
            value = nonpolar_occupation(sp, Fragment.from_molecule(mol(list(atoms), [])))
            assert value >= previous
            previous = value

    def test_blanketing_arm_reaches_one(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        # a grid of carbons whose vdW spheres tile the cavity's bounding box
        lo = sp.voxel_centers.min(axis=0) - 0.5
        hi = sp.voxel_centers.max(axis=0) + 0.5
        step = 1.9  # half body diagonal 1.645 < 1.70, so no voxel escapes
        axes = [np.arange(lo[d], hi[d] + step, step) for d in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        atoms = [("C", float(x), float(y), float(z)) for x, y, z in
                 zip(gx.ravel(), gy.ravel(), gz.ravel())]
        blanket = Fragment.from_molecule(mol(atoms, []))
        assert nonpolar_occupation(sp, blanket) == 1.0


class TestSurfaceComplementarity:
    def test_buried_atom_is_full_clash(self):
        # carbon concentric with a lone iodine: every sample point starts
        # inside the protein sphere (1.70 < 1.98)
        prot = protein([("I", 0.0, 0.0, 0.0, "I1", "LIG", 1)])
        sp = stub_subpocket(prot, (0,))
        assert surface_complementarity(sp, single_atom_arm()) == -1.0

    def test_atom_on_the_wall_is_a_clash(self):
        prot = cage_protein()
        x, y, z = prot.coords[0]
        sp = stub_subpocket(prot, tuple(range(24)))
        value = surface_complementarity(sp, single_atom_arm(x=x, y=y, z=z))
        assert value == pytest.approx(-1.0, abs=1e-9)

    def test_snug_center_scores_high(self):
        prot = cage_protein()
        sp = stub_subpocket(prot, tuple(range(24)))
        value = surface_complementarity(sp, single_atom_arm())
        assert 0.2 < value < 1.0

    def test_isolated_arm_scores_nothing(self):
        prot = protein([("C", 20.0, 0.0, 0.0, "CB", "ALA", 1)])
        sp = stub_subpocket(prot, (0,))
        assert abs(surface_complementarity(sp, single_atom_arm())) < 1e-6

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(11)
        arm_atoms = [("C", 0.5, 0.0, 0.0), ("C", -1.0, 0.3, 0.2)]
        specs = carbon_cage()
        prot = protein(specs)
        sp = stub_subpocket(prot, tuple(range(24)))
        arm = Fragment.from_molecule(mol(arm_atoms, [(0, 1, 1)]))
        base = surface_complementarity(sp, arm)
        for _ in range(5):
            axis = rng.normal(size=3)
            rot = rotation_matrix(axis, rng.uniform(0.1, 3.0))
            shift = rng.uniform(-20.0, 20.0, size=3)

            def moved(x, y, z):
                return tuple(rot @ np.array([x, y, z]) + shift)

            specs2 = [("C", *moved(s[1], s[2], s[3]), "CB", "ALA", k + 1) for k, s in enumerate(specs)]
            arm2 = Fragment.from_molecule(
                mol([("C", *moved(x, y, z)) for _, x, y, z in arm_atoms], [(0, 1, 1)])
            )
            sp2 = stub_subpocket(protein(specs2), tuple(range(24)))
            assert surface_complementarity(sp2, arm2) == pytest.approx(base, abs=1e-7)

    def test_two_spheres_match_point_loop_oracle(self):
        # one arm carbon in exact vdW contact with one protein carbon,
        # recomputed here with an explicit per-point loop
        contact = 2.0 * vdw_radius(6)
        prot = protein([("C", contact, 0.0, 0.0, "CB", "ALA", 1)])
        sp = stub_subpocket(prot, (0,))
        cfg = DEFAULT_POCKET_CONFIG
        frame = canonical_frame(np.array([[0.0, 0.0, 0.0], [contact, 0.0, 0.0]]))
        center = np.array([contact, 0.0, 0.0])
        values = []
        for direction in fibonacci_sphere(cfg.sample_points) @ frame.T:
            p = vdw_radius(6) * direction
            gap = float(np.linalg.norm(p - center)) - vdw_radius(6)
            if gap < 0.0:
                values.append(-1.0)
                continue
            inward = (center - p) / np.linalg.norm(center - p)
            values.append(float(direction @ inward) * math.exp(-(gap**2) / cfg.sigma**2))
        expected = float(np.median(values))
        assert surface_complementarity(sp, single_atom_arm()) == pytest.approx(
            expected, abs=1e-12
        )

    def test_config_sigma_controls_reach(self):
        # a looser kernel lets a slightly-too-far wall still count
        prot = protein([("C", 6.0, 0.0, 0.0, "CB", "ALA", 1)])
        sp = stub_subpocket(prot, (0,))
        tight = surface_complementarity(sp, single_atom_arm(), PocketConfig(sigma=1.5))
        loose = surface_complementarity(sp, single_atom_arm(), PocketConfig(sigma=6.0))
        assert abs(loose) > abs(tight)


class TestRigidMotionWithRebuiltGrid:
    def test_factors_survive_reposing(self):
        # the voxel lattice is global, so a rotated complex is carved onto
        # different voxels: occupation may shift by aliasing (2% allowance)
        # while complementarity, which never touches the grid, stays put
        rng = np.random.default_rng(41)
        specs = carbon_cage()
        arm_atoms = [("C", 0.6, 0.0, 0.0), ("C", -0.9, 0.4, 0.1)]
        arm = Fragment.from_molecule(mol(arm_atoms, [(0, 1, 1)]))
        sp = extract_subpocket(protein(specs), arm)
        occ, comp = nonpolar_occupation(sp, arm), surface_complementarity(sp, arm)
        for _ in range(3):
            rot = rotation_matrix(rng.normal(size=3), rng.uniform(0.3, 2.8))
            shift = rng.uniform(-8.0, 8.0, size=3)

            def moved(x, y, z):
                return tuple(float(v) for v in rot @ np.array([x, y, z]) + shift)

            specs2 = [
                ("C", *moved(s[1], s[2], s[3]), "CB", "ALA", k + 1)
                for k, s in enumerate(specs)
            ]
            arm2 = Fragment.from_molecule(
                mol([("C", *moved(x, y, z)) for _, x, y, z in arm_atoms], [(0, 1, 1)])
            )
            sp2 = extract_subpocket(protein(specs2), arm2)
            assert nonpolar_occupation(sp2, arm2) == pytest.approx(occ, abs=0.02)
            assert surface_complementarity(sp2, arm2) == pytest.approx(comp, abs=1e-6)


class TestSpatialFactors:
    def test_bundle_matches_parts(self):
        sp = extract_subpocket(cage_protein(), single_atom_arm())
        arm = single_atom_arm(x=0.8)
        factors = compute_spatial_factors(sp, arm)
        assert factors.nonpolar_occupation == nonpolar_occupation(sp, arm)
        assert factors.surface_complementarity == surface_complementarity(sp, arm)
        arr = factors.as_array()
        assert arr.shape == (2,)
        assert arr[0] == factors.nonpolar_occupation


class TestFromResidues:
    def test_matches_arm_based_extraction(self):
        prot = cage_protein()
        by_arm = extract_subpocket(prot, single_atom_arm(), subpocket_id=3)
        named = [(chain, seq) for chain, seq, _ in by_arm.residue_keys()]
        by_name = subpocket_from_residues(prot, named, subpocket_id=3)
        assert by_name.protein_atoms == by_arm.protein_atoms
        assert np.array_equal(by_name.voxel_centers, by_arm.voxel_centers)
        assert np.array_equal(by_name.voxel_nonpolar, by_arm.voxel_nonpolar)
        assert by_name.capacity == by_arm.capacity
        assert by_name.center == by_arm.center
        assert by_name.id == 3

    def test_selects_whole_residues(self):
        prot = protein(
            [
                ("N", 0.0, 0.0, 0.0, "N", "ALA", 1),
                ("C", 1.5, 0.0, 0.0, "CA", "ALA", 1),
                ("C", 20.0, 0.0, 0.0, "CB", "ALA", 2),
            ]
        )
        sp = subpocket_from_residues(prot, [("A", 1)])
        assert sp.protein_atoms == (0, 1)

    def test_duplicate_names_collapse(self):
        prot = cage_protein()
        sp = subpocket_from_residues(prot, [("A", 1), ("A", 1), ("A", 2)])
        assert sp.protein_atoms == (0, 1)

    def test_missing_residue_raises(self):
        with pytest.raises(EmptySubpocketError, match="not in the structure"):
            subpocket_from_residues(cage_protein(), [("A", 1), ("B", 1)])

    def test_empty_selection_raises(self):
        with pytest.raises(EmptySubpocketError):
            subpocket_from_residues(cage_protein(), [])

    def test_solvent_only_residue_raises(self):
        specs = carbon_cage() + [("O", 2.0, 0.0, 0.0, "O", "HOH", 99, "A", True)]
        with pytest.raises(EmptySubpocketError, match="solvent"):
            subpocket_from_residues(protein(specs), [("A", 99)])
