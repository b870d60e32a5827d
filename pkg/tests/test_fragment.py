"""Cleavage rules, fragmentation, and arm/scaffold decomposition."""

import numpy as np
import pytest

from fraglink.chem import DOUBLE, SINGLE, MoleculeGraph
from fraglink.fragment import (
    DecompositionError,
    Fragment,
    decompose,
    find_cleavable_bonds,
    fragment_molecule,
)
from fraglink.pocket import Subpocket
from fixtures_mols import benzene, ethyl_benzoate, mol, n_methylacetamide, protein, toluene_heavy


def rules_by_key(m: MoleculeGraph) -> dict[tuple[int, int], str]:
    return {m.bonds[k].key: rule for k, rule in find_cleavable_bonds(m)}


class TestCleavageRules:
    def test_amide_r1(self):
        m = n_methylacetamide()
        got = rules_by_key(m)
        assert got == {(1, 3): "R1"}

    def test_ester_r2_and_ring_r3(self):
        m = ethyl_benzoate()
        got = rules_by_key(m)
        assert got == {(6, 8): "R2", (0, 6): "R3"}

    def test_ring_to_methyl_r3(self):
        got = rules_by_key(toluene_heavy())
        assert got == {(0, 6): "R3"}

    def test_aromatic_ring_never_cut(self):
        assert find_cleavable_bonds(benzene()) == ()

    def test_ether_r4(self):
        # diethyl ether, heavy atoms only: C-C-O-C-C
        m = mol(
            [
                ("C", 0.0, 0.0, 0.0),
                ("C", 1.54, 0.0, 0.0),
                ("O", 2.1, 1.3, 0.0),
                ("C", 3.5, 1.4, 0.0),
                ("C", 4.1, 2.79, 0.0),
            ],
            [(0, 1, SINGLE), (1, 2, SINGLE), (2, 3, SINGLE), (3, 4, SINGLE)],
        )
        got = rules_by_key(m)
        assert got == {(1, 2): "R4", (2, 3): "R4"}

    def test_ester_oxygen_not_ether(self):
        # the ester O in ethyl benzoate touches a carbonyl carbon, so R4 must not fire
        got = rules_by_key(ethyl_benzoate())
        assert all(rule != "R4" for rule in got.values())

    def test_amine_r5_and_amide_exclusion(self):
        # dimethylamine: N with two carbons, no carbonyl
        m = mol(
            [("C", -1.47, 0.0, 0.0), ("N", 0.0, 0.0, 0.0), ("C", 1.47, 0.0, 0.0)],
            [(0, 1, SINGLE), (1, 2, SINGLE)],
        )
        got = rules_by_key(m)
        assert got == {(0, 1): "R5", (1, 2): "R5"}
        # primary amine: heavy degree 1, never cut
        m2 = mol(
            [("N", 0.0, 0.0, 0.0), ("C", 1.47, 0.0, 0.0)],
            [(0, 1, SINGLE)],
        )
        assert rules_by_key(m2) == {}

    def test_sulfonamide_r6(self):
        m = mol(
            [
                ("C", -1.78, 0.0, 0.0),
                ("S", 0.0, 0.0, 0.0),
                ("O", 0.4, 1.37, 0.0),
                ("O", 0.4, -1.37, 0.0),
                ("N", 1.6, 0.3, 0.0),
                ("C", 2.6, -0.7, 0.0),
            ],
            [
                (0, 1, SINGLE),
                (1, 2, DOUBLE),
                (1, 3, DOUBLE),
                (1, 4, SINGLE),
                (4, 5, SINGLE),
            ],
        )
        got = rules_by_key(m)
        # S-N is R6; the N-CH3 bond is shielded from R5 by the sulfonamide test
        assert got == {(1, 4): "R6"}

    def test_bonds_to_hydrogen_never_cut(self):
        m = n_methylacetamide()
        for key in rules_by_key(m):
            assert all(m.atoms[i].element != 1 for i in key)


class TestFragmentation:
    def test_n_methylacetamide_two_fragments(self):
        frags, cut = fragment_molecule(n_methylacetamide())
        assert len(frags) == 2
        assert len(cut) == 1
        acetyl = frags[0]
        assert acetyl.atom_indices == (0, 1, 2)
        assert acetyl.attachment_points == ((1, "R1"),)
        amine = frags[1]
        assert amine.atom_indices == (3, 4, 5)
        assert amine.attachment_points == ((3, "R1"),)

    def test_ethyl_benzoate_three_fragments(self):
        frags, cut = fragment_molecule(ethyl_benzoate())
        assert [f.atom_indices for f in frags] == [
            (0, 1, 2, 3, 4, 5),
            (6, 7),
            (8, 9, 10),
        ]
        assert len(cut) == 2

    def test_reassembly_invariant(self):
        m = ethyl_benzoate()
        frags, cut = fragment_molecule(m)
        atoms = sorted(i for f in frags for i in f.atom_indices)
        assert atoms == list(range(len(m.atoms)))
        internal = [b.key for f in frags for b in f.bonds_within()]
        assert sorted(internal + [b.key for b in cut]) == sorted(b.key for b in m.bonds)

    def test_standalone_reindexes(self):
        frags, _ = fragment_molecule(ethyl_benzoate())
        tail = frags[2].standalone()
        assert tail.atom_indices == (0, 1, 2)
        assert [a.element for a in tail.parent.atoms] == [8, 6, 6]
        assert tail.attachment_points == ((0, "R2"),)
        assert len(tail.parent.bonds) == 2

    def test_fragment_validation(self):
        m = benzene()
        with pytest.raises(ValueError):
            Fragment(parent=m, atom_indices=(0, 1, 99))
        with pytest.raises(ValueError):
            Fragment(parent=m, atom_indices=(0, 1), attachment_points=((5, "R1"),))


def _stub_subpocket(prot, indices, sp_id):
    return Subpocket(
        id=sp_id,
        protein=prot,
        protein_atoms=tuple(indices),
        center=(0.0, 0.0, 0.0),
        voxel_centers=np.zeros((0, 3)),
        voxel_nonpolar=np.zeros(0, dtype=bool),
        capacity=0,
    )


class TestDecompose:
    def make_pockets(self):
        # two carbon clusters flanking ethyl benzoate: one beyond the ring,
        # one beyond the ethyl tail, both out of range of the carbonyl
        specs = []
        for k, (x, y) in enumerate([(-3.4, 0.0), (-2.4, 2.4), (-2.4, -2.4)]):
            specs.append(("C", x, y, 0.0, "CB", "ALA", k + 1))
        for k, (x, y, z) in enumerate([(6.5, -3.8, 0.0), (7.6, -1.5, 0.0), (6.9, -2.7, 1.5)]):
            specs.append(("C", x, y, z, "CB", "ALA", k + 10))
        prot = protein(specs)
        sp_ring = _stub_subpocket(prot, (0, 1, 2), 0)
        sp_tail = _stub_subpocket(prot, (3, 4, 5), 1)
        return prot, sp_ring, sp_tail

    def test_arms_and_scaffold(self):
        _, sp_ring, sp_tail = self.make_pockets()
        d = decompose(ethyl_benzoate(), [sp_ring, sp_tail])
        assert len(d.arms) == 2
        by_sp = {a.subpocket_id: a.fragment.atom_indices for a in d.arms}
        assert by_sp[0] == (0, 1, 2, 3, 4, 5)
        assert by_sp[1] == (8, 9, 10)
        # the unassigned carbonyl fragment is the scaffold, facing both arms
        assert d.scaffold.atom_indices == (6, 7)
        assert len(d.cleaved_bonds) == 2
        assert d.scaffold.attachment_points == ((6, "R2"), (6, "R3"))

    def test_union_covers_ligand(self):
        _, sp_ring, sp_tail = self.make_pockets()
        d = decompose(ethyl_benzoate(), [sp_ring, sp_tail])
        covered = sorted(
            i for a in d.arms for i in a.fragment.atom_indices
        ) + list(d.scaffold.atom_indices)
        assert sorted(covered) == list(range(11))

    def test_adjacent_fragments_in_one_pocket_become_one_arm(self):
        # toluene next to a single pocket: ring and methyl are rejoined
        prot = protein([("C", 2.89, 3.0, 0.0, "CB", "ALA", 1)])
        sp = _stub_subpocket(prot, (0,), 0)
        d = decompose(toluene_heavy(), [sp])
        assert len(d.arms) == 1
        assert d.arms[0].fragment.atom_indices == tuple(range(7))
        assert d.arms[0].source_count == 2
        assert d.scaffold.atom_indices == ()

    def test_small_isolated_arm_joins_scaffold(self):
        # a pocket that sees only the two-heavy-atom carbonyl fragment: the
        # assignment holds but the arm is below the size floor
        _, sp_ring, _ = self.make_pockets()
        carbonyl_prot = protein([("C", 3.3, 3.5, 0.0, "CB", "ALA", 40)])
        sp_carbonyl = _stub_subpocket(carbonyl_prot, (0,), 1)
        d = decompose(ethyl_benzoate(), [sp_ring, sp_carbonyl])
        assert [a.subpocket_id for a in d.arms] == [0]
        assert d.arms[0].fragment.atom_indices == (0, 1, 2, 3, 4, 5)
        assert d.scaffold.atom_indices == (6, 7, 8, 9, 10)

    def test_merged_arm_via_shared_subpocket(self):
        # both fragments of N-methylacetamide sit in one pocket: one arm
        prot = protein([("C", 0.3, -0.5, 3.2, "CB", "ALA", 1)])
        sp = _stub_subpocket(prot, (0,), 0)
        d = decompose(n_methylacetamide(), [sp])
        assert len(d.arms) == 1
        assert d.arms[0].source_count == 2
        assert d.arms[0].fragment.atom_indices == tuple(range(6))
        assert d.scaffold.atom_indices == ()

    def test_unassignable_raises(self):
        prot = protein([("C", 50.0, 0.0, 0.0, "CB", "ALA", 1)])
        sp = _stub_subpocket(prot, (0,), 0)
        with pytest.raises(DecompositionError):
            decompose(ethyl_benzoate(), [sp])

    def test_tie_breaks_are_deterministic(self):
        # one fragment equally close to two subpockets: lower id wins on ties
        prot = protein(
            [
                ("C", 0.0, 3.0, 0.0, "CB", "ALA", 1),
                ("C", 0.0, -3.0, 0.0, "CB", "ALA", 2),
            ]
        )
        sp_a = _stub_subpocket(prot, (0,), 0)
        sp_b = _stub_subpocket(prot, (1,), 1)
        d = decompose(benzene(), [sp_a, sp_b])
        assert d.arms[0].subpocket_id == 0
