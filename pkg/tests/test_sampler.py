"""Library filtering, compatibility scoring, posing, and selection modes."""

import json
import math

import numpy as np
import pytest
import torch

from fraglink.chem import graph_key
from fraglink.concept import DEFAULT_LOSS_WEIGHTS, ConceptPrediction, LossWeights
from fraglink.fragment import Fragment
from fraglink.geom import octahedral_rotations
from fraglink.interactions import INTERACTION_KINDS
from fraglink.pocket import Subpocket, surface_complementarity
from fraglink.sampler import (
    ArmLibrary,
    LibraryEntry,
    SamplerError,
    ScoredCandidate,
    compatibility_score,
    fallback_entries,
    filter_library,
    interpretability_report,
    library_report,
    load_library,
    pose_template,
    sample_arms,
    save_library,
    save_report,
    score_candidates,
    select,
    zero_interaction,
)
from tests.fixtures_mols import carbon_cage, mol, protein


def chain_entry(entry_id: str, n: int, symbol: str = "C") -> LibraryEntry:
    atoms = tuple((symbol, 1.5 * k, 0.0, 0.0) for k in range(n))
    bonds = tuple((k, k + 1, 1) for k in range(n - 1))
    template = Fragment.from_molecule(
        mol(atoms, bonds, name=entry_id), attachment_points=((0, "R1"),)
    )
    return LibraryEntry(entry_id=entry_id, template=template)


def triangle_entry(entry_id: str) -> LibraryEntry:
    atoms = (("C", 0.0, 0.0, 0.0), ("C", 1.5, 0.0, 0.0), ("C", 0.75, 1.3, 0.0))
    bonds = ((0, 1, 1), (1, 2, 1), (2, 0, 1))
    template = Fragment.from_molecule(
        mol(atoms, bonds, name=entry_id), attachment_points=((0, "R1"),)
    )
    return LibraryEntry(entry_id=entry_id, template=template)


def boxed_subpocket(capacity: int, sp_id: int = 0, voxels=None) -> Subpocket:
    prot = protein(carbon_cage(radius=4.5, n=12))
    if voxels is None:
        voxels = [(0.0, 0.0, 0.0)]
    voxels = np.asarray(voxels, dtype=np.float64)
    return Subpocket(
        id=sp_id,
        protein=prot,
        protein_atoms=tuple(range(12)),
        center=(0.0, 0.0, 0.0),
        voxel_centers=voxels,
        voxel_nonpolar=np.ones(len(voxels), dtype=bool),
        capacity=capacity,
    )


class StubConcept:
    """Concept model stand-in keyed by the template molecule's name."""

    def __init__(self, table: dict[str, tuple[tuple[float, float], tuple[float, ...]]]):
        self.table = table

    def predict(self, arm: Fragment, subpocket: Subpocket) -> ConceptPrediction:
        spatial, rates = self.table[arm.parent.name]
        return ConceptPrediction(
            spatial=torch.tensor(spatial, dtype=torch.float64),
            rates=torch.tensor(rates, dtype=torch.float64),
        )


def flat_rates(value: float = 0.0) -> tuple[float, ...]:
    return (value,) * len(INTERACTION_KINDS)


def make_candidate(entry_id: str, score: float, heavy: int = 3) -> ScoredCandidate:
    posed = chain_entry(entry_id, 3).template
    return ScoredCandidate(
        entry_id=entry_id,
        posed=posed,
        spatial=(0.0, 0.0),
        rates=flat_rates(),
        score=score,
        heavy_atoms=heavy,
    )


class TestLibrary:
    def test_duplicate_graph_rejected(self):
        with pytest.raises(SamplerError):
            ArmLibrary(entries=(chain_entry("a", 3), chain_entry("b", 3)))

    def test_duplicate_id_rejected(self):
        with pytest.raises(SamplerError):
            ArmLibrary(entries=(chain_entry("a", 3), chain_entry("a", 4)))

    def test_same_size_different_graphs_coexist(self):
        lib = ArmLibrary(entries=(chain_entry("chain", 3), triangle_entry("ring")))
        assert len(lib) == 2

    def test_entry_requires_attachment(self):
        template = Fragment.from_molecule(mol((("C", 0.0, 0.0, 0.0),), (), name="x"))
        with pytest.raises(SamplerError):
            LibraryEntry(entry_id="x", template=template)

    def test_entry_requires_whole_molecule(self):
        m = mol(
            (("C", 0.0, 0.0, 0.0), ("C", 1.5, 0.0, 0.0)), ((0, 1, 1),), name="y"
        )
        partial = Fragment(parent=m, atom_indices=(0,), attachment_points=((0, "R1"),))
        with pytest.raises(SamplerError):
            LibraryEntry(entry_id="y", template=partial)

    def test_json_round_trip(self, tmp_path):
        atoms = (("N", 0.25, -1.125, 3.0, 1), ("C", 1.5, 0.0, 0.0), ("O", 2.5, 1.0, -0.5))
        bonds = ((0, 1, 1), (1, 2, 2))
        template = Fragment.from_molecule(
            mol(atoms, bonds, name="amide"), attachment_points=((1, "R2"),)
        )
        lib = ArmLibrary(
            entries=(
                LibraryEntry(entry_id="amide", template=template, source="set-a"),
                chain_entry("c4", 4),
            )
        )
        path = tmp_path / "library.json"
        save_library(lib, path)
        loaded = load_library(path)
        assert len(loaded) == 2
        for orig, back in zip(lib.entries, loaded.entries):
            assert back.entry_id == orig.entry_id
            assert back.source == orig.source
            assert back.template.attachment_points == orig.template.attachment_points
            assert graph_key(back.template.parent) == graph_key(orig.template.parent)
            assert np.array_equal(back.template.coords(), orig.template.coords())
        assert loaded.entries[0].template.parent.atoms[0].formal_charge == 1

    def test_malformed_files_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("not json at all")
        with pytest.raises(SamplerError):
            load_library(bad)
        bad.write_text('{"no_entries": 1}')
        with pytest.raises(SamplerError):
            load_library(bad)
        bad.write_text('{"entries": [{"id": "x"}]}')
        with pytest.raises(SamplerError):
            load_library(bad)


class TestFilter:
    def test_capacity_window(self):
        lib = ArmLibrary(
            entries=(chain_entry("s12", 12), chain_entry("s3", 3), chain_entry("s8", 8))
        )
        kept = filter_library(lib, boxed_subpocket(capacity=10))
        assert [e.entry_id for e in kept] == ["s3", "s8"]  # library order kept

    def test_zero_capacity_empty(self):
        lib = ArmLibrary(entries=(chain_entry("s3", 3),))
        assert filter_library(lib, boxed_subpocket(capacity=0)) == ()

    def test_minimum_size_enforced(self):
        lib = ArmLibrary(entries=(chain_entry("s2", 2), chain_entry("s3", 3)))
        kept = filter_library(lib, boxed_subpocket(capacity=10))
        assert [e.entry_id for e in kept] == ["s3"]

    def test_fallback_takes_smallest(self):
        lib = ArmLibrary(entries=tuple(chain_entry(f"s{n}", n) for n in (8, 5, 3, 7, 6, 4)))
        back = fallback_entries(lib)
        assert [e.entry_id for e in back] == ["s3", "s4", "s5", "s6", "s7"]

    def test_fallback_ties_break_on_id(self):
        lib = ArmLibrary(entries=(triangle_entry("zz"), chain_entry("aa", 3)))
        back = fallback_entries(lib, count=1)
        assert back[0].entry_id == "aa"


class TestCompatibilityScore:
    def test_hand_oracle(self):
        weights = LossWeights(
            spatial=(0.7, 0.3), interaction=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
        )
        score = compatibility_score((0.4, 0.6), (1, 2, 3, 4, 5, 6, 7), weights)
        # 0.28 + 0.18 + (0.1 + 0.4 + 0.9 + 1.6 + 2.5 + 3.6 + 4.9)
        assert score == pytest.approx(14.46, abs=1e-12)

    def test_vanishing_rates_limit(self):
        score = compatibility_score((0.5, 0.5), flat_rates(1e-12))
        assert score == pytest.approx(1.0, abs=1e-10)

    def test_componentwise_dominance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            weights = LossWeights(
                spatial=tuple(rng.uniform(0, 2, 2)),
                interaction=tuple(rng.uniform(0, 2, 7)),
            )
            a_spatial = rng.uniform(0, 1, 2)
            a_rates = rng.uniform(0, 5, 7)
            shrink = rng.uniform(0, 1)
            hi = compatibility_score(tuple(a_spatial), tuple(a_rates), weights)
            lo = compatibility_score(
                tuple(a_spatial * shrink), tuple(a_rates * shrink), weights
            )
            assert hi >= lo

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(SamplerError):
            compatibility_score((0.5,), flat_rates())
        with pytest.raises(SamplerError):
            compatibility_score((0.5, 0.5), (1.0, 2.0))


class TestPosing:
    def test_centroid_lands_on_cavity_centroid(self):
        voxels = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (0.0, 1.0, 0.0)]
        sp = boxed_subpocket(capacity=10, voxels=voxels)
        entry = chain_entry("probe", 3)
        posed = pose_template(entry.template, sp)
        assert np.allclose(posed.centroid(), [0.75, 0.25, 0.0], atol=1e-9)

    def test_center_used_when_no_cavity(self):
        sp = boxed_subpocket(capacity=10, voxels=np.zeros((0, 3)))
        posed = pose_template(chain_entry("probe", 3).template, sp)
        assert np.allclose(posed.centroid(), [0.0, 0.0, 0.0], atol=1e-9)

    def test_orientation_matches_brute_force(self):
        sp = boxed_subpocket(capacity=10)
        atoms = (("C", 0.0, 0.0, 0.0), ("C", 1.5, 0.0, 0.0), ("N", 1.5, 1.4, 0.0))
        template = Fragment.from_molecule(
            mol(atoms, ((0, 1, 1), (1, 2, 1)), name="bent"),
            attachment_points=((0, "R1"),),
        )
        posed = pose_template(template, sp)

        base = template.standalone()
        centered = base.coords() - base.centroid()
        target = sp.voxel_centers.mean(axis=0)
        best_score, best_coords = -np.inf, None
        for rot in octahedral_rotations():
            coords = centered @ rot.T + target
            moved = Fragment.from_molecule(
                mol(
                    tuple(
                        (sym, *xyz)
                        for sym, xyz in zip(("C", "C", "N"), coords.tolist())
                    ),
                    ((0, 1, 1), (1, 2, 1)),
                    name="bent",
                ),
                attachment_points=((0, "R1"),),
            )
            score = surface_complementarity(sp, moved)
            if score > best_score:
                best_score, best_coords = score, coords
        assert np.allclose(posed.coords(), best_coords, atol=1e-12)
        assert surface_complementarity(sp, posed) == pytest.approx(best_score, abs=1e-12)

    def test_reposing_is_deterministic(self):
        sp = boxed_subpocket(capacity=10)
        entry = chain_entry("probe", 3)
        a = pose_template(entry.template, sp)
        b = pose_template(entry.template, sp)
        assert np.array_equal(a.coords(), b.coords())

    def test_attachment_points_survive(self):
        sp = boxed_subpocket(capacity=10)
        posed = pose_template(chain_entry("probe", 4).template, sp)
        assert posed.attachment_points == ((0, "R1"),)


class TestSelect:
    def test_argmax_picks_highest(self):
        cands = [make_candidate("lo", 1.0), make_candidate("hi", 2.0)]
        assert select(cands, k=1)[0].entry_id == "hi"

    def test_argmax_rank_order(self):
        cands = [make_candidate(c, s) for c, s in (("a", 1.0), ("b", 3.0), ("c", 2.0))]
        assert [c.entry_id for c in select(cands, k=3)] == ["b", "c", "a"]

    def test_tie_breaks_on_heavy_then_id(self):
        cands = [
            make_candidate("big", 1.0, heavy=5),
            make_candidate("small-b", 1.0, heavy=3),
            make_candidate("small-a", 1.0, heavy=3),
        ]
        assert [c.entry_id for c in select(cands, k=3)] == ["small-a", "small-b", "big"]

    def test_single_candidate_both_modes(self):
        only = [make_candidate("only", 0.5)]
        assert select(only, mode="argmax")[0].entry_id == "only"
        assert select(only, mode="softmax", rng=np.random.default_rng(0))[0].entry_id == "only"

    def test_k_larger_than_slate(self):
        cands = [make_candidate("a", 1.0), make_candidate("b", 2.0)]
        assert len(select(cands, k=10)) == 2

    def test_parameter_validation(self):
        cands = [make_candidate("a", 1.0)]
        with pytest.raises(SamplerError):
            select(cands, mode="roulette")
        with pytest.raises(SamplerError):
            select(cands, k=0)
        with pytest.raises(SamplerError):
            select(cands, mode="softmax", tau=0.0)

    def test_cold_softmax_converges_to_argmax(self):
        cands = [make_candidate("lo", 1.0), make_candidate("hi", 2.0)]
        hits = sum(
            select(cands, mode="softmax", tau=0.1, rng=np.random.default_rng(s))[0].entry_id
            == "hi"
            for s in range(1000)
        )
        assert hits / 1000 >= 0.99

    def test_softmax_frequencies_follow_scores(self):
        # Scores ln(2) apart at tau=1 give a 2:1 preference.
        cands = [make_candidate("a", math.log(2.0)), make_candidate("b", 0.0)]
        hits = sum(
            select(cands, mode="softmax", tau=1.0, rng=np.random.default_rng(s))[0].entry_id
            == "a"
            for s in range(10_000)
        )
        assert abs(hits / 10_000 - 2.0 / 3.0) < 0.02

    def test_softmax_without_replacement(self):
        cands = [make_candidate("a", 1.0), make_candidate("b", 2.0)]
        chosen = select(cands, k=2, mode="softmax", rng=np.random.default_rng(4))
        assert sorted(c.entry_id for c in chosen) == ["a", "b"]


class TestSampleArms:
    def stub_lib(self):
        lib = ArmLibrary(entries=(chain_entry("alpha", 3), chain_entry("beta", 4)))
        model = StubConcept(
            {
                "alpha": ((0.5, 0.5), flat_rates(0.2)),
                "beta": ((0.9, 0.8), flat_rates(0.4)),
            }
        )
        return lib, model

    def test_argmax_end_to_end(self):
        lib, model = self.stub_lib()
        report = sample_arms(model, [boxed_subpocket(capacity=10)], lib)
        assert report.unfillable == ()
        sel = report.selections[0]
        assert not sel.used_fallback
        assert len(sel.candidates) == 2
        assert sel.chosen[0].entry_id == "beta"

    def test_chosen_scores_recompute_exactly(self):
        lib, model = self.stub_lib()
        weights = LossWeights(spatial=(0.4, 1.3), interaction=tuple(0.1 * (i + 1) for i in range(7)))
        report = sample_arms(model, [boxed_subpocket(capacity=10)], lib, weights, k=2)
        for cand in report.selections[0].chosen:
            assert cand.score == compatibility_score(cand.spatial, cand.rates, weights)

    def test_weight_scaling_never_changes_ranking(self):
        lib, model = self.stub_lib()
        rng = np.random.default_rng(7)
        weights = LossWeights(
            spatial=tuple(rng.uniform(0.1, 2, 2)), interaction=tuple(rng.uniform(0.1, 2, 7))
        )
        base = sample_arms(model, [boxed_subpocket(capacity=10)], lib, weights, k=2)
        scaled = sample_arms(
            model, [boxed_subpocket(capacity=10)], lib, weights.scaled(7.3), k=2
        )
        ids = lambda rep: [c.entry_id for c in rep.selections[0].chosen]
        assert ids(base) == ids(scaled)

    def test_fallback_on_cramped_subpocket(self):
        lib, model = self.stub_lib()
        report = sample_arms(model, [boxed_subpocket(capacity=0)], lib)
        sel = report.selections[0]
        assert sel.used_fallback
        assert len(sel.candidates) == 2  # both entries are among the 5 smallest
        assert report.unfillable == ()

    def test_empty_library_reports_unfillable(self):
        report = sample_arms(
            StubConcept({}),
            [boxed_subpocket(capacity=10, sp_id=3)],
            ArmLibrary(entries=()),
        )
        assert report.unfillable == (3,)
        assert report.selections == ()

    def test_softmax_reproducible_across_runs(self):
        lib, model = self.stub_lib()
        pockets = [boxed_subpocket(capacity=10, sp_id=0), boxed_subpocket(capacity=10, sp_id=1)]
        a = sample_arms(model, pockets, lib, mode="softmax", tau=0.5, seed=11)
        b = sample_arms(model, pockets, lib, mode="softmax", tau=0.5, seed=11)
        for sa, sb in zip(a.selections, b.selections):
            assert [c.entry_id for c in sa.chosen] == [c.entry_id for c in sb.chosen]

    def test_hbond_ablation_flips_ranking(self):
        lib = ArmLibrary(entries=(chain_entry("donor", 3), chain_entry("greasy", 4)))
        hbond_idx = INTERACTION_KINDS.index("hbond")
        hydro_idx = INTERACTION_KINDS.index("hydrophobic")
        donor_rates = tuple(5.0 if i == hbond_idx else 0.0 for i in range(7))
        greasy_rates = tuple(3.0 if i == hydro_idx else 0.0 for i in range(7))
        model = StubConcept(
            {"donor": ((0.0, 0.0), donor_rates), "greasy": ((0.0, 0.0), greasy_rates)}
        )
        pocket = boxed_subpocket(capacity=10)
        full = sample_arms(model, [pocket], lib, DEFAULT_LOSS_WEIGHTS)
        ablated = sample_arms(
            model, [pocket], lib, zero_interaction(DEFAULT_LOSS_WEIGHTS, "hbond")
        )
        assert full.selections[0].chosen[0].entry_id == "donor"
        assert ablated.selections[0].chosen[0].entry_id == "greasy"

    def test_zero_interaction_validation(self):
        weights = zero_interaction(DEFAULT_LOSS_WEIGHTS, "pi_stacking")
        idx = INTERACTION_KINDS.index("pi_stacking")
        assert weights.interaction[idx] == 0.0
        assert all(w == 1.0 for i, w in enumerate(weights.interaction) if i != idx)
        assert weights.spatial == DEFAULT_LOSS_WEIGHTS.spatial
        with pytest.raises(SamplerError):
            zero_interaction(DEFAULT_LOSS_WEIGHTS, "van_der_waals")


class TestReports:
    def test_contributions_sum_to_score(self):
        lib = ArmLibrary(entries=(chain_entry("alpha", 3),))
        model = StubConcept({"alpha": ((0.3, 0.7), (1.0, 0.0, 2.0, 0.0, 0.5, 0.0, 0.0))})
        weights = LossWeights(
            spatial=(0.7, 0.3), interaction=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
        )
        report = sample_arms(model, [boxed_subpocket(capacity=10)], lib, weights)
        info = interpretability_report(report.selections[0], weights)
        arm = info["arms"][0]
        assert arm["entry"] == "alpha"
        assert arm["concepts"]["nonpolar_occupation"] == pytest.approx(0.3)
        assert arm["concepts"]["hbond"] == pytest.approx(1.0)
        assert arm["contributions"]["surface_complementarity"] == pytest.approx(0.21)
        total = sum(arm["contributions"].values())
        assert total == pytest.approx(arm["score"], abs=1e-12)

    def test_report_file_is_valid_json(self, tmp_path):
        lib = ArmLibrary(entries=(chain_entry("alpha", 3),))
        model = StubConcept({"alpha": ((0.5, 0.5), flat_rates(0.1))})
        report = sample_arms(model, [boxed_subpocket(capacity=10, sp_id=2)], lib)
        path = tmp_path / "selection.json"
        save_report(report, path)
        payload = json.loads(path.read_text())
        assert payload["unfillable"] == []
        assert payload["selections"][0]["subpocket"] == 2
        assert payload["selections"][0]["arms"][0]["entry"] == "alpha"

    def test_full_report_covers_every_selection(self):
        lib = ArmLibrary(entries=(chain_entry("alpha", 3), chain_entry("beta", 4)))
        model = StubConcept(
            {"alpha": ((0.5, 0.5), flat_rates(0.2)), "beta": ((0.6, 0.6), flat_rates(0.1))}
        )
        pockets = [boxed_subpocket(capacity=10, sp_id=0), boxed_subpocket(capacity=10, sp_id=1)]
        report = sample_arms(model, pockets, lib)
        payload = library_report(report)
        assert [s["subpocket"] for s in payload["selections"]] == [0, 1]
