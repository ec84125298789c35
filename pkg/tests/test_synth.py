"""Synthetic card generator: determinism, geometry, and dataset structure."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from padvision import core, synth


class TestColorModels:
    def test_panel_table_shape(self, panel_model):
        assert panel_model.table.shape == (26, 12, 3)

    def test_timer_color_is_drug_independent(self, panel_model):
        timers = panel_model.table[:, 0]
        assert np.all(timers == timers[0])

    def test_all_reaction_colors_chromatic(self, panel_model):
        for d in range(26):
            for j in range(1, 12):
                assert synth.max_diff_of(panel_model.table[d, j]) >= 60

    def test_group_members_share_color_multiset(self, panel_model):
        a = np.sort(panel_model.table[0, 1:], axis=0)
        b = np.sort(panel_model.table[1, 1:], axis=0)
        assert np.allclose(a, b)

    def test_group_members_differ_in_arrangement(self, panel_model):
        assert not np.allclose(panel_model.table[0, 1:],
                               panel_model.table[1, 1:])

    def test_groups_use_different_palettes(self, panel_model):
        g0 = {tuple(np.round(c)) for c in panel_model.table[0, 1:]}
        g1 = {tuple(np.round(c)) for c in panel_model.table[3, 1:]}
        assert not g0 & g1

    def test_single_reagent_model_shape(self):
        m = synth.single_reagent_color_model(0)
        assert m.table.shape == (26, 24, 3)
        assert m.timer_slot is None

    def test_single_card_concentration_ramp(self):
        m = synth.single_reagent_color_model(0)
        lanes = synth.single_card_lane_colors(m, 0, 0)
        assert lanes.shape == (9, 3)
        base = m.table[0, 0]
        white = np.array([255.0, 255.0, 255.0])
        # first triplet is the weakest dilution
        d_first = np.linalg.norm(lanes[0] - white)
        d_last = np.linalg.norm(lanes[8] - white)
        assert d_first < d_last
        assert np.allclose(lanes[8], base)


class TestRendering:
    def test_identity_render_deterministic(self, layout12, panel_model):
        a, _ = synth.render_card(0, layout12, panel_model,
                                 synth.IDENTITY_DISTORTION, seed=5)
        b, _ = synth.render_card(0, layout12, panel_model,
                                 synth.IDENTITY_DISTORTION, seed=5)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self, layout12, panel_model):
        a, _ = synth.render_card(0, layout12, panel_model,
                                 synth.IDENTITY_DISTORTION, seed=5)
        b, _ = synth.render_card(0, layout12, panel_model,
                                 synth.IDENTITY_DISTORTION, seed=6)
        assert not np.array_equal(a, b)

    def test_identity_truth_homography(self, clean_card):
        _, truth = clean_card
        assert np.allclose(truth.homography, np.eye(3))

    def test_distorted_render_deterministic(self, layout12, panel_model):
        dist = synth.DistortionParams()
        a, ta = synth.render_card(1, layout12, panel_model, dist, seed=9)
        b, tb = synth.render_card(1, layout12, panel_model, dist, seed=9)
        assert np.array_equal(a, b)
        assert np.allclose(ta.homography, tb.homography)

    def test_crop_shape(self, clean_crop, layout12):
        assert clean_crop.shape == (layout12.crop_window.h,
                                    layout12.crop_window.w, 3)

    def test_unknown_drug_label(self, layout12, panel_model):
        with pytest.raises(core.ConfigError):
            synth.render_card("not-a-drug", layout12, panel_model,
                              synth.IDENTITY_DISTORTION, seed=0)

    def test_lane_truth_recorded(self, clean_card):
        _, truth = clean_card
        assert len(truth.lanes) == 12
        for lane in truth.lanes:
            assert lane.color.shape == (3,)


class TestPermuteLanes:
    def test_identity_permutation(self, clean_crop, layout12):
        out = synth.permute_lanes(clean_crop, layout12, list(range(12)))
        assert np.array_equal(out, clean_crop)

    @given(perm=st.permutations(list(range(12))))
    @settings(max_examples=10, deadline=None)
    def test_inverse_restores_lanes(self, clean_crop, layout12, perm):
        inverse = [0] * 12
        for i, p in enumerate(perm):
            inverse[p] = i
        once = synth.permute_lanes(clean_crop, layout12, perm)
        back = synth.permute_lanes(once, layout12, inverse)
        for rect in layout12.lane_rects:
            assert np.array_equal(back[rect.y:rect.y1, rect.x:rect.x1],
                                  clean_crop[rect.y:rect.y1, rect.x:rect.x1])

    def test_rejects_non_bijection(self, clean_crop, layout12):
        with pytest.raises(ValueError):
            synth.permute_lanes(clean_crop, layout12, [0] * 12)

    def test_moves_lane_content(self, clean_crop, layout12):
        perm = list(range(1, 12)) + [0]
        out = synth.permute_lanes(clean_crop, layout12, perm)
        r0, r1 = layout12.lane_rects[0], layout12.lane_rects[1]
        assert np.array_equal(out[r0.y:r0.y1, r0.x:r0.x1],
                              clean_crop[r1.y:r1.y1, r1.x:r1.x1])


class TestFingerprintSynthesis:
    def test_record_shapes(self):
        m = synth.single_reagent_color_model(0)
        records = synth.synthesize_fingerprint_records(m, replicates=2,
                                                       seed=0)
        assert len(records) == 26 * 24
        for reps in records.values():
            assert len(reps) == 2
            assert reps[0].shape == (9, 3)

    def test_panel_fingerprints(self, panel_model):
        fps = synth.synthesize_panel_fingerprints(panel_model, replicates=4,
                                                  seed=0)
        assert len(fps) == 26
        assert all(len(v) == 4 for v in fps.values())


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    config = synth.DatasetConfig(
        out_dir=str(out), drugs=("acetaminophen", "quinine"),
        images_per_drug=3, folds=3,
        distortion=synth.IDENTITY_DISTORTION, rectifier="oracle")
    return synth.generate_dataset(config, seed=3), out


class TestDataset:
    def test_manifest_structure(self, tiny_manifest):
        manifest, out = tiny_manifest
        assert manifest["version"] == 1
        assert len(manifest["entries"]) == 6
        assert (out / "manifest.json").exists()

    def test_fold_assignment_balanced(self, tiny_manifest):
        manifest, _ = tiny_manifest
        for drug in ("acetaminophen", "quinine"):
            folds = sorted(e["fold"] for e in manifest["entries"]
                           if e["drug_label"] == drug)
            assert folds == [0, 1, 2]

    def test_split_follows_fold_zero(self, tiny_manifest):
        manifest, _ = tiny_manifest
        for e in manifest["entries"]:
            assert e["split"] == ("test" if e["fold"] == 0 else "train")

    def test_images_written(self, tiny_manifest):
        manifest, out = tiny_manifest
        for e in manifest["entries"]:
            img = core.load_png(out / e["image_path"])
            assert img.shape == (490, 636, 3)

    def test_config_digest_stable(self, tiny_manifest):
        manifest, _ = tiny_manifest
        assert manifest["config_digest"] \
            == core.digest_json(manifest["config"])
