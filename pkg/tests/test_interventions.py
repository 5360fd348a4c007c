import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortcut_audit import audio
from shortcut_audit import interventions as iv
from shortcut_audit.audio import Waveform

from conftest import SR, half_tone_half_silence, make_manifest, tone

CONFIG_INDICATORS = {
    "O": (0, 0, 0, 0), "I": (1, 1, 1, 1), "M_tr": (1, 1, 0, 0), "M_te": (0, 0, 1, 1),
    "IT_p": (0, 1, 0, 1), "IT_n": (1, 0, 1, 0), "IV_pn": (0, 1, 1, 0), "IV_np": (1, 0, 0, 1),
    "O_n": (0, 0, 1, 0), "O_p": (0, 0, 0, 1),
}


class TestConfigAlgebra:
    @pytest.mark.parametrize("name,bits", sorted(CONFIG_INDICATORS.items()))
    def test_named_quadruples(self, name, bits):
        cfg = iv.config_from_name(name)
        assert cfg.rho == tuple(float(b) for b in bits) and cfg.name == name

    def test_alias(self):
        assert iv.config_from_name("IV_ps").rho == (0.0, 1.0, 1.0, 0.0)

    def test_unknown(self):
        with pytest.raises(KeyError):
            iv.config_from_name("XX")

    def test_named_config_must_match_bits(self):
        with pytest.raises(ValueError):
            iv.ConfigQuadruple((0, 1, 0, 0), "IT_p")

    def test_delta_worked_pattern(self):
        itp = iv.config_from_name("IT_p")
        assert iv.delta_features(1, itp) == iv.DeltaFeatures(0.0, 1.0)
        assert iv.delta_features(0, itp) == iv.DeltaFeatures(1.0, 0.0)
        for r in (0, 1):
            assert iv.delta_features(r, iv.config_from_name("O")) == iv.DeltaFeatures(float(r), float(r))
        assert iv.delta_features(0, iv.config_from_name("O")) == iv.DeltaFeatures(0.0, 0.0)

    @pytest.mark.parametrize("name", sorted(CONFIG_INDICATORS))
    def test_delta_pattern_for_all_configs(self, name):
        cfg = iv.config_from_name(name)
        for cls in (0, 1):
            r = cfg.rho_for(cls, 1)
            d = iv.delta_features(r, cfg)
            assert 0.0 <= d.delta_pos <= 1.0 and 0.0 <= d.delta_neg <= 1.0
            if name in ("O", "I"):
                assert d.delta_pos == d.delta_neg
            if name.startswith(("IT", "IV")):
                assert (d.delta_pos, d.delta_neg) in ((0.0, 1.0), (1.0, 0.0))


class TestSpec:
    def test_parameter_free_kinds(self):
        with pytest.raises(ValueError):
            iv.InterventionSpec("mu_law", 0.0, 1.0)
        assert iv.InterventionSpec("nonspeech_zeroing").draw(np.random.default_rng(0)) is None

    def test_inverted_interval(self):
        with pytest.raises(ValueError):
            iv.InterventionSpec("white_noise", 10.0, 0.0)

    def test_defaults(self):
        assert (iv.InterventionSpec.default("white_noise").low, iv.InterventionSpec.default("white_noise").high) == (0.0, 30.0)
        spec = iv.InterventionSpec.default("loudness_norm")
        assert (spec.low, spec.high) == (-31.0, -13.0)
        codec = iv.InterventionSpec.default("external_codec", "cp {in} {out}")
        assert codec.choices == (16, 32, 64, 128, 256)


class TestAssign:
    def test_rho_one_takes_all(self):
        m = make_manifest((10, 0, 0, 0))
        plan = iv.assign(m, iv.InterventionSpec.default("white_noise"), iv.ConfigQuadruple((1, 0, 0, 0)), 0)
        assert len(plan.intervened_ids()) == 10

    def test_half_of_seven_is_three(self):
        m = make_manifest((7, 0, 0, 0))
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.ConfigQuadruple((0.5, 0, 0, 0)), 0)
        assert len(plan.intervened_ids()) == 3

    def test_order_independent(self):
        m = make_manifest((6, 7, 8, 9))
        spec = iv.InterventionSpec.default("white_noise")
        cfg = iv.ConfigQuadruple((0.5, 0.3, 0.7, 0.25))
        a = iv.assign(m, spec, cfg, 42)
        b = iv.assign(m.with_items(reversed(m.items)), spec, cfg, 42)
        assert dict(a.decisions) == dict(b.decisions)
        assert iv.format_receipt(a) == iv.format_receipt(b)

    def test_z_present_iff_intervened_with_control(self):
        m = make_manifest((10, 10, 10, 10))
        plan = iv.assign(m, iv.InterventionSpec.default("white_noise"), iv.config_from_name("IT_p"), 1)
        for d in plan.decisions.values():
            assert (d.z is not None) == d.intervene
            if d.z is not None:
                assert 0.0 <= d.z <= 30.0
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.config_from_name("I"), 1)
        assert all(d.intervene and d.z is None for d in plan.decisions.values())

    def test_decimal_floor(self):
        assert iv.n_selected(0.29, 100) == 29
        assert iv.n_selected(0.5, 7) == 3
        assert iv.n_selected(1.0, 13) == 13

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 60))
    def test_exact_floor_counts(self, rho, m_items):
        m = make_manifest((m_items, 0, 0, 0))
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.ConfigQuadruple((rho, 0, 0, 0)), 0)
        assert len(plan.intervened_ids()) == iv.n_selected(rho, m_items)


class TestWhiteNoise:
    def test_60_db_on_unit_power(self):
        x = Waveform(np.sqrt(2) * np.sin(2 * np.pi * 100 * np.arange(SR) / SR), SR)
        y = iv.add_white_noise(x, 60.0, 1)
        assert np.mean((y.samples - x.samples) ** 2) == pytest.approx(1e-6, rel=1e-9)

    @pytest.mark.parametrize("snr", [0.0, 10.0, 30.0])
    def test_realized_snr(self, snr):
        x = Waveform(tone(amp=0.3), SR)
        y = iv.add_white_noise(x, snr, 9)
        measured = 10 * math.log10(np.mean(x.samples ** 2) / np.mean((y.samples - x.samples) ** 2))
        assert measured == pytest.approx(snr, abs=0.2)

    def test_deterministic(self):
        x = Waveform(tone(), SR)
        np.testing.assert_array_equal(iv.add_white_noise(x, 5, 3).samples, iv.add_white_noise(x, 5, 3).samples)

    def test_zero_power(self):
        with pytest.raises(iv.ZeroPowerError):
            iv.add_white_noise(Waveform(np.zeros(10), SR), 10, 0)


def mu_law_error_bound():
    """Largest reconstruction error over all quantizer cells, by enumeration."""
    k = np.arange(-iv.MU_LAW_STEPS, iv.MU_LAW_STEPS + 1)
    levels = iv.mu_law_expand(k / iv.MU_LAW_STEPS)
    edges = iv.mu_law_expand(np.clip((k + 0.5) / iv.MU_LAW_STEPS, -1, 1))
    lower = np.concatenate([[-1.0], edges[:-1]])
    upper = np.append(edges[:-1], 1.0)
    return float(max(np.max(levels - lower), np.max(upper - levels)))


class TestMuLaw:
    def test_zero_and_full_scale(self):
        assert not iv.mu_law_roundtrip(Waveform(np.zeros(50), SR)).samples.any()
        np.testing.assert_array_equal(iv.mu_law_roundtrip(Waveform(np.array([1.0, -1.0]), SR)).samples, [1.0, -1.0])

    def test_level_count(self):
        x = np.linspace(-1, 1, 200001)
        assert np.unique(iv.mu_law_roundtrip(Waveform(x, SR)).samples).size == 255

    def test_error_within_cell_bound(self):
        bound = mu_law_error_bound()
        x = np.random.default_rng(0).uniform(-1, 1, 200000)
        err = np.max(np.abs(iv.mu_law_roundtrip(Waveform(x, SR)).samples - x))
        assert err <= bound + 1e-12
        assert err > 0.9 * bound

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=200))
    def test_idempotent(self, values):
        once = iv.mu_law_roundtrip(Waveform(np.array(values), SR))
        np.testing.assert_array_equal(iv.mu_law_roundtrip(once).samples, once.samples)


class TestLoudnessNormalize:
    def test_lands_on_target(self):
        x = Waveform(0.05 * np.random.default_rng(0).standard_normal(2 * SR), SR)
        for target in (-31.0, -23.0, -13.0):
            assert audio.measure_loudness_lufs(iv.loudness_normalize(x, target)) == pytest.approx(target, abs=0.2)

    def test_gain_is_target_minus_measured(self):
        x = Waveform(0.2 * np.random.default_rng(1).standard_normal(2 * SR), SR)
        measured = audio.measure_loudness_lufs(x)
        y = iv.loudness_normalize(x, measured - 6.0)
        np.testing.assert_allclose(y.samples, x.samples * 10 ** (-6.0 / 20), rtol=1e-12)

    def test_silent_input(self):
        with pytest.raises(iv.SilentInputError):
            iv.loudness_normalize(Waveform(np.zeros(SR), SR), -23.0)

    def test_loud_target_may_exceed_full_scale(self, tmp_path):
        x = Waveform(0.01 * tone(seconds=1.0), SR)
        y = iv.loudness_normalize(x, -1.0)
        assert np.max(np.abs(y.samples)) > 1.0
        assert audio.write_pcm(y, tmp_path / "c.wav") > 0


class TestZeroNonspeech:
    def test_all_speech_identical(self):
        x = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, SR), SR)
        np.testing.assert_array_equal(iv.zero_nonspeech(x).samples, x.samples)

    def test_all_silence(self):
        assert not iv.zero_nonspeech(Waveform(np.zeros(SR), SR)).samples.any()

    def test_half_tone(self):
        x = half_tone_half_silence()
        y = iv.zero_nonspeech(x)
        np.testing.assert_array_equal(y.samples[: SR // 2], x.samples[: SR // 2])
        assert not y.samples[SR // 2:].any()

    def test_frames_exact(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([0.3 * rng.standard_normal(4000), 1e-4 * rng.standard_normal(4123)])
        wf = Waveform(x, SR)
        mask = iv.sample_mask(audio.energy_vad(wf), len(x))
        y = iv.zero_nonspeech(wf).samples
        np.testing.assert_array_equal(y[mask], x[mask])
        assert not y[~mask].any()


class TestExternalCodec:
    def test_identity_stub(self):
        x = Waveform(np.round(tone() * 32768) / 32768, SR)
        y = iv.external_codec(x, iv.identity_codec_command(), 64)
        np.testing.assert_array_equal(y.samples, x.samples)

    def test_missing_executable(self):
        with pytest.raises(iv.CodecError, match="no-such-codec"):
            iv.external_codec(Waveform(tone(), SR), "no-such-codec {in} {out} {z}", 64)

    def test_nonzero_exit(self):
        with pytest.raises(iv.CodecError, match="exited"):
            iv.external_codec(Waveform(tone(), SR), "false {in} {out}", 64)

    def test_length_is_trimmed_or_padded(self, tmp_path):
        script = tmp_path / "trim.py"
        script.write_text(
            "import sys, wave\n"
            "src = wave.open(sys.argv[1]); frames = src.readframes(src.getnframes()); p = src.getparams(); src.close()\n"
            "dst = wave.open(sys.argv[2], 'wb'); dst.setparams(p); dst.writeframes(frames[:-200] if sys.argv[3] == 'short' else frames + bytes(300)); dst.close()\n"
        )

        x = Waveform(np.round(tone() * 32768) / 32768, SR)
        cmd = f"{sys.executable} {script} {{in}} {{out}} {{z}}"
        short = iv.external_codec(x, cmd, "short")
        assert len(short) == len(x)
        assert not short.samples[-100:].any()
        np.testing.assert_array_equal(short.samples[:-100], x.samples[:-100])
        np.testing.assert_array_equal(iv.external_codec(x, cmd, "long").samples, x.samples)


class TestPlans:
    def test_config_o_keeps_files(self, small_corpus, tmp_path):
        m, _ = small_corpus
        plan = iv.assign(m, iv.InterventionSpec.default("white_noise"), iv.config_from_name("O"), 0)
        out = iv.apply_plan(m, plan, tmp_path)
        assert len(out) == len(m)
        for a, b in zip(m.items, out.items):
            assert a.path.read_bytes() == b.path.read_bytes()
            assert (a.class_label, a.split) == (b.class_label, b.split)

    def test_it_p_counts_via_receipt(self, small_corpus, tmp_path):
        m, _ = small_corpus
        plan = iv.assign(m, iv.InterventionSpec.default("white_noise"), iv.config_from_name("IT_p"), 0)
        iv.apply_plan(m, plan, tmp_path, jobs=2)
        rows = [l.split(",") for l in (tmp_path / "receipt.csv").read_text().splitlines() if not l.startswith(("#", "id,"))]
        flagged = [r for r in rows if r[2] == "1"]
        assert len(flagged) == 40
        assert {r[1] for r in flagged} == {"X_10", "X_11"}
        assert sum(r[1] == "X_10" for r in flagged) == 20

    def test_config_i_modifies_every_file(self, small_corpus, tmp_path):
        m, _ = small_corpus
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.config_from_name("I"), 0)
        out = iv.apply_plan(m, plan, tmp_path)
        assert all(b.path.parent == tmp_path / "audio" for b in out.items)

    def test_receipt_round_trip(self, tmp_path):
        m = make_manifest((5, 5, 5, 5))
        for spec in (iv.InterventionSpec.default("white_noise"), iv.InterventionSpec("mu_law"),
                     iv.InterventionSpec.default("external_codec", "cp {in} {out}")):
            plan = iv.assign(m, spec, iv.ConfigQuadruple((0.4, 1, 0.6, 0)), 7)
            iv.save_receipt(plan, tmp_path / "r.csv")
            again = iv.load_receipt(tmp_path / "r.csv")
            assert iv.format_receipt(again) == iv.format_receipt(plan)
            assert dict(again.decisions) == dict(plan.decisions)

    def test_failure_names_item(self, tmp_path):
        m = make_manifest((1, 1, 1, 1))
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.config_from_name("I"), 0)
        with pytest.raises(iv.InterventionError, match="it00_0000"):
            iv.apply_plan(m, plan, tmp_path)


class TestGrid:
    def test_5x5(self):
        m = make_manifest((8, 8, 8, 8))
        grid = [(a, b) for a in (0, .25, .5, .75, 1) for b in (0, .25, .5, .75, 1)]
        plans = iv.grid_plans(m, iv.InterventionSpec("mu_law"), "O-train", grid, 0)
        assert len(plans) == 25

    def test_corners_name_configs(self):
        m = make_manifest((8, 8, 8, 8))
        plans = iv.grid_plans(m, iv.InterventionSpec("mu_law"), "O-train", [(0, 0), (1, 1)], 0)
        assert plans[0].config.name == "O" and plans[1].config.name == "M_te"

    def test_training_decisions_shared(self):
        m = make_manifest((8, 8, 8, 8))
        plans = iv.grid_plans(m, iv.InterventionSpec.default("white_noise"), "bonafide-only-train",
                              iv.parse_grid("0,0.5,1"), 3)
        assert len(plans) == 9
        train_ids = [i for i, key in plans[0].subsets.items() if key[1] == 0]
        for p in plans[1:]:
            assert all(p.decisions[i] == plans[0].decisions[i] for i in train_ids)

    def test_plan_deltas_realized_bits(self):
        m = make_manifest((4, 4, 4, 4))
        plan = iv.assign(m, iv.InterventionSpec("mu_law"), iv.ConfigQuadruple((0, 1, 0.5, 0.5)), 0)
        deltas = iv.plan_deltas(plan)
        assert len(deltas) == 8
        for item_id, d in deltas.items():
            r = float(plan.decisions[item_id].intervene)
            assert d == iv.DeltaFeatures(abs(r - 1), abs(r - 0))
