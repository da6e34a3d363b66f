import dataclasses
import math

import numpy as np
import pytest

from biphoton_lab import constants as C
from biphoton_lab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PIPELINE, main
from biphoton_lab.config import ConfigError, optics_preset, parse_config, parse_medium, serialize_config
from biphoton_lab.detector import simulate_frames
from biphoton_lab.experiments import (PRESETS, PipelineError, config2_delta_x, preset_config,
                                      run_preset)
from biphoton_lab.g2 import CorrelationImage, correlate_frames
from biphoton_lab.media import EtpaAbsorber, LinearLoss, Scatterer
from biphoton_lab.optics import Grating, HalfPlane

SMALL = """\
[optics]
preset = config1
roi = 16

[source]
pair_rate = 5e5

[task]
batches = 2
frames_per_batch = 40
delta_x_um = 0, 40

[run]
seed = 11
"""


class TestPresets:
    def test_config1_values(self):
        c = optics_preset("config1")
        assert (c.entanglement_area, c.beam_area, c.magnification) == (1.72e-3, 1.92, 2.0)
        assert c.pixel_pitch_um == 16.0
        assert c.wavelength == pytest.approx(814e-6)
        assert c.roi == (150, 150)

    def test_config2_values(self):
        c = optics_preset("config2")
        assert (c.entanglement_area, c.beam_area, c.magnification) == (69.2e-6, 0.0432, 10.0)
        assert c.sample_pixel == pytest.approx(1.6e-3)

    def test_exposure(self):
        assert C.EXPOSURE_S == 2e-3

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            optics_preset("config3")


class TestParseConfig:
    def test_minimal_materializes_table_values(self):
        cfg = parse_config("[optics]\npreset = config1\n")
        assert cfg.optics == optics_preset("config1")
        assert cfg.source.exposure == C.EXPOSURE_S
        assert "source.pair_rate" in cfg.defaulted
        assert "optics.preset" not in cfg.defaulted

    def test_negative_area_cites_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("# comment\n[optics]\npreset = config1\nA_e = -1\n")
        assert exc.value.line == 4
        assert "line 4" in str(exc.value)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'gian'") as exc:
            parse_config("[detector]\ngian = 300\n")
        assert exc.value.line == 2

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[camera]\ngain = 300\n")

    def test_type_error(self):
        with pytest.raises(ConfigError, match="batches") as exc:
            parse_config("[task]\nbatches = four\n")
        assert exc.value.line == 2

    @pytest.mark.parametrize("text", [
        "[source]\nslm_efficiency = 1.5\n",
        "[task]\ndelta_x_um = 40, 20\n",
        "[source]\nmask = spiral\n",
        "[detector]\ngain = 0\n",
        "[run]\nseed = -3\n",
        "[task]\nbatches = 1\n",
    ])
    def test_range_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_round_trip(self):
        text = SMALL + "[medium]\nelements = etpa(strength=0.1,width=0.04);loss(transmission=0.5)\n"
        cfg = parse_config(text)
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert serialize_config(again) == serialize_config(cfg)

    @pytest.mark.parametrize("mask", [Grating(0.25, 0.3), HalfPlane(math.pi / 4)])
    def test_round_trip_masks(self, mask):
        cfg = parse_config(SMALL)
        cfg = dataclasses.replace(cfg, source=dataclasses.replace(cfg.source, mask=mask))
        assert parse_config(serialize_config(cfg)).source.mask == mask

    def test_medium_parser(self):
        m = parse_medium("etpa(strength=0.5, width=0.01); scatter(probability=0.5,displacement=0.02)")
        assert m == (EtpaAbsorber(0.5, 0.01), Scatterer(0.5, 0.02))
        assert parse_medium("none") == ()
        assert parse_medium("loss(transmission=0.5)") == (LinearLoss(0.5),)
        with pytest.raises(ValueError):
            parse_medium("fog(density=1)")


class TestPresetBundles:
    @pytest.mark.parametrize("preset", PRESETS)
    def test_every_preset_has_a_config(self, preset):
        cfg = preset_config(preset, seed=5)
        assert cfg.seed == 5

    def test_alpha_preset_plants_shift(self):
        assert preset_config("figS4").task.planted_alpha == 0.2

    def test_config2_separations_share_lag_pixels(self):
        cfg = preset_config("fig4a")
        d1 = np.array(cfg.task.delta_x_um) / (optics_preset("config1").sample_pixel * 1e3)
        d2 = np.array(config2_delta_x(cfg)) / (optics_preset("config2").sample_pixel * 1e3)
        assert d1 == pytest.approx(d2)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_config("fig9")

    def test_paper_scale(self):
        cfg = preset_config("fig3a", paper_scale=True)
        assert cfg.optics.roi == (150, 150)
        assert cfg.task.frames_per_batch == 10 * C.FRAMES_PER_BATCH

    def test_failure_names_stage(self, tmp_path):
        base = parse_config(SMALL.replace("delta_x_um = 0, 40", "delta_x_um = 0, 1000"))
        with pytest.raises(PipelineError, match="preset fig3b"):
            run_preset("fig3b", 1, tmp_path, base=base)

    def test_rerun_is_byte_identical(self, tmp_path):
        base = parse_config(SMALL)
        a = run_preset("figS5", 3, tmp_path / "a", base=base)
        b = run_preset("figS5", 3, tmp_path / "b", base=base)
        for name, path in a.artifacts.items():
            assert path.read_bytes() == b.artifacts[name].read_bytes()
        assert (tmp_path / "a/manifest.txt").read_bytes() == (tmp_path / "b/manifest.txt").read_bytes()


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


class TestCli:
    def test_simulate_then_analyze_matches_memory(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(config_file), "--out", str(out),
                     "--frames", "120"]) == EXIT_OK
        assert main(["analyze", str(out / "stack.bpf"), "--config", str(config_file),
                     "--out", str(out), "--window", "5", "--batches", "1",
                     "--interpolation", "off"]) == EXIT_OK
        img = CorrelationImage.from_csv(out / "stack_correlation.csv")
        cfg = parse_config(SMALL)
        frames = simulate_frames(cfg.source, (), cfg.detector, 120)
        ref = correlate_frames(frames, (5, 5)).finalize().values
        assert np.allclose(img.values, ref, rtol=1e-12, atol=1e-6)
        assert len(img.source_hash) == 64
        assert "xi:" in capsys.readouterr().out

    def test_seed_before_or_after_verb(self, tmp_path, config_file):
        for i, argv in enumerate([["--seed", "9", "simulate"], ["simulate", "--seed", "9"]]):
            out = tmp_path / f"r{i}"
            assert main(argv + ["--config", str(config_file), "--out", str(out),
                                "--frames", "10"]) == EXIT_OK
        assert (tmp_path / "r0/stack.bpf").read_bytes() == (tmp_path / "r1/stack.bpf").read_bytes()

    def test_truncated_stack_is_data_error(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        main(["simulate", "--config", str(config_file), "--out", str(out), "--frames", "10"])
        stack = out / "stack.bpf"
        stack.write_bytes(stack.read_bytes()[:-16 * 16 * 2 * 3])
        assert main(["analyze", str(stack), "--out", str(out)]) == EXIT_DATA
        assert "declares 10 frames but only 7" in capsys.readouterr().err

    def test_missing_stack_is_data_error(self, tmp_path):
        assert main(["analyze", str(tmp_path / "none.bpf"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text("[optics]\nA_e = -1\n")
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "line 2" in capsys.readouterr().err

    def test_pipeline_error_exit_code(self, tmp_path, config_file):
        out = tmp_path / "run"
        main(["simulate", "--config", str(config_file), "--out", str(out), "--frames", "10"])
        # the peak window does not fit the lag grid
        assert main(["analyze", str(out / "stack.bpf"), "--out", str(out), "--window", "3",
                     "--center", "3", "0", "--halfwidth", "1", "--batches", "1"]) == EXIT_PIPELINE

    def test_shuffled_null(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.ini"
        cfg_path.write_text(SMALL.replace("pair_rate = 5e5", "pair_rate = 2e6"))
        out = tmp_path / "run"
        main(["simulate", "--config", str(cfg_path), "--out", str(out), "--frames", "600"])
        capsys.readouterr()
        main(["analyze", str(out / "stack.bpf"), "--out", str(out), "--window", "4",
              "--batches", "1", "--interpolation", "off"])
        main(["analyze", str(out / "stack.bpf"), "--out", str(out), "--window", "4",
              "--shuffle", "1", "--interpolation", "off"])
        real = CorrelationImage.from_csv(out / "stack_correlation.csv")
        null = CorrelationImage.from_csv(out / "stack_shuffled_correlation.csv")
        assert "shuffled" in null.flags
        assert real.at(0, 0) > 10 * abs(null.at(0, 0))

    def test_report(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        assert main(["preset", "figS5", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        capsys.readouterr()
        assert main(["report", str(out)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "preset = figS5" in text
        assert "halfplane_scan.csv (4 rows)" in text

    def test_report_missing_manifest(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_DATA
