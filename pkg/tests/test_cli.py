from pathlib import Path

import numpy as np
import pytest
import yaml

from partfont.cli import main
from partfont.config import RunConfig, from_preset
from partfont.errors import ConfigError
from partfont.util import save_glyph_png


class TestConfig:
    def test_presets_resolve(self):
        for name in ("desk", "paper", "smoke"):
            cfg = from_preset(name)
            assert cfg.preset == name

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            from_preset("warp9")

    def test_round_trip(self, tmp_path):
        cfg = from_preset("smoke", run_dir=str(tmp_path / "run"))
        cfg.save(tmp_path / "c.yaml")
        loaded = RunConfig.load(tmp_path / "c.yaml")
        assert loaded.to_dict() == cfg.to_dict()

    def test_invalid_part_size(self):
        data = from_preset("smoke").to_dict()
        data["parts"]["part_sizes"] = [48]
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)

    def test_part_size_must_fit_canvas(self):
        data = from_preset("smoke").to_dict()
        data["parts"]["part_sizes"] = [128]
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)


class TestExitCodes:
    def test_bad_config_file_exit_2(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("dataset: [not, a, mapping]")
        assert main(["--config", str(bad), "split"]) == 2

    def test_unknown_preset_exit_2(self, tmp_path):
        assert main(["--preset", "nope", "--run-dir", str(tmp_path), "split"]) == 2

    def test_split_before_ingest_exit_3(self, tmp_path):
        assert main(["--preset", "smoke", "--run-dir", str(tmp_path / "run"), "split"]) == 3

    def test_ablate_before_training_exit_3(self, tmp_path):
        assert main(["--preset", "smoke", "--run-dir", str(tmp_path / "run"), "ablate"]) == 3

    def test_ingest_missing_source_exit_3(self, tmp_path):
        rc = main(
            ["--preset", "smoke", "--run-dir", str(tmp_path / "run"),
             "ingest", "--source", str(tmp_path / "nowhere")]
        )
        assert rc == 3


class TestStages:
    def test_ingest_split_extract(self, tmp_path, small_corpus):
        run = tmp_path / "run"
        rc = main(
            ["--preset", "smoke", "--run-dir", str(run), "ingest", "--source", str(small_corpus)]
        )
        assert rc == 0
        assert (run / "config.yaml").exists()
        assert (run / "cache" / "families.json").exists()

        assert main(["--run-dir", str(run), "split"]) == 0
        for name in ("train", "val", "test"):
            assert (run / "dataset" / f"{name}.json").exists()

        assert main(["--run-dir", str(run), "extract-parts", "--part-size", "32"]) == 0
        manifests = list((run / "parts" / "s32").glob("*.json"))
        assert len(manifests) == 12

        # config echo: the stored config matches the smoke preset
        stored = yaml.safe_load((run / "config.yaml").read_text())
        assert stored["preset"] == "smoke"
        assert (run / "manifest.json").exists()

    def test_generate_from_part_files(self, tmp_path, tiny_checkpoint, dejavu_64):
        from partfont.parts import extract_parts
        import cv2

        # user-style part crops on disk (black-on-white PNG)
        parts_dir = tmp_path / "parts"
        pix = cv2.resize(dejavu_64.glyphs["A"].pixels, (32, 32), interpolation=cv2.INTER_AREA)
        save_glyph_png(1.0 - np.clip(pix, 0, 1), parts_dir / "a.png")
        save_glyph_png(np.clip(pix, 0, 1), parts_dir / "b.png")

        out = tmp_path / "gen"
        rc = main(
            ["--preset", "smoke", "--run-dir", str(tmp_path / "run"), "generate",
             "--parts", str(parts_dir / "a.png"), "--parts", str(parts_dir / "b.png"),
             "--chars", "ABC", "--steps", "3", "--seed", "5",
             "--checkpoint", str(tiny_checkpoint), "--out", str(out)]
        )
        assert rc == 0
        for ch in "ABC":
            assert (out / f"{ch}.png").exists()
        assert (out / "grid.png").exists()

    def test_generate_bad_chars_exit_2(self, tmp_path, tiny_checkpoint):
        src = tmp_path / "p.png"
        save_glyph_png(np.ones((32, 32), dtype=np.float32) * 0.8, src)
        rc = main(
            ["--preset", "smoke", "--run-dir", str(tmp_path / "run"), "generate",
             "--parts", str(src), "--chars", "Ab9", "--checkpoint", str(tiny_checkpoint)]
        )
        assert rc == 2
