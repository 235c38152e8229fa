import json
import math
from pathlib import Path

import numpy as np
import pytest

from mangagen.annotations import BBox, PageAnnotation, PanelAnnotation, serialize_page_annotation
from mangagen.cli import cli, main
from mangagen.config import (
    OptimizerConfig,
    PipelineConfig,
    ScheduleConfig,
    TrainingConfig,
    desk_config,
    full_scale_config,
    load_pipeline_config,
    save_pipeline_config,
)
from mangagen.errors import ConfigError
from mangagen.model import ModelConfig
from mangagen.panels import load_image, save_image
from mangagen.synthetic import write_synthetic_dataset

DATA = Path(__file__).parent / "data"


def run_cli(*args: str) -> int:
    return main(list(args))


class TestPipelineConfig:
    def test_defaults_are_consistent(self):
        desk_config()
        full_scale_config()

    def test_save_load_round_trip(self, tmp_path):
        cfg = desk_config(seed=5)
        save_pipeline_config(cfg, tmp_path / "cfg.json")
        assert load_pipeline_config(tmp_path / "cfg.json") == cfg

    def test_unknown_top_level_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"page": {}, "turbo": True}))
        with pytest.raises(ConfigError, match="turbo"):
            load_pipeline_config(tmp_path / "c.json")

    def test_unknown_nested_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"schedule": {"weird": 1}}))
        with pytest.raises(ConfigError, match="weird"):
            load_pipeline_config(tmp_path / "c.json")

    def test_k_max_disagreement(self, tmp_path):
        (tmp_path / "c.json").write_text(
            json.dumps({"k_max": 4, "model": {"k_max": 8}})
        )
        with pytest.raises(ConfigError, match="k_max"):
            load_pipeline_config(tmp_path / "c.json")

    def test_timestep_disagreement(self, tmp_path):
        (tmp_path / "c.json").write_text(
            json.dumps(
                {"model": {"num_timesteps": 50}, "schedule": {"timesteps": 100}}
            )
        )
        with pytest.raises(ConfigError, match="steps disagree"):
            load_pipeline_config(tmp_path / "c.json")

    def test_page_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            PipelineConfig(page_width=50, page_height=64)

    def test_direct_inconsistency_caught(self):
        with pytest.raises(ConfigError):
            PipelineConfig(k_max=8, model=ModelConfig(k_max=4))


def _tiny_config(tmp_path, timesteps=6) -> Path:
    cfg = PipelineConfig(
        page_width=48,
        page_height=64,
        k_max=4,
        seed=3,
        model=ModelConfig(
            d_model=16, depth=1, heads=2, k_max=4, d_text=8,
            max_text_tokens=8, num_timesteps=timesteps,
        ),
        schedule=ScheduleConfig(timesteps=timesteps),
        optimizer=OptimizerConfig(lr=1e-3),
        training=TrainingConfig(steps=3, batch_size=2),
    )
    path = tmp_path / "config.json"
    save_pipeline_config(cfg, path)
    return path


class TestHelp:
    def test_every_flag_documented(self, capsys):
        flags = {
            "build-dataset": ["--annotations", "--images", "--out", "--k-max", "--bubbles"],
            "order-panels": ["--annotation", "--gap-tolerance", "--explain"],
            "split-story": ["--k", "--story-file", "--k-max"],
            "train": ["--config", "--data", "--out", "--steps", "--batch-size", "--seed", "--log-every"],
            "sample": ["--ckpt", "--story", "--k", "--seed", "--out"],
            "compose": ["--out"],
            "evaluate": ["--gen", "--ref", "--extractor", "--report"],
        }
        assert set(flags) == set(cli.commands)
        for command, expected in flags.items():
            assert run_cli(command, "--help") == 0
            out = capsys.readouterr().out
            for flag in expected:
                assert flag in out, f"{command} help missing {flag}"
            # every declared parameter shows up (arguments appear as metavars)
            for param in cli.commands[command].params:
                shown = list(param.opts) + [param.name.upper()]
                assert any(o in out for o in shown), (command, param.name)


class TestOrderPanelsCommand:
    def _write_grid(self, tmp_path) -> Path:
        page = PageAnnotation(
            page_id="grid",
            width=100,
            height=100,
            panels=(
                PanelAnnotation(box=BBox(0, 0, 50, 50)),
                PanelAnnotation(box=BBox(50, 0, 100, 50)),
                PanelAnnotation(box=BBox(0, 50, 50, 100)),
                PanelAnnotation(box=BBox(50, 50, 100, 100)),
            ),
        )
        path = tmp_path / "grid.xml"
        path.write_text(serialize_page_annotation(page))
        return path

    def test_permutation_output(self, tmp_path, capsys):
        path = self._write_grid(tmp_path)
        assert run_cli("order-panels", "--annotation", str(path)) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload == {"permutation": [1, 0, 3, 2]}

    def test_explain_includes_cut_tree(self, tmp_path, capsys):
        path = self._write_grid(tmp_path)
        assert run_cli("order-panels", "--annotation", str(path), "--explain") == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["cut_tree"]["axis"] == "horizontal"


class TestSplitStoryCommand:
    def test_prints_scripts(self, tmp_path, capsys):
        story = tmp_path / "story.txt"
        story.write_text("A hero wakes. A door creaks. Rain falls outside.")
        assert run_cli("split-story", "--k", "3", "--story-file", str(story)) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["k"] == 3
        assert len(payload["scripts"]) == 3

    def test_k_above_limit_is_config_error(self, tmp_path, capsys):
        story = tmp_path / "story.txt"
        story.write_text("One. Two.")
        assert run_cli("split-story", "--k", "9", "--story-file", str(story)) == 2
        assert "exceeds K_max" in capsys.readouterr().err


class TestComposeCommand:
    def test_min_composition(self, tmp_path, capsys):
        a = np.ones((8, 8, 3), dtype=np.float32)
        a[:4] = 24 / 255
        b = np.ones((8, 8, 3), dtype=np.float32)
        b[4:] = 64 / 255
        save_image(tmp_path / "a.png", a)
        save_image(tmp_path / "b.png", b)
        out = tmp_path / "page.png"
        assert run_cli("compose", "--out", str(out), str(tmp_path / "a.png"), str(tmp_path / "b.png")) == 0
        page = load_image(out)
        assert (page == np.minimum(a, b)).all()

    def test_dimension_mismatch_is_data_error(self, tmp_path, capsys):
        save_image(tmp_path / "a.png", np.ones((8, 8, 3), dtype=np.float32))
        save_image(tmp_path / "b.png", np.ones((4, 8, 3), dtype=np.float32))
        code = run_cli("compose", "--out", str(tmp_path / "o.png"), str(tmp_path / "a.png"), str(tmp_path / "b.png"))
        assert code == 3


def _eval_fixture(root: Path) -> None:
    rng = np.random.default_rng(2024)
    (root / "gen").mkdir(parents=True)
    (root / "ref").mkdir(parents=True)
    for i in range(4):
        g = (rng.integers(0, 256, (32, 24, 3)) / 255.0).astype(np.float32)
        r = (rng.integers(0, 256, (32, 24, 3)) / 255.0).astype(np.float32)
        save_image(root / "gen" / f"page{i}.png", g)
        save_image(root / "ref" / f"page{i}.png", r)


class TestEvaluateCommand:
    def test_self_comparison(self, tmp_path, capsys):
        _eval_fixture(tmp_path)
        report_path = tmp_path / "report.json"
        code = run_cli(
            "evaluate", "--gen", str(tmp_path / "gen"), "--ref", str(tmp_path / "gen"),
            "--report", str(report_path),
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert abs(report["fid"]) < 1e-6
        assert math.isclose(report["clip_i"], 1.0, rel_tol=1e-12)
        assert report["n"] == 4

    def test_single_image_is_data_error(self, tmp_path, capsys):
        (tmp_path / "gen").mkdir()
        (tmp_path / "ref").mkdir()
        save_image(tmp_path / "gen" / "a.png", np.ones((8, 8, 3), dtype=np.float32))
        save_image(tmp_path / "ref" / "a.png", np.ones((8, 8, 3), dtype=np.float32))
        code = run_cli(
            "evaluate", "--gen", str(tmp_path / "gen"), "--ref", str(tmp_path / "ref"),
            "--report", str(tmp_path / "r.json"),
        )
        assert code == 3

    def test_matches_golden_report(self, tmp_path, capsys):
        _eval_fixture(tmp_path)
        report_path = tmp_path / "report.json"
        code = run_cli(
            "evaluate", "--gen", str(tmp_path / "gen"), "--ref", str(tmp_path / "ref"),
            "--report", str(report_path),
        )
        assert code == 0
        got = json.loads(report_path.read_text())
        want = json.loads((DATA / "golden_eval.json").read_text())
        assert got["n"] == want["n"]
        assert got["extractor_id"] == want["extractor_id"]
        assert math.isclose(got["fid"], want["fid"], rel_tol=1e-9)
        assert math.isclose(got["clip_i"], want["clip_i"], rel_tol=1e-9)


class TestBuildDatasetCommand:
    def test_builds_manifest(self, tmp_path, capsys):
        raw = write_synthetic_dataset(tmp_path / "raw", n_pages=5, seed=1)
        out = tmp_path / "dataset"
        code = run_cli(
            "build-dataset", "--annotations", str(raw / "xml"), "--images",
            str(raw / "images"), "--out", str(out), "--k-max", "4",
            "--bubbles", str(raw / "bubbles"),
        )
        assert code == 0
        lines = [
            json.loads(l)
            for l in (out / "manifest.jsonl").read_text().splitlines() if l
        ]
        assert len(lines) == 5
        entry = lines[0]
        assert set(entry) == {
            "page_id", "image_path", "xml_path", "captions", "story",
            "bubble_boxes", "order",
        }
        assert (out / entry["image_path"]).exists()
        assert (out / entry["xml_path"]).exists()
        assert sorted(entry["order"]) == list(range(len(entry["captions"])))

    def test_discards_pages_with_too_many_panels(self, tmp_path, capsys):
        raw = write_synthetic_dataset(tmp_path / "raw", n_pages=8, seed=2, max_panels=4)
        out = tmp_path / "dataset"
        code = run_cli(
            "build-dataset", "--annotations", str(raw / "xml"), "--images",
            str(raw / "images"), "--out", str(out), "--k-max", "1",
        )
        err = capsys.readouterr().err
        manifest = (out / "manifest.jsonl").read_text().splitlines()
        assert code == 0
        assert "discarding" in err
        assert 0 < len(manifest) < 8


class TestEndToEnd:
    def test_train_sample_reproducible(self, tmp_path, capsys):
        raw = write_synthetic_dataset(tmp_path / "raw", n_pages=4, seed=3)
        dataset = tmp_path / "dataset"
        assert run_cli(
            "build-dataset", "--annotations", str(raw / "xml"), "--images",
            str(raw / "images"), "--out", str(dataset), "--k-max", "4",
            "--bubbles", str(raw / "bubbles"),
        ) == 0

        config_path = _tiny_config(tmp_path)
        ckpt = tmp_path / "ckpt"
        assert run_cli(
            "train", "--config", str(config_path), "--data", str(dataset),
            "--out", str(ckpt), "--log-every", "0",
        ) == 0
        assert (ckpt / "manifest.json").exists()
        assert (ckpt / "params.bin").exists()
        losses = json.loads((ckpt / "losses.json").read_text())
        assert len(losses) == 3

        story = tmp_path / "story.txt"
        story.write_text("A spark ignites. The page turns white.")
        page_a = tmp_path / "a.png"
        page_b = tmp_path / "b.png"
        for out_png in (page_a, page_b):
            assert run_cli(
                "sample", "--ckpt", str(ckpt), "--story", str(story), "--k", "2",
                "--seed", "11", "--out", str(out_png),
            ) == 0
        assert page_a.read_bytes() == page_b.read_bytes()
        img = load_image(page_a)
        assert img.shape == (64, 48, 3)

        # k beyond the checkpoint's panel budget is a config error.
        code = run_cli(
            "sample", "--ckpt", str(ckpt), "--story", str(story), "--k", "5",
            "--seed", "11", "--out", str(tmp_path / "c.png"),
        )
        assert code == 2
        assert "exceeds K_max" in capsys.readouterr().err

    def test_missing_annotation_dir_is_usage_error(self, tmp_path, capsys):
        code = run_cli(
            "build-dataset", "--annotations", str(tmp_path / "nope"),
            "--images", str(tmp_path), "--out", str(tmp_path / "o"),
        )
        assert code == 2

    def test_seed_flags_fall_back_to_env_var(self):
        for command in ("train", "sample"):
            seed_param = next(
                p for p in cli.commands[command].params if p.name == "seed"
            )
            assert seed_param.envvar == "MANGA_SEED"
