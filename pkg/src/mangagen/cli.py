"""Command-line pipeline binding.

Subcommands: build-dataset, order-panels, split-story, train, sample,
compose, evaluate.  Every command is pure with respect to (inputs, config,
seed): reruns reproduce outputs byte for byte.

Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error.  The env var
MANGA_SEED serves as the seed fallback where a --seed flag exists.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np
import torch

from . import config as config_mod
from . import diffusion, metrics
from .annotations import build_enriched_xml, parse_page_annotation, serialize_page_annotation
from .dataset import (
    MockCaptioningClient,
    load_manifest,
    record_from_manifest_entry,
    request_captions,
)
from .errors import ConfigError, DataError, MangagenError
from .panel_order import order_panels
from .panels import PanelImageStack, compose_page, load_image, save_image
from .scripts import pad_scripts, split_story

__all__ = ["cli", "main"]


@contextmanager
def _stage(name: str):
    """Prefix any pipeline error with the stage that raised it."""
    try:
        yield
    except ConfigError as e:
        raise ConfigError(f"{name}: {e}") from e
    except DataError as e:
        raise DataError(f"{name}: {e}") from e
    except MangagenError:
        raise
    except (ValueError, RuntimeError) as e:
        raise RuntimeError(f"{name}: {e}") from e


@click.group(name="mangagen")
def cli():
    """Generate multi-panel manga pages from plain text stories.

    The pipeline: annotate pages, estimate panel reading order, build a
    training dataset with captions, train the panel-stack denoiser, then
    sample panels from a story and compose them into a page.
    """


@cli.command("build-dataset")
@click.option("--annotations", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of flat annotation XML files (one page each).")
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of page PNGs named <page_id>.png.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output dataset directory (manifest.jsonl, images/, xml/).")
@click.option("--k-max", default=8, show_default=True, help="Maximum panels per page; pages with more are discarded.")
@click.option("--bubbles", type=click.Path(file_okay=False), default=None, help="Optional directory of <page_id>.json speech-bubble box lists.")
def build_dataset_cmd(annotations, images, out, k_max, bubbles):
    """Turn annotated pages into a training dataset manifest."""
    if k_max < 1:
        raise ConfigError(f"--k-max must be >= 1, got {k_max}")
    ann_dir, img_dir, out_dir = Path(annotations), Path(images), Path(out)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "xml").mkdir(parents=True, exist_ok=True)

    client = MockCaptioningClient()
    lines = []
    kept = skipped = 0
    for xml_path in sorted(ann_dir.glob("*.xml")):
        with _stage(f"parse {xml_path.name}"):
            annotation = parse_page_annotation(xml_path.read_text("utf-8"))
        pid = annotation.page_id
        if not annotation.panels or len(annotation.panels) > k_max:
            click.echo(
                f"discarding {pid}: {len(annotation.panels)} panels "
                f"(supported range 1..{k_max})",
                err=True,
            )
            skipped += 1
            continue
        image_path = img_dir / f"{pid}.png"
        if not image_path.exists():
            raise DataError(f"missing page image {image_path}")
        page = load_image(image_path)

        with _stage(f"order {pid}"):
            order = order_panels(
                [p.box for p in annotation.panels], (annotation.width, annotation.height)
            ).permutation
        with _stage(f"caption {pid}"):
            enriched = build_enriched_xml(annotation, order)
            captions = request_captions(client, page, enriched)

        bubble_list = []
        if bubbles is not None:
            bubble_path = Path(bubbles) / f"{pid}.json"
            if bubble_path.exists():
                bubble_list = json.loads(bubble_path.read_text("utf-8"))

        save_image(out_dir / "images" / f"{pid}.png", page)
        (out_dir / "xml" / f"{pid}.xml").write_text(
            serialize_page_annotation(annotation), encoding="utf-8"
        )
        lines.append(
            {
                "page_id": pid,
                "image_path": f"images/{pid}.png",
                "xml_path": f"xml/{pid}.xml",
                "captions": list(captions.panel_captions),
                "story": captions.story,
                "bubble_boxes": [list(b) for b in bubble_list],
                "order": list(order),
            }
        )
        kept += 1

    if not lines:
        raise DataError(f"no usable pages under {ann_dir}")
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    click.echo(f"wrote {kept} pages to {out_dir} ({skipped} discarded)")


@cli.command("order-panels")
@click.option("--annotation", required=True, type=click.Path(exists=True, dir_okay=False), help="Flat annotation XML file for one page.")
@click.option("--gap-tolerance", type=float, default=None, help="Cut tolerance in pixels; defaults to 2 px scaled by page height.")
@click.option("--explain", is_flag=True, help="Include the recursive cut tree in the output.")
def order_panels_cmd(annotation, gap_tolerance, explain):
    """Print the estimated panel reading order as JSON."""
    page = parse_page_annotation(Path(annotation).read_text("utf-8"))
    if not page.panels:
        raise DataError(f"{annotation}: page has no panels")
    result = order_panels(
        [p.box for p in page.panels], (page.width, page.height), gap_tolerance
    )
    payload: dict = {"permutation": list(result.permutation)}
    if explain:
        payload["cut_tree"] = result.cut_tree.to_dict()
    click.echo(json.dumps(payload, sort_keys=True))


@cli.command("split-story")
@click.option("--k", required=True, type=int, help="Number of panel scripts to produce.")
@click.option("--story-file", required=True, type=click.Path(exists=True, dir_okay=False), help="Plain-text story file.")
@click.option("--k-max", default=8, show_default=True, help="Upper bound on k.")
def split_story_cmd(k, story_file, k_max):
    """Split a story into k contiguous scripts and print them as JSON."""
    if k > k_max:
        raise ConfigError(f"k exceeds K_max ({k} > {k_max})")
    story = Path(story_file).read_text("utf-8")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scripts = split_story(story, k)
    click.echo(json.dumps({"scripts": list(scripts.scripts), "k": scripts.k}))


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Pipeline config JSON.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None, help="Dataset directory with manifest.jsonl (overrides config paths.data).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Checkpoint output directory (overrides config paths.out).")
@click.option("--steps", type=int, default=None, help="Training steps (overrides config).")
@click.option("--batch-size", type=int, default=None, help="Batch size (overrides config).")
@click.option("--seed", type=int, default=None, envvar="MANGA_SEED", help="Root seed (overrides config).")
@click.option("--log-every", type=int, default=100, show_default=True, help="Steps between loss log lines (0 silences).")
def train_cmd(config_path, data, out, steps, batch_size, seed, log_every):
    """Train the denoiser on a built dataset and write a checkpoint."""
    cfg = config_mod.load_pipeline_config(config_path)
    data_dir = Path(data or cfg.data_dir or "")
    out_dir = Path(out or cfg.out_dir or "")
    if not str(data_dir):
        raise ConfigError("no data directory: pass --data or set paths.data")
    if not str(out_dir):
        raise ConfigError("no output directory: pass --out or set paths.out")
    steps = steps if steps is not None else cfg.training.steps
    batch_size = batch_size if batch_size is not None else cfg.training.batch_size
    seed = seed if seed is not None else cfg.seed

    with _stage("load-dataset"):
        entries = load_manifest(data_dir / "manifest.jsonl")
        records = [record_from_manifest_entry(e, data_dir, cfg.k_max) for e in entries]

    with _stage("train"):
        state = diffusion.init_train_state(
            cfg.model,
            seed,
            lr=cfg.optimizer.lr,
            weight_decay=cfg.optimizer.weight_decay,
            betas=cfg.optimizer.betas,
        )
        sched = make_schedule_from(cfg.schedule)
        losses = diffusion.run_training(state, records, sched, steps, batch_size, log_every)

    extra = {
        "page": {"width": cfg.page_width, "height": cfg.page_height},
        "schedule": dataclasses.asdict(cfg.schedule),
    }
    diffusion.save_train_state(state, out_dir, sched_config=extra["schedule"])
    manifest_path = out_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text("utf-8"))
    manifest["page"] = extra["page"]
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), "utf-8")
    (out_dir / "losses.json").write_text(json.dumps(losses), "utf-8")
    smooth = diffusion.smoothed_losses(losses)
    click.echo(f"trained {len(losses)} steps; smoothed final loss {smooth[-1]:.6f}")


def make_schedule_from(sc: config_mod.ScheduleConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(sc.timesteps, sc.beta_start, sc.beta_end, sc.kind)


@cli.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False), help="Checkpoint directory written by train.")
@click.option("--story", "story_file", required=True, type=click.Path(exists=True, dir_okay=False), help="Plain-text story file.")
@click.option("--k", required=True, type=int, help="Number of panels to generate.")
@click.option("--seed", type=int, default=0, show_default=True, envvar="MANGA_SEED", help="Sampling seed.")
@click.option("--out", "out_png", required=True, type=click.Path(dir_okay=False), help="Output page PNG.")
def sample_cmd(ckpt, story_file, k, seed, out_png):
    """Generate a manga page from a story: split, sample panels, compose."""
    from .model import load_checkpoint

    model, manifest = load_checkpoint(ckpt)
    k_max = model.config.k_max
    if not 1 <= k <= k_max:
        raise ConfigError(f"k exceeds K_max ({k} > {k_max})" if k > k_max else f"k must be >= 1, got {k}")
    page = manifest.get("page")
    sched_cfg = manifest.get("schedule")
    if not page or not sched_cfg:
        raise ConfigError(f"checkpoint {ckpt} lacks page/schedule metadata")

    story = Path(story_file).read_text("utf-8")
    with _stage("split-story"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scripts = pad_scripts(split_story(story, k), k_max)
    with _stage("sample"):
        from .model import build_codec, build_embedder

        codec = build_codec(model.config.codec)
        embedder = build_embedder(model.config.embedder, model.config.d_text)
        sched = diffusion.make_schedule(
            sched_cfg["timesteps"], sched_cfg["beta_start"], sched_cfg["beta_end"], sched_cfg["kind"]
        )
        stack = diffusion.sample(
            model, codec, embedder, scripts, sched, seed, (page["width"], page["height"])
        )
    with _stage("compose"):
        save_image(out_png, compose_page(stack))
    click.echo(f"wrote {out_png} ({scripts.k} panels, seed {seed})")


@cli.command("compose")
@click.option("--out", "out_png", required=True, type=click.Path(dir_okay=False), help="Output page PNG.")
@click.argument("panels", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def compose_cmd(out_png, panels):
    """Pixel-min merge panel PNGs (given as arguments) into one page."""
    images = [load_image(p) for p in panels]
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataError(f"panel dimensions disagree: {sorted(shapes)}")
    stack = PanelImageStack(images=np.stack(images))
    save_image(out_png, compose_page(stack))
    click.echo(f"wrote {out_png} from {len(images)} panels")


@cli.command("evaluate")
@click.option("--gen", "gen_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of generated page PNGs.")
@click.option("--ref", "ref_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of reference page PNGs (paired by sorted name).")
@click.option("--extractor", default="stub", show_default=True, help="Feature extractor id.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False), help="Output JSON report path.")
def evaluate_cmd(gen_dir, ref_dir, extractor, report_path):
    """Compute Fréchet distance and image-image similarity between two sets."""
    ext = metrics.build_extractor(extractor)
    gen = metrics.features_from_dir(ext, gen_dir)
    ref = metrics.features_from_dir(ext, ref_dir)
    report = {
        "fid": metrics.frechet_distance(gen, ref),
        "clip_i": metrics.clip_i(gen, ref),
        "n": len(gen),
        "extractor_id": ext.extractor_id,
    }
    Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True), "utf-8")
    click.echo(json.dumps(report, sort_keys=True))
    # Similarity is conventionally quoted on a x100 scale.
    click.echo(
        f"fid {report['fid']:.2f}, clip-i {100 * report['clip_i']:.1f} (x100 scale)",
        err=True,
    )


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit-code mapping."""
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        cli.main(args=argv, prog_name="mangagen", standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        return 4
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    except DataError as e:
        click.echo(f"data error: {e}", err=True)
        return 3
    except (MangagenError, ValueError, RuntimeError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
