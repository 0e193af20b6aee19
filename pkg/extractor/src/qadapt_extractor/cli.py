"""Extractor command line: extract frames into archives, serve /encode."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .errors import ExtractorError
from .extract import ExtractionJob, extract
from .server import serve_text_encoder


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Segment-archive extraction and the text-encoder service."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command(name="extract")
@click.option("--input", "input_dir", type=click.Path(), required=True, help="Frame directory.")
@click.option("--out", "output_dir", type=click.Path(), required=True, help="Archive directory.")
@click.option("--scene-id", default=None, help="Scene id (default: input directory name).")
@click.option("--segmenter", default="color-regions", show_default=True)
@click.option("--embedder", default="pooled-projection", show_default=True)
@click.option("--captioner", default="template", show_default=True)
@click.option("--min-area", type=int, default=64, show_default=True, help="Minimum region pixels.")
@click.option("--dim", type=int, default=32, show_default=True, help="Embedding dimension.")
def extract_cmd(input_dir, output_dir, scene_id, segmenter, embedder, captioner, min_area, dim):
    """Segment frames, embed crops, caption, and write an archive."""
    seg_opts = {"min_area": min_area} if segmenter == "color-regions" else {}
    job = ExtractionJob(
        input_dir=Path(input_dir),
        output_dir=Path(output_dir),
        scene_id=scene_id,
        segmenter=segmenter,
        embedder=embedder,
        captioner=captioner,
        segmenter_options=seg_opts,
        embedder_options={"dim": dim},
    )
    try:
        out = extract(job)
    except ExtractorError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    click.echo(f"archive written to {out}")


@main.command()
@click.option("--port", type=int, required=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=29, show_default=True)
def serve(port, dim, seed):
    """Serve the POST /encode text-encoder endpoint."""
    serve_text_encoder(port, dim=dim, seed=seed)


if __name__ == "__main__":
    main()
