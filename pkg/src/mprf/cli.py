"""Command-line client for the loop-closure service.

Every subcommand builds a request and sends it to the service layer over
HTTP.  By default the service runs in-process (an ASGI transport, no
daemon needed); ``--server URL`` targets a running instance instead.

Exit codes: 0 success, 2 config/manifest error, 3 empty result under
``--strict``.
"""

from __future__ import annotations

import asyncio
import sys
from pathlib import Path

import click
import httpx

EXIT_INPUT_ERROR = 2
EXIT_EMPTY_STRICT = 3

REQUEST_TIMEOUT_S = 3600.0


def _call_service(server: str | None, path: str, payload: dict) -> dict:
    """POST to a remote server or the in-process app; exit on failure."""
    try:
        if server is not None:
            with httpx.Client(base_url=server, timeout=REQUEST_TIMEOUT_S) as client:
                response = client.post(path, json=payload)
        else:
            from mprf.service.app import app

            async def _in_process() -> httpx.Response:
                transport = httpx.ASGITransport(app=app)
                async with httpx.AsyncClient(
                    transport=transport, base_url="http://mprf.local", timeout=None
                ) as client:
                    return await client.post(path, json=payload)

            response = asyncio.run(_in_process())
    except httpx.HTTPError as exc:
        click.echo(f"error: cannot reach service: {exc}", err=True)
        sys.exit(1)

    if response.status_code >= 500:
        click.echo(f"error: service failure: {response.text}", err=True)
        sys.exit(1)
    if response.status_code >= 400:
        detail = response.json().get("detail", response.text)
        click.echo(f"error: {detail}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    return response.json()


def _print_report(report: dict) -> None:
    precision = report.get("precision_at") or {}
    if precision:
        parts = ", ".join(f"P@{k}={100 * v:.2f}%" for k, v in sorted(precision.items(), key=lambda kv: int(kv[0])))
        click.echo(f"retrieval: {parts} (mean query {report['mean_query_time_ms']:.1f} ms)")
    click.echo(
        f"pose: mean yaw {report['mean_yaw_err_deg']:.2f} deg, "
        f"dx {report['mean_dx_m']:.2f} m, dy {report['mean_dy_m']:.2f} m "
        f"({report['poses_estimated']}/{report['total_pairs']} pairs estimated)"
    )
    for label, key in (("yaw <", "yaw_table"), ("dx <", "dx_table"), ("dy <", "dy_table")):
        cells = "  ".join(f"{label}{e['threshold']:g}: {e['percent']:.2f}%" for e in report[key])
        click.echo(cells)


@click.group()
@click.option("--server", default=None, envvar="MPRF_SERVER", metavar="URL",
              help="Remote service URL; default runs the service in-process.")
@click.version_option(package_name="mprf")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Loop-closure detection over precomputed embeddings."""
    ctx.obj = {"server": server}


@main.command()
@click.argument("manifest", type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path(), help="Index file to write.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.pass_context
def index(ctx, manifest, output, config_path):
    """Build the descriptor index (plus refinement store and cluster bank)."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "output_path": str(Path(output).resolve()),
        "config_path": str(Path(config_path).resolve()) if config_path else None,
    }
    data = _call_service(ctx.obj["server"], "/index", payload)
    click.echo(
        f"indexed {data['frames_indexed']} frames -> {data['index_path']} "
        f"(+ refinement store, cluster bank)"
    )
    if data["skipped_frames"]:
        click.echo(f"skipped frames: {data['skipped_frames']}", err=True)


@main.command()
@click.argument("manifest", type=click.Path())
@click.option("--index", "index_path", required=True, type=click.Path(), help="Index file to search.")
@click.option("--k", default=10, show_default=True, type=int, help="Hits per query.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--query-id", "query_ids", type=int, multiple=True,
              help="Restrict to specific query frame ids (repeatable).")
@click.option("--strict", is_flag=True, help="Exit 3 when no query returns any hit.")
@click.pass_context
def retrieve(ctx, manifest, index_path, k, config_path, query_ids, strict):
    """Query the index with every manifest frame (two-stage when possible)."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "index_path": str(Path(index_path).resolve()),
        "k": k,
        "config_path": str(Path(config_path).resolve()) if config_path else None,
        "query_ids": list(query_ids) or None,
    }
    data = _call_service(ctx.obj["server"], "/retrieve", payload)
    total = 0
    for entry in data["shortlists"]:
        hits = " ".join(f"{h['frame_id']}({h['score']:.4f})" for h in entry["hits"])
        total += len(entry["hits"])
        click.echo(f"{entry['query_id']}: {hits}")
    if strict and total == 0:
        click.echo("no results", err=True)
        sys.exit(EXIT_EMPTY_STRICT)


@main.command()
@click.argument("manifest", type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("-o", "--output", "report_dir", required=True, type=click.Path(),
              help="Directory for closures.csv and reports.")
@click.option("--strict", is_flag=True, help="Exit 3 when no loop closure is accepted.")
@click.pass_context
def closeloop(ctx, manifest, config_path, report_dir, strict):
    """Run the full pipeline and emit accepted loop closures."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "output_dir": str(Path(report_dir).resolve()),
        "config_path": str(Path(config_path).resolve()) if config_path else None,
    }
    data = _call_service(ctx.obj["server"], "/closeloop", payload)
    click.echo(
        f"{data['frames_indexed']} frames, {data['attempted_pairs']} candidate pairs, "
        f"{len(data['closures'])} loop closures -> {data['output_dir']}"
    )
    if data["skipped_frames"]:
        click.echo(f"skipped frames: {data['skipped_frames']}", err=True)
    if data["report"] is not None:
        _print_report(data["report"])
    if strict and not data["closures"]:
        click.echo("no loop closures", err=True)
        sys.exit(EXIT_EMPTY_STRICT)


@main.command("mine-triplets")
@click.argument("manifest", type=click.Path())
@click.option("--count", required=True, type=int, help="Number of triplets to sample.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--strict", is_flag=True, help="Exit 3 when no valid triplet exists.")
@click.pass_context
def mine_triplets_command(ctx, manifest, count, seed, config_path, strict):
    """Sample (anchor, positive, negative) triplets from manifest poses."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "count": count,
        "seed": seed,
        "config_path": str(Path(config_path).resolve()) if config_path else None,
    }
    data = _call_service(ctx.obj["server"], "/mine-triplets", payload)
    for triplet in data["triplets"]:
        click.echo(f"{triplet['anchor']} {triplet['positive']} {triplet['negative']}")
    if not data["triplets"]:
        if data.get("message"):
            click.echo(data["message"], err=True)
        if strict:
            sys.exit(EXIT_EMPTY_STRICT)


@main.command("eval")
@click.argument("report_dir", type=click.Path())
@click.option("--gt", "gt_trajectory", required=True, type=click.Path(),
              help="Ground-truth trajectory file (timestamp tx ty tz qx qy qz qw).")
@click.pass_context
def eval_command(ctx, report_dir, gt_trajectory):
    """Score stored closures against a ground-truth trajectory."""
    payload = {
        "report_dir": str(Path(report_dir).resolve()),
        "gt_trajectory": str(Path(gt_trajectory).resolve()),
    }
    data = _call_service(ctx.obj["server"], "/eval", payload)
    click.echo(f"evaluated {data['closures_evaluated']} closures")
    _print_report(data["report"])
    click.echo(f"wrote {data['report_md_path']} and {data['report_csv_path']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("mprf.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
