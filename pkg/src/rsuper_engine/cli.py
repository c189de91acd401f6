"""``rsuper`` command-line interface.

Machine-readable output (JSON, CSV) goes to stdout and diagnostics go to
stderr. Exit codes: 0 ok, 1 usage, 2 malformed input, 3 dims mismatch,
4 gradient check failed, 5 divergence.
"""

from __future__ import annotations

import json
import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any

import click
import typer
from pydantic import ValidationError

from rsuper_engine.config import DEFAULT_SEED, EngineConfig, FitSettings
from rsuper_engine.errors import GridIOError, MalformedDocument, RsuperError
from rsuper_engine.fitter import ablation_run, ablation_to_csv, fit_phantom
from rsuper_engine.gradcheck import check_gradients
from rsuper_engine.lexicon import load_lexicon
from rsuper_engine.losses import report_loss
from rsuper_engine.models import (
    ReportDocument,
    Variant,
    cue_set_from_json,
    cue_set_to_json,
    model_to_json,
)
from rsuper_engine.phantom import PhantomSpec, default_suite, load_manifest, write_suite
from rsuper_engine.report_parser import parse_report
from rsuper_engine.voxels import read_masks, read_probmaps

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="rsuper",
    help="Report-supervision constraint engine.",
    add_completion=False,
    no_args_is_help=True,
)

_LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


@dataclass
class CliState:
    config: Path | None = None
    seed: int = DEFAULT_SEED
    human: bool = False

    def engine_config(self, **overrides: Any) -> EngineConfig:
        return EngineConfig.from_file(self.config, **overrides)


@app.callback()
def _global_options(
    ctx: typer.Context,
    config: Annotated[
        Path | None, typer.Option("--config", help="JSON file with EngineConfig fields.")
    ] = None,
    seed: Annotated[int, typer.Option("--seed", help="Seed for every random choice.")] = DEFAULT_SEED,
    human: Annotated[
        bool, typer.Option("--human", help="Also print a readable summary on stderr.")
    ] = False,
    quiet: Annotated[bool, typer.Option("--quiet", "-q", help="Only log warnings.")] = False,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log debug output.")] = False,
) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=_LOG_FORMAT, stream=sys.stderr, force=True)
    ctx.obj = CliState(config=config, seed=seed, human=human)


@contextmanager
def _exit_on_error() -> Iterator[None]:
    try:
        yield
    except RsuperError as e:
        typer.echo(f"error: {e.detail}", err=True)
        raise typer.Exit(e.exit_code) from e


def _human(state: CliState, lines: list[str]) -> None:
    if state.human:
        for line in lines:
            typer.echo(line, err=True)


def _read_text(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise GridIOError(f"cannot read {what} {path}: {e.strerror}") from e


def _write_or_echo(text: str, out: Path | None) -> None:
    if out is None:
        typer.echo(text, nl=False)
        return
    try:
        out.write_text(text, encoding="utf-8")
    except OSError as e:
        raise GridIOError(f"cannot write {out}: {e.strerror}") from e


def _suite(state: CliState, manifest: Path | None, n: int) -> list[PhantomSpec]:
    if manifest is not None:
        return load_manifest(manifest)
    return default_suite(n, seed=state.seed)


def _with_fit(cfg: EngineConfig, **updates: Any) -> EngineConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    try:
        fit_settings = FitSettings.model_validate({**cfg.fit.model_dump(), **updates})
    except ValidationError as e:
        err = e.errors()[0]
        raise MalformedDocument(f"invalid fit.{err['loc'][0]}: {err['msg']}") from e
    return cfg.model_copy(update={"fit": fit_settings})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@app.command()
def parse(
    ctx: typer.Context,
    report: Annotated[Path, typer.Argument(help="Report text file.")],
    lexicon: Annotated[Path | None, typer.Option(help="Alternative lexicon JSON.")] = None,
    out: Annotated[Path | None, typer.Option("--out", "-o", help="Write here, not stdout.")] = None,
) -> None:
    """Parse a report into cue JSON."""
    state: CliState = ctx.obj
    with _exit_on_error():
        doc = ReportDocument.from_text(_read_text(report, "report"))
        lex = load_lexicon(lexicon) if lexicon is not None else None
        cues = parse_report(doc, lex)
        _write_or_echo(cue_set_to_json(cues), out)
        _human(
            state,
            [
                f"{c.source_modality}: {c.substructure} {c.polarity} ({c.certainty:g})"
                for c in cues.qual_cues
            ]
            + [
                f"count >= {cues.quant.min_count}, largest {cues.quant.d_max} mm",
                f"cohort: {cues.cohort.cohort}",
            ],
        )


@app.command("eval")
def eval_(
    ctx: typer.Context,
    et: Annotated[Path, typer.Option(help="ET probability grid.")],
    ed: Annotated[Path, typer.Option(help="ED probability grid.")],
    tc: Annotated[Path, typer.Option(help="TC probability grid.")],
    dural: Annotated[Path, typer.Option(help="Dural mask grid.")],
    parench: Annotated[Path, typer.Option(help="Parenchyma mask grid.")],
    cues: Annotated[Path, typer.Option(help="Cue JSON written by `parse`.")],
    variant: Annotated[Variant | None, typer.Option(case_sensitive=False)] = None,
) -> None:
    """Print the itemized report loss of probability maps against a cue file."""
    state: CliState = ctx.obj
    with _exit_on_error():
        cfg = state.engine_config(variant=variant)
        cue_set = cue_set_from_json(_read_text(cues, "cue file"))
        maps = read_probmaps(et, ed, tc)
        maps.validate()
        masks = read_masks(dural, parench)
        breakdown = report_loss(cue_set, maps, masks, cfg.weights, cfg)
        typer.echo(model_to_json(breakdown), nl=False)
        _human(
            state,
            [
                *(f"exist {k}: {v:.6g}" for k, v in breakdown.exist_per_class.items()),
                f"size: {breakdown.size:.6g}",
                f"count: {breakdown.count:.6g}",
                f"prior: {breakdown.prior:.6g}",
                f"total: {breakdown.report_total:.6g}",
            ],
        )


@app.command()
def gradcheck(
    ctx: typer.Context,
    n_coords: Annotated[int, typer.Option("--n-coords", help="Coordinates to sample.")] = 1000,
    n_configs: Annotated[int, typer.Option("--n-configs", min=1)] = 20,
    corrupt_gradient: Annotated[bool, typer.Option("--corrupt-gradient", hidden=True)] = False,
) -> None:
    """Compare the analytic soft-loss gradient with central differences."""
    state: CliState = ctx.obj
    if n_coords < 1:
        typer.echo("error: --n-coords must be at least 1", err=True)
        raise typer.Exit(1)
    with _exit_on_error():
        cfg = state.engine_config()
        result = check_gradients(
            cfg,
            seed=state.seed,
            n_coords=n_coords,
            n_configs=n_configs,
            corrupt=corrupt_gradient,
        )
        typer.echo(json.dumps(result.to_dict(), indent=2))
        _human(
            state,
            [
                f"checked {result.n_checked} of {result.n_requested} coordinates "
                f"({result.n_skipped} skipped)",
                f"max relative error {result.max_rel_error:.3g}",
            ],
        )
        result.raise_for_failure()


@app.command()
def fit(
    ctx: typer.Context,
    phantom_id: Annotated[str, typer.Argument(help="Phantom id, e.g. ph000.")],
    manifest: Annotated[Path | None, typer.Option(help="Phantom manifest JSON.")] = None,
    cues: Annotated[
        Path | None, typer.Option(help="Fit these cues instead of the phantom's report.")
    ] = None,
    steps: Annotated[int | None, typer.Option(min=1)] = None,
    lr: Annotated[float | None, typer.Option(help="Step size (> 0).")] = None,
    n: Annotated[int, typer.Option("--n", min=1, help="Size of the default suite.")] = 50,
    out: Annotated[Path | None, typer.Option("--out", "-o")] = None,
) -> None:
    """Fit a uniform logit field to one phantom and print its FitReport."""
    state: CliState = ctx.obj
    with _exit_on_error():
        cfg = _with_fit(state.engine_config(), steps=steps, lr=lr)
        specs = {s.id: s for s in _suite(state, manifest, n)}
        if phantom_id not in specs:
            raise MalformedDocument(f"no phantom with id {phantom_id!r}")
        cue_set = cue_set_from_json(_read_text(cues, "cue file")) if cues is not None else None
        report = fit_phantom(specs[phantom_id], cfg, cues=cue_set)
        _write_or_echo(model_to_json(report), out)
        status = report.constraint_status
        _human(
            state,
            [
                f"{report.iterations} steps, loss {report.loss_trace[0]:.6g} -> "
                f"{report.loss_trace[-1]:.6g}",
                f"all constraints satisfied: {status.all_satisfied}",
            ],
        )


@app.command()
def phantom(
    ctx: typer.Context,
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")],
    manifest: Annotated[Path | None, typer.Option(help="Phantom manifest JSON.")] = None,
    n: Annotated[int, typer.Option("--n", min=1, help="Size of the default suite.")] = 50,
) -> None:
    """Write a phantom suite with grids, reports, cues and a manifest."""
    state: CliState = ctx.obj
    with _exit_on_error():
        specs = _suite(state, manifest, n)
        index = write_suite(specs, out)
        typer.echo(json.dumps({"manifest": index.name, "phantoms": [s.id for s in specs]}))
        _human(state, [f"wrote {len(specs)} phantoms under {out}"])


@app.command()
def ablate(
    ctx: typer.Context,
    manifest: Annotated[Path | None, typer.Option(help="Phantom manifest JSON.")] = None,
    n: Annotated[int, typer.Option("--n", min=1, help="Size of the default suite.")] = 50,
    steps: Annotated[int | None, typer.Option(min=1)] = None,
    workers: Annotated[int | None, typer.Option(min=1)] = None,
) -> None:
    """Print constraint-satisfaction rates per cumulative loss-term subset as CSV."""
    state: CliState = ctx.obj
    with _exit_on_error():
        cfg = _with_fit(state.engine_config(), steps=steps, workers=workers)
        rows = ablation_run(_suite(state, manifest, n), cfg)
        typer.echo(ablation_to_csv(rows), nl=False)
        _human(state, [f"{r.subset}: {r.satisfied_fraction:.0%}" for r in rows])


def main() -> None:
    """Console entry point; usage errors exit 1 so that 2 stays reserved for bad input."""
    try:
        code = app(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    sys.exit(code or 0)
