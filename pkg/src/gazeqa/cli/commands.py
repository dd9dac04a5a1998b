from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
from tabulate import tabulate

from gazeqa import CHECKPOINT_FORMAT, HEATMAP_FORMAT, __version__
from gazeqa import annotation, backends, chunks, evaluation, formats, gaze, perceiver
from gazeqa.checkpoint import load_checkpoint, save_checkpoint
from gazeqa.cli.output import (
    Colors,
    Result,
    Spinner,
    hide_cursor,
    show_cursor,
)
from .config import (
    DEFAULT_OUTPUT_FORMAT,
    VALID_OUTPUT_FORMATS,
    RunConfig,
    get_secret,
    parse_rates,
    resolve_config,
)


colors = Colors()
c = colors.c
spinner = Spinner(c)


##################################################
#  Shared helpers
##################################################


def set_spinner_use(with_spinner: bool):
    spinner.use = with_spinner and sys.stdin.isatty()


def set_color_use(with_color: bool):
    colors.use = with_color and sys.stdin.isatty()


def set_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def validate_output_format(_, __, value):
    if value.lower() in VALID_OUTPUT_FORMATS:
        return value.lower()
    raise click.BadParameter(f"format should be one of: {', '.join(VALID_OUTPUT_FORMATS)}")


def validate_rates(_, __, value):
    if value is None:
        return None
    try:
        return parse_rates(value)
    except ValueError as exc:
        raise click.BadParameter(f"{exc}; use e.g. '1-40' or '1,5,10-12'")


def validate_positive(_, param, value):
    if value is not None and value < 1:
        raise click.BadParameter(f"{param.name.replace('_', '-')} must be at least 1")
    return value


def validate_modes(_, __, value):
    modes = [m.strip() for m in value.split(",") if m.strip()]
    unknown = sorted(set(modes) - set(evaluation.MODES))
    if not modes or unknown:
        raise click.BadParameter(f"modes should be a comma list of: {', '.join(evaluation.MODES)}")
    return modes


def run_config(ctx: click.Context, **flags) -> RunConfig:
    obj = ctx.obj or {}
    return resolve_config(obj.get("config_file"), jobs=obj.get("jobs"), **flags)


def write_sidecar(path: str | Path, config: RunConfig, **extra):
    Path(f"{path}.json").write_text(
        json.dumps({"config": config.to_json(), **extra}, sort_keys=True, indent=2) + "\n"
    )


def show_table(rows: list[list], headers: list[str], format: str) -> None:
    if format == "json":
        print(json.dumps([dict(zip(headers, row)) for row in rows], sort_keys=True))
    else:
        print(tabulate(rows, headers=headers, tablefmt=format, floatfmt=".6f"))


format_option = click.option(
    "-f", "--format",
    default=DEFAULT_OUTPUT_FORMAT,
    show_default=True,
    help="Table format: TABULATE formats or JSON",
    callback=validate_output_format,
)


##################################################
#  CLI group
##################################################


@click.group()
@click.option(
    "-c", "--config", "config_file",
    help="JSON run configuration file",
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("-j", "--jobs", type=int, help="Worker threads for parallel steps", callback=validate_positive)
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages to stderr")
@click.option("--spin/--no-spin", help="Control the spinner", default=True, show_default=True)
@click.option("--color/--no-color", help="Control colors", default=True, show_default=True)
@click.help_option("-h", "--help", help="Show this message and exit")
@click.version_option(
    __version__,
    help="Show the version and exit",
    message=f"%(prog)s %(version)s (formats: {HEATMAP_FORMAT}, {CHECKPOINT_FORMAT})",
)
@click.pass_context
def cli(ctx, config_file, jobs, verbose, spin, color):
    """
    Gaze heatmaps, the gaze-conditioned resampler, grounded QA annotation and
    dual-order pairwise evaluation.

    Settings are resolved from built-in defaults, then the JSON file given
    with --config, then command options. API keys are never part of the run
    configuration; they are read from the environment or from the first
    dotenv file found at:

    \b
    - $XDG_CONFIG_HOME or $HOME/gazeqa/env
    - $XDG_CONFIG_HOME or $HOME/.gazeqa
    - $HOME/.config/gazeqa/env
    - $HOME/.config/.gazeqa

    Recognised keys: VOILA_GEN_API_KEY, VOILA_JUDGE_API_KEY and
    VOILA_SCORER_API_KEY.
    """
    set_spinner_use(spin)
    set_color_use(color)
    set_logging(verbose)

    ctx.ensure_object(dict)
    ctx.obj.update({k: v for k, v in dict(config_file=config_file, jobs=jobs).items() if v is not None})


##################################################
#  Gaze signal commands
##################################################


@spinner.run("Loading tracks")
def load_tracks(config: RunConfig, tracks_file: str | None, synthetic: str | None) -> Result:
    if tracks_file:
        tracks = formats.read_tracks(tracks_file)
        origin = tracks_file
    else:
        gaze_tracks, trace_tracks = gaze.synth_population(config.seed, config.n_tracks)
        tracks = gaze_tracks if synthetic == "gaze" else trace_tracks
        origin = f"synthetic {synthetic or 'trace'} scene {config.seed}"
    if not tracks:
        raise Exception(f"no tracks found in {origin}")
    return Result(result=tracks, stdout=f"{len(tracks)} tracks from {origin}")


@spinner.run("Building heatmap")
def build_heatmap(tracks: list[gaze.PointTrack], config: RunConfig) -> Result:
    rate, grid, sigma = config("rate", "grid", "sigma")
    downsampled = [gaze.downsample_track(t, rate) for t in tracks]
    maps = [gaze.points_to_heatmap(t, grid, grid, sigma) for t in downsampled]
    heatmap = gaze.mean_heatmap(maps)
    peak = divmod(int(heatmap.values.argmax()), grid)
    return Result(result=heatmap, stdout=f"{grid}×{grid}, peak at pixel {peak}")


@cli.command()
@click.pass_context
@click.option(
    "-t", "--tracks", "tracks_file",
    type=click.Path(exists=True, dir_okay=False),
    help="JSONL file with one track per line",
)
@click.option("--synthetic", type=click.Choice(["gaze", "trace"]), help="Use the synthetic scene instead")
@click.option("--seed", type=int, help="Synthetic scene seed")
@click.option("-n", "--n-tracks", type=int, help="Synthetic population size", callback=validate_positive)
@click.option("--grid", type=int, help="Heatmap side in pixels")
@click.option("--sigma", type=float, help="Gaussian sigma in pixels")
@click.option("-r", "--rate", type=int, default=1, show_default=True, help="Keep every RATE-th point",
              callback=validate_positive)
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False), help="Output VHM1 file")
@click.option("--pgm", type=click.Path(dir_okay=False), help="Also export an 8-bit PGM image")
@click.help_option("-h", "--help")
def heatmap(ctx, tracks_file, synthetic, seed, n_tracks, grid, sigma, rate, out, pgm):
    """
    Build the mean heatmap of a set of tracks.

    Tracks come from a JSONL file, one {"source", "points"} object per line,
    or from the synthetic scene selected by --seed. The heatmap is written in
    the VHM1 format and the effective configuration next to it as OUT.json.
    """
    config = run_config(ctx, seed=seed, n_tracks=n_tracks, grid=grid, sigma=sigma, rate=rate, out=out,
                        tracks=tracks_file, synthetic=synthetic)
    tracks = load_tracks(config, tracks_file, synthetic).result
    result = build_heatmap(tracks, config).result
    formats.save_heatmap(out, result)
    write_sidecar(out, config, format=HEATMAP_FORMAT)
    if pgm:
        formats.save_pgm(pgm, result)


@cli.command()
@click.argument("first", type=click.Path(exists=True, dir_okay=False))
@click.argument("second", type=click.Path(exists=True, dir_okay=False))
@click.help_option("-h", "--help")
def emd(first, second):
    """
    Cumulative EMD between two VHM1 heatmaps.

    FIRST is the reference distribution (the gaze heatmap in a sweep); the
    measure is not symmetric in its arguments.
    """
    value = gaze.cumulative_emd(formats.load_heatmap(first), formats.load_heatmap(second))
    print(f"{value:.12f}")


@spinner.run("Sweeping sampling rates")
def run_sweep(gaze_tracks, trace_tracks, config: RunConfig) -> Result:
    rates, grid, sigma, jobs = config("rates", "grid", "sigma", "jobs")
    result = gaze.sampling_rate_sweep(gaze_tracks, trace_tracks, rates, grid=grid, sigma=sigma, jobs=jobs)
    return Result(result=result, stdout=f"minimum at rate {result.argmin_rate}")


def show_sweep(result: gaze.SweepResult, format: str) -> None:
    if format == "json":
        colors.use = False
    rows = [
        [r, e, c("^green", "^bold", "◀ min") if r == result.argmin_rate else ""]
        for r, e in zip(result.rates, result.emd_values)
    ]
    show_table(rows, ["rate", "emd", ""], format)


@cli.command()
@click.pass_context
@click.option("-g", "--gaze", "gaze_file", type=click.Path(exists=True, dir_okay=False),
              help="JSONL gaze tracks")
@click.option("-t", "--traces", "traces_file", type=click.Path(exists=True, dir_okay=False),
              help="JSONL trace tracks")
@click.option("--seed", type=int, help="Synthetic scene seed")
@click.option("-n", "--n-tracks", type=int, help="Synthetic population size", callback=validate_positive)
@click.option("-r", "--rates", help="Rates, e.g. '1-40' or '1,5,10-12'", callback=validate_rates)
@click.option("--grid", type=int, help="Heatmap side in pixels")
@click.option("--sigma", type=float, help="Gaussian sigma in pixels")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Write the JSON report here")
@format_option
@click.help_option("-h", "--help")
def sweep(ctx, gaze_file, traces_file, seed, n_tracks, rates, grid, sigma, out, format):
    """
    EMD between gaze and downsampled traces per rate.

    Without --gaze and --traces both populations come from the synthetic
    scene selected by --seed. The curve is printed as a table; the report
    with the effective configuration goes to OUT.
    """
    if bool(gaze_file) != bool(traces_file):
        raise click.UsageError("--gaze and --traces go together")
    config = run_config(ctx, seed=seed, n_tracks=n_tracks, rates=rates, grid=grid, sigma=sigma,
                        gaze=gaze_file, traces=traces_file)
    config.update("rates", parse_rates)
    if gaze_file:
        gaze_tracks = load_tracks(config, gaze_file, None).result
        trace_tracks = load_tracks(config, traces_file, None).result
    else:
        gaze_tracks = load_tracks(config, None, "gaze").result
        trace_tracks = load_tracks(config, None, "trace").result
    result = run_sweep(gaze_tracks, trace_tracks, config).result
    if out:
        report = {**result.to_json(), "config": config.to_json()}
        Path(out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    show_sweep(result, format)


##################################################
#  Annotation commands
##################################################


@spinner.run("Loading narratives")
def load_narratives(path: str) -> Result:
    narratives = [annotation.Narrative.from_json(row) for row in formats.read_jsonl(path)]
    return Result(result=narratives, stdout=f"{len(narratives)} narratives")


def make_generator(config: RunConfig, offline: str | None):
    if offline:
        return backends.CannedGenerator.from_file(offline)
    if config.generator_url:
        return backends.HTTPGenerator(config.generator_url, get_secret("VOILA_GEN_API_KEY"))
    raise click.UsageError("configure a generator endpoint (--generator-url) or use --offline")


def make_scorer(config: RunConfig, kind: str):
    return backends.scorer_from_spec(kind, config.scorer_url, get_secret("VOILA_SCORER_API_KEY"))


@spinner.run("Generating annotations")
def generate_all(narratives, generator, config: RunConfig) -> Result:
    prompt = annotation.load_prompt()
    def call(n):
        return annotation.generate_qa(n, generator, prompt, retries=config.retries)

    with ThreadPoolExecutor(max_workers=config.jobs) as executor:
        texts = list(executor.map(call, narratives))
    return Result(result={n.image_id: t for n, t in zip(narratives, texts)}, stdout=f"{len(texts)} generations")


@spinner.run("Filtering QA pairs")
def assemble_dataset(narratives, generated, scorer, config: RunConfig) -> Result:
    records, stats = annotation.build_dataset(
        narratives, generated, config.keywords, scorer, config.tau, jobs=config.jobs
    )
    return Result(
        result=(records, stats),
        stdout=f"kept {stats.kept_count} of {stats.raw_count} ({stats.survival_rate:.1%})",
    )


def show_stats(stats: annotation.PipelineStats, format: str) -> None:
    rows = [["raw", stats.raw_count], ["kept", stats.kept_count]]
    rows += [[f"removed: {reason}", n] for reason, n in stats.removed_by_reason().items()]
    rows.append(["survival rate", f"{stats.survival_rate:.4f}"])
    show_table(rows, ["", "count"], format)


@cli.command()
@click.pass_context
@click.option("-i", "--in", "in_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL narratives with traces")
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False), help="Output dataset JSONL")
@click.option("--tau", required=True, type=float, help="Minimum reward score")
@click.option("--offline", type=click.Path(exists=True, dir_okay=False),
              help="Canned generations keyed by image_id")
@click.option("--generator-url", help="HTTP generation endpoint")
@click.option("--scorer", type=click.Choice(["word-count", "http"]), default="word-count", show_default=True,
              help="Reward scorer")
@click.option("--scorer-url", help="HTTP scorer endpoint")
@click.option("-k", "--keyword", "keywords", multiple=True, help="Extra filter keyword (repeatable)")
@click.option("--retries", type=int, default=3, show_default=True, help="Retries per generation")
@format_option
@click.help_option("-h", "--help")
def annotate(ctx, in_file, out, tau, offline, generator_url, scorer, scorer_url, keywords, retries, format):
    """
    Generate, align and filter grounded QA pairs.

    Each narrative is sent with the frozen annotation prompt to the generator
    (or looked up in the --offline file), the answer is parsed and aligned to
    the trace, and pairs hitting a keyword or scoring below TAU are dropped.
    Statistics and the removal log are written to OUT.stats.json.
    """
    config = run_config(ctx, tau=tau, generator_url=generator_url, scorer_url=scorer_url, retries=retries,
                        offline=offline, narratives=in_file, out=out, scorer=scorer)
    config.update("keywords", sorted(annotation.DEFAULT_KEYWORDS | set(keywords)))
    narratives = load_narratives(in_file).result
    generator = make_generator(config, offline)
    generated = generate_all(narratives, generator, config).result
    records, stats = assemble_dataset(narratives, generated, make_scorer(config, scorer), config).result
    formats.write_jsonl(out, (r.to_json() for r in records))
    Path(f"{out}.stats.json").write_text(
        json.dumps({**stats.to_json(), "config": config.to_json()}, sort_keys=True, indent=2) + "\n"
    )
    show_stats(stats, format)


@cli.command("format-chunks")
@click.option("-i", "--in", "in_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="QA dataset JSONL")
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False), help="Output chunks JSONL")
@click.option("-q", "--question", type=click.Choice(["direct", "indirect"]), default="direct",
              show_default=True, help="Question used as instruction")
@click.option("--in-context", type=int, default=0, show_default=True,
              help="Earlier turns of the same image used as context")
@click.help_option("-h", "--help")
def format_chunks(in_file, out, question, in_context):
    """
    Render QA records as training chunks.

    Every output line holds the chunk text, its whitespace tokens (special
    tokens kept whole) and the loss mask over those tokens.
    """
    records = [annotation.QARecord.from_json(row) for row in formats.read_jsonl(in_file)]
    records.sort(key=lambda r: (r.image_id, r.tag_number))
    rendered = chunks.records_to_chunks(records, question=question, in_context=in_context)
    rows = []
    for text in rendered:
        tokens = chunks.tokenize(text)
        rows.append({"text": text, "tokens": tokens, "mask": chunks.loss_mask(tokens)})
    formats.write_jsonl(out, rows)
    print(f"{len(rows)} chunks written to {out}", file=sys.stderr)


##################################################
#  Resampler commands
##################################################


def buggy_backward(X, g_prime, weights, upstream):
    grads = perceiver.backward(X, g_prime, weights, upstream)
    grads.params["blocks.0.attn.gaze_key"] = grads.params["blocks.0.attn.gaze_key"] * 1.5
    return grads


@spinner.run("Checking gradients")
def check_gradients(seed: int, samples: int, inject_bug: bool) -> Result:
    backward_fn = buggy_backward if inject_bug else perceiver.backward
    reports = [
        perceiver.gradient_check(
            perceiver.ResamplerConfig.desk(attn_scale=scale, residual=residual),
            seed=seed,
            samples_per_tensor=samples,
            backward_fn=backward_fn,
        )
        for scale in perceiver.ATTN_SCALES
        for residual in perceiver.RESIDUALS
    ]
    worst = max(r.max_rel_error for r in reports)
    return Result(result=reports, stdout=f"max relative error {worst:.2e}")


@spinner.run("Checking gaze neutrality")
def check_neutrality(seed: int, trials: int) -> Result:
    failures = perceiver.neutrality_check(perceiver.ResamplerConfig.desk(), seed=seed, trials=trials)
    return Result(result=failures, stdout=f"{trials - failures}/{trials} trials bit-equal")


@spinner.run("Checking staged unfreezing")
def check_frozen_parameters(seed: int, steps: int = 10) -> Result:
    config = perceiver.ResamplerConfig.desk()
    weights = perceiver.init_weights(config, seed)
    mask = perceiver.trainable_mask("gaze_only", config)
    batch = perceiver.synthetic_batch(config, seed)
    updated = weights
    for _ in range(steps):
        updated, _ = perceiver.train_step(updated, mask, batch, lr=0.1)
    changed = [n for n in weights.names() if not mask[n] and not (updated[n] == weights[n]).all()]
    return Result(result=changed, stdout=f"{len(changed)} frozen tensors changed")


@cli.command("perceiver-check")
@click.pass_context
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for check weights and inputs")
@click.option("--samples", type=int, default=64, show_default=True, help="Coordinates sampled per tensor",
              callback=validate_positive)
@click.option("--trials", type=int, default=20, show_default=True, help="Gaze-neutrality trials",
              callback=validate_positive)
@click.option("--inject-bug", is_flag=True, hidden=True)
@format_option
@click.help_option("-h", "--help")
def perceiver_check(ctx, seed, samples, trials, inject_bug, format):
    """
    Self-test the resampler's gradients and gaze path.

    Runs the finite-difference gradient check in every attention-scale and
    residual mode, the zero-gaze-weight neutrality check and the staged
    unfreezing check on the small configuration. Exits with 1 on failure.
    """
    reports = check_gradients(seed, samples, inject_bug).result
    failures = check_neutrality(seed, trials).result
    changed = check_frozen_parameters(seed).result

    if format == "json":
        colors.use = False
    ok = lambda passed: c("^green", "ok") if passed else c("^red", "FAIL")
    rows = [
        [f"gradients ({r.attn_scale}, {r.residual})", f"{r.coordinates} coords, max rel err {r.max_rel_error:.2e}",
         ok(r.passed)]
        for r in reports
    ]
    rows.append(["gaze neutrality", f"{trials - failures}/{trials} bit-equal", ok(failures == 0)])
    rows.append(["staged unfreezing", f"{len(changed)} frozen tensors changed", ok(not changed)])
    show_table(rows, ["check", "detail", "result"], format)

    if not all(r.passed for r in reports) or failures or changed:
        ctx.exit(1)


@spinner.run("Training")
def train(weights, mask, batch, config: RunConfig) -> Result:
    steps, lr, clip_norm, schedule, optimizer, jobs = config(
        "steps", "lr", "clip_norm", "schedule", "optimizer", "jobs"
    )
    every = max(1, steps // 10)
    curve = []
    state = None
    for step in range(steps):
        step_lr = perceiver.cosine_lr(step, steps, lr) if schedule == "cosine" else lr
        if optimizer == "adamw":
            weights, state, loss = perceiver.adamw_step(
                weights, mask, batch, step_lr, state, clip_norm=clip_norm, jobs=jobs
            )
        else:
            weights, loss = perceiver.train_step(weights, mask, batch, step_lr, clip_norm=clip_norm, jobs=jobs)
        if step % every == 0:
            curve.append([step, step_lr, loss])
    final = perceiver.train_step(weights, perceiver.trainable_mask("frozen", weights.config), batch, 0.0)[1]
    curve.append([steps, 0.0, final])
    initial = curve[0][2]
    return Result(
        result=(weights, curve),
        stdout=f"loss {initial:.5f} -> {final:.5f} ({final / initial:.1%} of initial)",
    )


@cli.command("train-demo")
@click.pass_context
@click.option("--stage", type=click.Choice(list(perceiver.STAGES)), default="perceiver_and_gaze",
              show_default=True, help="Parameters to train")
@click.option("--steps", type=int, default=200, show_default=True, help="Number of optimizer steps",
              callback=validate_positive)
@click.option("--lr", type=float, default=0.2, show_default=True, help="Learning rate")
@click.option("--schedule", type=click.Choice(["constant", "cosine"]), default="constant", show_default=True,
              help="Learning-rate schedule")
@click.option("--optimizer", type=click.Choice(list(perceiver.OPTIMIZERS)), default="sgd", show_default=True,
              help="Update rule")
@click.option("--clip-norm", type=float, help="Clip the gradient norm to this value")
@click.option("--batch-size", type=int, default=4, show_default=True, help="Synthetic batch size",
              callback=validate_positive)
@click.option("--seed", type=int, help="Seed for weights and data")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Start from a VPW1 checkpoint")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Save the trained VPW1 checkpoint")
@format_option
@click.help_option("-h", "--help")
def train_demo(ctx, stage, steps, lr, schedule, optimizer, clip_norm, batch_size, seed, resume, out, format):
    """
    Fit the small resampler to a synthetic target.

    Trains only the parameters enabled by --stage, so the two-stage schedule
    is a gaze_only run saved with --out followed by a perceiver_and_gaze run
    started with --resume.
    """
    config = run_config(ctx, stage=stage, steps=steps, lr=lr, schedule=schedule, optimizer=optimizer,
                        clip_norm=clip_norm,
                        batch_size=batch_size, seed=seed, resume=resume, out=out)
    if resume:
        weights = load_checkpoint(resume)
    else:
        weights = perceiver.init_weights(perceiver.ResamplerConfig.desk(), config.seed)
    mask = perceiver.trainable_mask(stage, weights.config)
    batch = perceiver.synthetic_batch(weights.config, config.seed, size=batch_size)
    weights, curve = train(weights, mask, batch, config).result
    if out:
        save_checkpoint(out, weights)
        write_sidecar(out, config, format=CHECKPOINT_FORMAT, resampler=weights.config.to_json())
    show_table(curve, ["step", "lr", "loss"], format)


##################################################
#  Evaluation command
##################################################


def read_responses(path: str) -> dict[str, str]:
    return {str(row["key"]): row["response"] for row in formats.read_jsonl(path)}


@spinner.run("Judging")
def judge_all(dataset, responses_a, responses_b, judge, scorer, config: RunConfig) -> Result:
    report = evaluation.run_benchmark(
        dataset, responses_a, responses_b, judge, config.modes,
        scorer=scorer, retries=config.retries, jobs=config.jobs,
    )
    report.config = config.to_json()
    return Result(result=report, stdout=f"{len(report.audit)} judgements, {sum(report.errors.values())} failed")


def show_report(report: evaluation.BenchmarkReport, format: str) -> None:
    if format == "json":
        print(report.dumps())
        return
    rows = [
        [mode, agg.wins_a, agg.ties, agg.wins_b, agg.win_rate_a, agg.win_rate_b,
         agg.mean_reward_a, agg.mean_reward_b]
        for mode, agg in report.aggregates.items()
    ]
    show_table(rows, ["mode", "A wins", "ties", "B wins", "A rate", "B rate", "A reward", "B reward"], format)


@cli.command()
@click.pass_context
@click.option("-d", "--dataset", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL {key, question, fact, gt_answer}")
@click.option("-a", "--a", "a_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL {key, response} of model A")
@click.option("-b", "--b", "b_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL {key, response} of model B")
@click.option("-m", "--modes", default="overall,helpful,grounding", show_default=True,
              help="Judging modes", callback=validate_modes)
@click.option("--judge", required=True, help="mock:FILE, rule:NAME or http")
@click.option("--judge-url", help="HTTP judge endpoint")
@click.option("--scorer", type=click.Choice(["word-count", "http"]), help="Also report mean rewards")
@click.option("--scorer-url", help="HTTP scorer endpoint")
@click.option("--retries", type=int, default=2, show_default=True, help="Re-asks on unparseable verdicts")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Write the JSON report here")
@click.option("--audit", type=click.Path(dir_okay=False), help="Write the per-item audit JSONL here")
@format_option
@click.help_option("-h", "--help")
def evaluate(ctx, dataset, a_file, b_file, modes, judge, judge_url, scorer, scorer_url, retries, out, audit,
             format):
    """
    Compare two models with dual-order judging.

    Every item is judged with A listed first and with B listed first, and the
    two verdicts are averaged so position bias cancels. Rule judges:
    first-position, longer-answer, tie-always.
    """
    config = run_config(ctx, modes=modes, judge=judge, judge_url=judge_url, scorer=scorer,
                        scorer_url=scorer_url, retries=retries, dataset=dataset, a=a_file, b=b_file)
    judge_backend = backends.judge_from_spec(judge, config.judge_url, get_secret("VOILA_JUDGE_API_KEY"))
    scorer_backend = make_scorer(config, scorer) if scorer else None
    report = judge_all(
        list(formats.read_jsonl(dataset)), read_responses(a_file), read_responses(b_file),
        judge_backend, scorer_backend, config,
    ).result
    if out:
        Path(out).write_text(report.dumps() + "\n")
    if audit:
        formats.write_jsonl(audit, report.audit)
    show_report(report, format)


def main():
    try:
        if sys.stdin.isatty():
            hide_cursor()
        cli()
    except Exception as e:
        print(e, file=sys.stderr)
        sys.exit(1)
    finally:
        if sys.stdin.isatty():
            show_cursor()
