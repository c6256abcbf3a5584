"""Command-line front end tying simulation, fitting, comparison, and diagnostics together.

Dataset CSV dialect
-------------------
The first row lists item IDs; every following row is one person; cells are
``0`` (incorrect), ``1`` (correct), or ``NA`` (omitted / not reached).

WARNING: the item column order is the administration order. The missingness
model conditions on the cumulative count of prior missing responses, which is
read left to right across the columns, so reordering columns changes the
model being fitted. Keep columns in the order the items were presented.

Polytomous scores are rejected rather than silently collapsed; recode them so
that only full credit counts as a correct response before fitting.

Reproducibility
---------------
Every subcommand resolves one seed (``--seed``, or OS entropy recorded in the
manifest when omitted) and fans it out to named streams: replication r of a
simulation consumes stream (seed, r), chain c of a fit consumes stream
(seed, c). The manifest written next to the outputs serializes the resolved
options plus input and output hashes, outputs carry no timestamps, and input
files are never modified, so any run is replayable byte-for-byte from its
inputs and manifest alone. ``--jobs`` bounds process-level parallelism (over
chains when fitting, over replications in recovery studies) and never changes
results.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import click
import numpy as np

from . import __version__, sampler, selection
from .diagnostics import rhat_report_from_columns, write_recovery_csv
from .model import (
    IGNORABLE,
    NONIGNORABLE,
    DataError,
    Dataset,
    ModelSpec,
    NumericalError,
    read_response_csv,
    write_response_csv,
)
from .sampler import DrawStore, PriorSpec, SamplerConfig, run_chain
from .simulate import (
    GAMMA_DESIGNS,
    LISTWISE,
    PROPOSED,
    SimDesign,
    expected_missing_proportion,
    replicate_dataset,
    run_recovery_study,
    write_truth_json,
)

_N_DESIGNS = len(GAMMA_DESIGNS)


# -- small helpers -------------------------------------------------------------


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_manifest(path: str) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: manifest parse error: {exc}") from None
    if not isinstance(payload, dict):
        raise DataError(f"{path}: manifest parse error: expected a JSON object")
    return payload


def _resolve_seed(seed: int | None) -> tuple[int, str]:
    """Return (seed, source); omitted seeds draw OS entropy for the manifest."""
    if seed is not None:
        return int(seed), "flag"
    return int(np.random.SeedSequence().entropy % (2**63)), "entropy"


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise click.UsageError(f"cannot create output directory {path!r}: {exc}") from None


def _package_stamp() -> dict:
    return {"name": "irtmiss", "version": __version__}


# -- sampler configuration -----------------------------------------------------

# Keys a --config JSON file may set; command-line flags take precedence.
_CONFIG_KEYS = (
    "iterations",
    "burn_in",
    "chains",
    "thin",
    "seed",
    "proposal_var_s01",
    "proposal_var_s02",
    "jitter_starts",
    "priors",
)


def _merge_config_file(ctx: click.Context, config_file: str | None, values: dict) -> dict:
    """Overlay config-file values onto defaults, keeping explicit flags."""
    if config_file is None:
        return values
    try:
        with open(config_file) as fh:
            overrides = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{config_file}: config parse error: {exc}") from None
    if not isinstance(overrides, dict):
        raise click.UsageError(f"{config_file}: config file must hold a JSON object")
    from_flag = click.core.ParameterSource.COMMANDLINE
    for key, value in overrides.items():
        if key not in _CONFIG_KEYS:
            raise click.UsageError(
                f"{config_file}: unknown config key {key!r}; allowed: {', '.join(_CONFIG_KEYS)}"
            )
        if key in values and ctx.get_parameter_source(key) is from_flag:
            continue
        values[key] = value
        if key == "seed":
            values["seed_source"] = "config"
    return values


def _build_sampler_config(values: dict) -> SamplerConfig:
    priors = values.get("priors") or {}
    if not isinstance(priors, dict):
        raise click.UsageError("priors must be a JSON object of hyperparameter names")
    try:
        prior_spec = PriorSpec(**priors)
    except TypeError:
        known = ", ".join(PriorSpec().as_dict())
        raise click.UsageError(f"unknown prior hyperparameter; allowed: {known}") from None
    config = SamplerConfig(
        n_iterations=int(values["iterations"]),
        burn_in=int(values["burn_in"]),
        thin=int(values["thin"]),
        n_chains=int(values["chains"]),
        seed=int(values["seed"]),
        proposal_var_s01=float(values.get("proposal_var_s01", 0.01)),
        proposal_var_s02=float(values.get("proposal_var_s02", 0.01)),
        priors=prior_spec,
        jitter_starts=bool(values.get("jitter_starts", True)),
    )
    config.validate()
    return config


def _config_manifest(config: SamplerConfig, seed_source: str) -> dict:
    return {
        "n_iterations": config.n_iterations,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "n_chains": config.n_chains,
        "seed": config.seed,
        "seed_source": seed_source,
        "proposal_var_s01": config.proposal_var_s01,
        "proposal_var_s02": config.proposal_var_s02,
        "jitter_starts": config.jitter_starts,
        "priors": config.priors.as_dict(),
    }


# -- chain execution and artifact writers ---------------------------------------


def _chain_task(args: tuple) -> DrawStore:
    data, spec, config, chain_id = args
    return run_chain(data, spec, config, chain_id=chain_id)


def _run_fit_chains(data: Dataset, spec: ModelSpec, config: SamplerConfig, jobs: int) -> list[DrawStore]:
    tasks = [(data, spec, config, c) for c in range(config.n_chains)]
    if jobs <= 1 or config.n_chains == 1:
        return [_chain_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, config.n_chains)) as pool:
        return list(pool.map(_chain_task, tasks))


def _write_draws_csv(path: str, store: DrawStore) -> None:
    columns = store.scalar_columns()
    names = list(columns)
    block = np.column_stack([columns[name] for name in names])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in block:
            writer.writerow([repr(float(v)) for v in row])


def _read_draws_csv(path: str) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty draws file") from None
        try:
            rows = [[float(tok) for tok in row] for row in reader if row]
        except ValueError as exc:
            raise DataError(f"{path}: bad draws file: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no draws")
    block = np.asarray(rows, dtype=np.float64)
    return {name: block[:, k] for k, name in enumerate(names)}


def _write_summary_csv(path: str, stores: Sequence[DrawStore]) -> None:
    """Item and structural rows only; person EAPs stay in the draw streams."""
    summary = sampler.summarize(stores)
    keep = list(stores[0].scalar_columns())
    with open(path, "w", newline="") as fh:
        fh.write("parameter,eap,post_sd,mcse,rhat\n")
        for name in keep:
            p = summary.params[name]
            cells = [repr(float(v)) for v in (p.eap, p.post_sd, p.mcse, p.rhat)]
            fh.write(",".join([name, *cells]) + "\n")


def _write_rhat_trace(path: str, stores: Sequence[DrawStore]) -> None:
    if len(stores) >= 2:
        report = rhat_report_from_columns([s.scalar_columns() for s in stores])
        report.write_trace_csv(path)
    else:
        with open(path, "w", newline="") as fh:
            fh.write("iteration,parameter,rhat\n")


# -- command group --------------------------------------------------------------


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(version=__version__, prog_name="irtmiss")
def cli() -> None:
    """Normal-ogive IRT with a selection model for omitted/not-reached responses.

    Dataset CSVs: header row of item IDs, one row per person, cells 0/1/NA.
    Column order is the ADMINISTRATION ORDER; the missingness model counts
    prior omissions left to right, so do not reorder columns. Every run
    writes a manifest.json recording options, seed, and file hashes; outputs
    are byte-for-byte reproducible from inputs plus manifest.
    """


_seed_option = click.option(
    "--seed", type=int, default=None, help="RNG seed; omitted draws OS entropy (recorded in manifest)."
)
_jobs_option = click.option(
    "--jobs", type=click.IntRange(1), default=1, show_default=True, help="Max worker processes; results never depend on it."
)
_out_option = click.option(
    "--out", type=click.Path(file_okay=False), default=".", show_default=True, help="Output directory."
)


@cli.command()
@click.option("--design", type=click.IntRange(1, _N_DESIGNS), required=True, help=f"Missingness design column (1..{_N_DESIGNS}).")
@click.option("--rho", type=float, default=0.0, show_default=True, help="Latent ability/propensity correlation in [0, 1).")
@click.option("--reps", type=click.IntRange(1), default=10, show_default=True, help="Number of replications to generate.")
@click.option("--n-persons", type=click.IntRange(1), default=500, show_default=True)
@click.option("--n-items", type=click.IntRange(1), default=20, show_default=True)
@_seed_option
@_out_option
def simulate(design: int, rho: float, reps: int, n_persons: int, n_items: int, seed: int | None, out: str) -> None:
    """Generate dataset and truth files for one design cell."""
    seed_value, seed_source = _resolve_seed(seed)
    cell = SimDesign(
        rho=rho,
        gamma=GAMMA_DESIGNS[design - 1],
        n_persons=n_persons,
        n_items=n_items,
        n_replications=reps,
        seed=seed_value,
    )
    _ensure_dir(out)
    outputs: dict[str, str] = {}
    realized: list[float] = []
    for rep in range(reps):
        truth, data = replicate_dataset(cell, rep)
        data_name = f"dataset_rep{rep + 1}.csv"
        truth_name = f"truth_rep{rep + 1}.json"
        write_response_csv(os.path.join(out, data_name), data)
        write_truth_json(os.path.join(out, truth_name), truth)
        outputs[data_name] = _sha256(os.path.join(out, data_name))
        outputs[truth_name] = _sha256(os.path.join(out, truth_name))
        realized.append(float(data.missing_proportion))
    manifest = {
        "command": "simulate",
        "package": _package_stamp(),
        "design_index": design,
        "rho": rho,
        "gamma": list(cell.gamma),
        "n_persons": n_persons,
        "n_items": n_items,
        "replications": reps,
        "rng": {"seed": seed_value, "seed_source": seed_source, "layout": "replication r consumes stream (seed, r-1)"},
        "expected_missing_proportion": expected_missing_proportion(design, rho),
        "realized_missing_proportions": realized,
        "outputs": outputs,
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    click.echo(f"wrote {reps} replications (mean missing {float(np.mean(realized)):.3f}) to {out}")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice([NONIGNORABLE, IGNORABLE]), default=NONIGNORABLE, show_default=True, help="ignorable fixes the ability/propensity covariance at 0.")
@click.option("--iterations", type=click.IntRange(1), default=20_000, show_default=True, help="Total sweeps per chain.")
@click.option("--burn-in", "burn_in", type=click.IntRange(0), default=15_000, show_default=True, help="Discarded initial sweeps.")
@click.option("--chains", type=click.IntRange(1), default=3, show_default=True, help="Independent chains from jittered starts.")
@click.option("--thin", type=click.IntRange(1), default=1, show_default=True)
@_seed_option
@_jobs_option
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON file of option overrides; explicit flags win.")
@_out_option
@click.pass_context
def fit(
    ctx: click.Context,
    dataset: str,
    mode: str,
    iterations: int,
    burn_in: int,
    chains: int,
    thin: int,
    seed: int | None,
    jobs: int,
    config_file: str | None,
    out: str,
) -> None:
    """Fit the model to a response CSV and write draw, summary, and report files."""
    seed_value, seed_source = _resolve_seed(seed)
    values = {
        "iterations": iterations,
        "burn_in": burn_in,
        "chains": chains,
        "thin": thin,
        "seed": seed_value,
        "seed_source": seed_source,
    }
    values = _merge_config_file(ctx, config_file, values)
    config = _build_sampler_config(values)
    data, item_names = read_response_csv(dataset)
    stores = _run_fit_chains(data, ModelSpec(mode=mode), config, jobs)

    _ensure_dir(out)
    outputs: dict[str, str] = {}
    for store in stores:
        name = f"draws_chain{store.chain_id + 1}.csv"
        _write_draws_csv(os.path.join(out, name), store)
        outputs[name] = _sha256(os.path.join(out, name))
    for name, writer in (
        ("summary.csv", lambda p: _write_summary_csv(p, stores)),
        ("rhat_trace.csv", lambda p: _write_rhat_trace(p, stores)),
        ("selection.json", lambda p: sampler.selection_report(stores).write_json(p)),
    ):
        writer(os.path.join(out, name))
        outputs[name] = _sha256(os.path.join(out, name))

    manifest = {
        "command": "fit",
        "package": _package_stamp(),
        "dataset": {
            "path": dataset,
            "sha256": _sha256(dataset),
            "n_persons": data.n_persons,
            "n_items": data.n_items,
            "item_names": item_names,
            "missing_proportion": float(data.missing_proportion),
        },
        "mode": mode,
        "sigma_theta_tau_fixed": 0.0 if mode == IGNORABLE else None,
        "sampler": _config_manifest(config, values["seed_source"]),
        "jobs": jobs,
        "rng_layout": "chain c consumes stream (seed, c)",
        "acceptance_rates": {f"chain{s.chain_id + 1}": s.acceptance_rates() for s in stores},
        "outputs": outputs,
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    n_kept = sum(s.n_draws for s in stores)
    click.echo(f"fit {mode}: {config.n_chains} chains, {n_kept} retained draws, artifacts in {out}")


def _selection_from_manifest(manifest_path: str, manifest: dict) -> selection.SelectionReport:
    run_dir = os.path.dirname(os.path.abspath(manifest_path))
    outputs = manifest.get("outputs", {})
    if "selection.json" not in outputs:
        raise DataError(f"{manifest_path}: fit manifest lists no selection report")
    report_path = os.path.join(run_dir, "selection.json")
    if not os.path.exists(report_path):
        raise DataError(f"{report_path}: selection report missing from run directory")
    if _sha256(report_path) != outputs["selection.json"]:
        raise DataError(f"{report_path}: content does not match the hash in its manifest")
    try:
        with open(report_path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{report_path}: parse error: {exc}") from None
    try:
        return selection.SelectionReport(
            dic=float(payload["dic"]),
            p_d=float(payload["p_d"]),
            d_hat=float(payload["d_hat"]),
            d_bar=float(payload["d_bar"]),
            lpml=float(payload["lpml"]),
            cpo=np.empty(0),
            n_draws=int(payload["n_draws"]),
            model_mode=str(payload["model_mode"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{report_path}: malformed selection report: {exc}") from None


def _require_fit_manifest(path: str) -> dict:
    manifest = _load_manifest(path)
    if manifest.get("command") != "fit":
        raise DataError(f"{path}: not a fit manifest")
    return manifest


@cli.command()
@click.argument("manifest_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write the decision JSON to this file.")
def compare(manifest_a: str, manifest_b: str, out: str | None) -> None:
    """Compare two fits of the same dataset by DIC and LPML.

    When the two runs used different modes, deltas are nonignorable minus
    ignorable regardless of argument order; otherwise first minus second.
    """
    man_a = _require_fit_manifest(manifest_a)
    man_b = _require_fit_manifest(manifest_b)
    hash_a = man_a.get("dataset", {}).get("sha256")
    hash_b = man_b.get("dataset", {}).get("sha256")
    if not hash_a or not hash_b:
        missing = manifest_a if not hash_a else manifest_b
        raise DataError(f"{missing}: manifest records no dataset hash")
    if hash_a != hash_b:
        raise DataError(
            "dataset hash mismatch: "
            f"{manifest_a} fitted {hash_a[:12]}..., {manifest_b} fitted {hash_b[:12]}..."
        )
    pairs = {man_a.get("mode"): (manifest_a, man_a), man_b.get("mode"): (manifest_b, man_b)}
    if set(pairs) == {NONIGNORABLE, IGNORABLE}:
        first_path, first = pairs[NONIGNORABLE]
        second_path, second = pairs[IGNORABLE]
    else:
        first_path, first = manifest_a, man_a
        second_path, second = manifest_b, man_b
    result = selection.compare(
        _selection_from_manifest(first_path, first),
        _selection_from_manifest(second_path, second),
    )
    payload = result.to_json_dict()
    payload["dataset_sha256"] = hash_a
    payload["inputs"] = {"nonignorable": first_path, "ignorable": second_path}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is not None:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    click.echo(text)


@cli.command()
@click.option("--design", type=click.IntRange(1, _N_DESIGNS), required=True, help=f"Missingness design column (1..{_N_DESIGNS}).")
@click.option("--rho", type=float, default=0.0, show_default=True)
@click.option("--method", type=click.Choice([PROPOSED, LISTWISE]), default=PROPOSED, show_default=True, help="listwise drops incomplete rows and fits the plain model.")
@click.option("--reps", type=click.IntRange(1), default=10, show_default=True)
@click.option("--n-persons", type=click.IntRange(1), default=500, show_default=True)
@click.option("--n-items", type=click.IntRange(1), default=20, show_default=True)
@click.option("--iterations", type=click.IntRange(1), default=20_000, show_default=True)
@click.option("--burn-in", "burn_in", type=click.IntRange(0), default=15_000, show_default=True)
@click.option("--chains", type=click.IntRange(1), default=1, show_default=True)
@click.option("--thin", type=click.IntRange(1), default=1, show_default=True)
@_seed_option
@_jobs_option
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON file of option overrides; explicit flags win.")
@_out_option
@click.pass_context
def recover(
    ctx: click.Context,
    design: int,
    rho: float,
    method: str,
    reps: int,
    n_persons: int,
    n_items: int,
    iterations: int,
    burn_in: int,
    chains: int,
    thin: int,
    seed: int | None,
    jobs: int,
    config_file: str | None,
    out: str,
) -> None:
    """Run a draw/generate/fit/score recovery study for one design cell."""
    seed_value, seed_source = _resolve_seed(seed)
    values = {
        "iterations": iterations,
        "burn_in": burn_in,
        "chains": chains,
        "thin": thin,
        "seed": seed_value,
        "seed_source": seed_source,
    }
    values = _merge_config_file(ctx, config_file, values)
    config = _build_sampler_config(values)
    cell = SimDesign(
        rho=rho,
        gamma=GAMMA_DESIGNS[design - 1],
        n_persons=n_persons,
        n_items=n_items,
        n_replications=reps,
        seed=int(values["seed"]),
    )
    report = run_recovery_study(cell, method, config, jobs=jobs)

    _ensure_dir(out)
    csv_path = os.path.join(out, "recovery.csv")
    write_recovery_csv([report], csv_path)
    manifest = {
        "command": "recover",
        "package": _package_stamp(),
        "design_index": design,
        "rho": rho,
        "method": method,
        "n_persons": n_persons,
        "n_items": n_items,
        "replications": reps,
        "completed_replications": len(report.rep_blocks),
        "failures": report.failures,
        "sampler": _config_manifest(config, values["seed_source"]),
        "jobs": jobs,
        "rng_layout": "replication r consumes stream (seed, r-1); its chains use ids (r+1)*1000+c",
        "outputs": {"recovery.csv": _sha256(csv_path)},
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    click.echo(f"scored {len(report.rep_blocks)}/{reps} replications ({method}) into {csv_path}")


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Result CSV path [default: RUN_DIR/rhat_recomputed.csv].")
def diagnose(run_dir: str, out: str | None) -> None:
    """Recompute convergence diagnostics from the draw files of a fit run."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{manifest_path}: no manifest found")
    manifest = _require_fit_manifest(manifest_path)
    draw_names = sorted(n for n in manifest.get("outputs", {}) if n.startswith("draws_chain"))
    if len(draw_names) < 2:
        raise DataError(f"{run_dir}: R-hat needs at least two chains, run has {len(draw_names)}")
    chains = [_read_draws_csv(os.path.join(run_dir, name)) for name in draw_names]
    try:
        report = rhat_report_from_columns(chains)
    except ValueError as exc:
        raise DataError(f"{run_dir}: {exc}") from None
    out = out or os.path.join(run_dir, "rhat_recomputed.csv")
    with open(out, "w", newline="") as fh:
        fh.write("parameter,rhat,pass\n")
        for name, value in report.rhat.items():
            fh.write(f"{name},{value!r},{int(report.passes[name])}\n")
    worst_name, worst_value = report.worst()
    verdict = "all pass" if report.all_pass() else "FAIL"
    click.echo(f"{len(report.rhat)} parameters, worst R-hat {worst_name} = {worst_value:.4f} ({verdict} at {report.threshold})")


# -- entry point ----------------------------------------------------------------


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI, mapping failures onto documented exit codes."""
    try:
        cli.main(args=argv, prog_name="irtmiss", standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help / --version
        return int(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        message = exc.format_message()
        if message.startswith("Usage:"):  # bare group invocation echoes help
            click.echo(message, err=True)
        else:
            if exc.ctx is not None:
                click.echo(exc.ctx.get_usage(), err=True)
            click.echo(f"usage error: {message}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except (ValueError, OSError) as exc:
        click.echo(f"usage error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
