import click
import json
import logging
import os
from contextlib import contextmanager

from typing import Any, Dict, Optional

from codispatch.cases import load_feeder
from codispatch.config import LOG_FORMAT, LOG_LEVEL_ENV, solver_config
from codispatch.errors import CodispatchException
from codispatch.linmodel import build_lindistflow, dump_model_csv
from codispatch.oracle import probe_oracle
from codispatch.scenario import (
    CORE,
    MARKET_BEST_RESPONSE,
    MARKET_GRADIENT,
    Scenario,
    compare_runs,
    load_scenario,
    run_scenario,
)

ENGINE_OPTIONS = {
    'core': CORE,
    'market': MARKET_GRADIENT,
    'market-br': MARKET_BEST_RESPONSE,
}

EXIT_ITERATION_LIMIT = 2

# per-iteration loggers silenced unless -L is given
ENGINE_LOGGERS = (
    'codispatch.core',
    'codispatch.market',
    'codispatch.powerflow',
)


@contextmanager
def suppress_logging(logger_name: str):
    """
    Suppresses logging for a given logger name. Restores
    it to its original state afterwards.
    """
    logger = logging.getLogger(logger_name)
    old_level = logger.level

    try:
        logger.setLevel(logging.CRITICAL)
        yield
    finally:
        logger.setLevel(old_level)


@contextmanager
def engine_logs(no_log_suppression: bool):
    if no_log_suppression:
        yield
        return
    with (
        suppress_logging(ENGINE_LOGGERS[0]),
        suppress_logging(ENGINE_LOGGERS[1]),
        suppress_logging(ENGINE_LOGGERS[2])
    ):
        yield


@click.group(short_help="T&D co-optimization commands")
def codispatch():
    """T&D co-optimization commands.
    """
    level = os.environ.get(LOG_LEVEL_ENV, 'WARNING').upper()
    try:
        logging.basicConfig(format=LOG_FORMAT, level=level)
    except ValueError:
        raise click.ClickException(
            'Invalid %s "%s"' % (LOG_LEVEL_ENV, level))


def _apply_overrides(scenario: Scenario,
                     engine: Optional[str],
                     feedback: Optional[str],
                     max_iter: Optional[int],
                     eps: Optional[float],
                     eta: Optional[float],
                     seed: Optional[int]) -> Scenario:
    solver = solver_config({
        'feedback': feedback,
        'max_iter': max_iter,
        'epsilon': eps,
        'eta': eta,
    }, scenario.solver)
    changes: Dict[str, Any] = {'solver': solver}
    if engine is not None:
        changes['engine'] = ENGINE_OPTIONS[engine]
    if seed is not None:
        changes['seed'] = seed
    return scenario._replace(**changes)


@codispatch.command(short_help="Run a scenario and write its trace and summary.")
@click.argument("scenario_file")
@click.option("-o", "--out", default='.', help="Output directory.")
@click.option("--engine", type=click.Choice(list(ENGINE_OPTIONS)),
              help="Engine to run, overrides the scenario.")
@click.option("--feedback", type=click.Choice(['linear', 'ac']),
              help="Power-flow feedback, overrides the scenario.")
@click.option("--max-iter", type=int, help="Iteration limit.")
@click.option("--eps", type=float, help="Stepsize epsilon.")
@click.option("--eta", type=float, help="Dual regularization eta.")
@click.option("--seed", type=int, help="Random seed.")
@click.option("--messages", is_flag=True, type=click.BOOL,
              help="Also write the market message log.")
@click.option('-v', '--verbose', is_flag=True,
              type=click.BOOL, help='Increase verbosity.')
@click.option('-L', '--no-log-suppression', is_flag=True,
              type=click.BOOL, help='Do not suppress the python logs.')
@click.pass_context
def run(ctx: click.Context,
        scenario_file: str,
        out: str = '.',
        engine: Optional[str] = None,
        feedback: Optional[str] = None,
        max_iter: Optional[int] = None,
        eps: Optional[float] = None,
        eta: Optional[float] = None,
        seed: Optional[int] = None,
        messages: bool = False,
        verbose: bool = False,
        no_log_suppression: bool = False):
    """
    Run a scenario file

    Full Usage:\n
        codispatch run SCENARIO_FILE [--out DIR] [--engine core|market|market-br]

    Exits with 0 when the run converged and 2 when it hit the iteration
    limit.
    """
    progress = click.echo if verbose else None
    try:
        scenario = _apply_overrides(load_scenario(scenario_file), engine,
                                    feedback, max_iter, eps, eta, seed)
        with engine_logs(no_log_suppression):
            result = run_scenario(scenario, out, messages=messages,
                                  progress=progress)
    except CodispatchException as e:
        raise click.ClickException(str(e))

    summary = result.summary
    click.echo('%s: %s after %d iterations, lambda %.6g, total cost %.6g' % (
        scenario.name, summary['status'], summary['iterations'],
        summary['lambda'], summary['total_cost']))
    if verbose:
        click.echo('trace: %s' % result.trace_path)
        click.echo('summary: %s' % result.summary_path)
    if summary['status'] != 'converged':
        ctx.exit(EXIT_ITERATION_LIMIT)


@codispatch.command(short_help="Compare one column of two trace files.")
@click.argument("trace_a")
@click.argument("trace_b")
@click.option("--metric", default='total_cost', help="Trace column to compare.")
@click.option("--json", "as_json", is_flag=True, type=click.BOOL,
              help="Print the full per-iteration report as JSON.")
def compare(trace_a: str, trace_b: str, metric: str = 'total_cost',
            as_json: bool = False):
    """
    Compare two traces of the same scenario horizon

    Full Usage:\n
        codispatch compare TRACE_A TRACE_B [--metric COLUMN]
    """
    try:
        report = compare_runs(trace_a, trace_b, metric)
    except CodispatchException as e:
        raise click.ClickException(str(e))
    if as_json:
        click.echo(json.dumps(report, indent=2))
        return
    final = report['final']
    click.echo('%s: final %r (a, iteration %d) vs %r (b, iteration %d), '
               'delta %r' % (metric, final['a'], final['iteration_a'],
                             final['b'], final['iteration_b'], final['delta']))
    click.echo('max |delta| over %d common iterations: %r' % (
        len(report['iterations']), report['max_abs_delta']))


@codispatch.command(short_help="Check a small scenario against brute force.")
@click.argument("scenario_file")
@click.option('-L', '--no-log-suppression', is_flag=True,
              type=click.BOOL, help='Do not suppress the python logs.')
def oracle(scenario_file: str, no_log_suppression: bool = False):
    """
    Solve a scenario with at most four decision variables by grid search
    and report the gap to the engine

    Full Usage:\n
        codispatch oracle SCENARIO_FILE
    """
    try:
        scenario = load_scenario(scenario_file)
        with engine_logs(no_log_suppression):
            report = probe_oracle(scenario)
    except CodispatchException as e:
        raise click.ClickException(str(e))
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@codispatch.command(short_help="Write the linear model of a feeder as CSV.")
@click.argument("case_file")
@click.option("-o", "--out", required=True, help="Output directory.")
def dump_model(case_file: str, out: str):
    """
    Write the A, B, c, M, N and d matrices of a feeder case

    Full Usage:\n
        codispatch dump-model CASE_FILE --out DIR
    """
    try:
        model = build_lindistflow(load_feeder(case_file))
        written = dump_model_csv(model, out)
    except CodispatchException as e:
        raise click.ClickException(str(e))
    for path in written:
        click.echo(path)
