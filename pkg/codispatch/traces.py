"""
Per-iteration trace files.

Layout: UTF-8 BOM, a version comment line, a header row, then one row per
trace record.  Floats are written with repr() so identical runs give
byte-identical files; values that do not apply to a record are 'NA'.
"""
import codecs
import csv

from typing import Dict, List, NamedTuple, Optional, Sequence

from unicodecsv import DictReader

from codispatch.core import TraceRecord
from codispatch.errors import CodispatchException

BOM = "\N{bom}"
TRACE_VERSION = '# codispatch-trace v1'
NA = 'NA'


class Trace(NamedTuple):
    columns: List[str]
    rows: List[Dict[str, Optional[float]]]

    def iterations(self) -> List[int]:
        return [int(r['iteration']) for r in self.rows]

    def column(self, name: str) -> List[Optional[float]]:
        if name not in self.columns:
            raise CodispatchException('trace has no column "%s"' % name)
        return [r[name] for r in self.rows]


def trace_columns(generator_ids: Sequence[str],
                  feeder_ids: Sequence[str]) -> List[str]:
    cols = ['iteration', 'lambda']
    cols.extend('pm_%s' % g for g in generator_ids)
    cols.extend('pl_%s' % f for f in feeder_ids)
    cols.extend('vmin_%s' % f for f in feeder_ids)
    cols.extend('vmax_%s' % f for f in feeder_ids)
    cols.extend(['slack_residual', 'total_cost'])
    cols.extend('alpha_%s' % f for f in feeder_ids)
    cols.extend('beta_%s' % f for f in feeder_ids)
    cols.extend(['primal_step', 'dual_step'])
    return cols


def _cell(value: Optional[float]) -> str:
    if value is None:
        return NA
    return repr(float(value))


def record_row(record: TraceRecord) -> List[str]:
    row = [str(record.iteration), _cell(record.lam)]
    for values in (record.P_M, record.P_L, record.v_min, record.v_max):
        row.extend(_cell(v) for v in values)
    row.extend([_cell(record.slack_residual), _cell(record.total_cost)])
    row.extend(_cell(v) for v in record.alpha)
    row.extend(_cell(v) for v in record.beta)
    row.extend([_cell(record.primal_step), _cell(record.dual_step)])
    return row


def write_trace(path: str, records: Sequence[TraceRecord],
                generator_ids: Sequence[str], feeder_ids: Sequence[str]):
    columns = trace_columns(generator_ids, feeder_ids)
    with open(path, 'w', encoding='utf-8', newline='') as outf:
        outf.write(BOM)
        outf.write(TRACE_VERSION + '\n')
        out = csv.writer(outf, lineterminator='\n')
        out.writerow(columns)
        for record in records:
            row = record_row(record)
            if len(row) != len(columns):
                raise CodispatchException(
                    'trace record %d has %d values for %d columns' % (
                        record.iteration, len(row), len(columns)))
            out.writerow(row)


def read_trace(path: str) -> Trace:
    """
    Parse a trace file written by write_trace.

    :return: Trace with float values, None for 'NA'
    """
    with open(path, 'rb') as f:
        first3bytes = f.read(3)
        if first3bytes != codecs.BOM_UTF8:
            f.seek(0)
        version = f.readline().decode('utf-8').strip()
        if version != TRACE_VERSION:
            raise CodispatchException(
                '%s: not a codispatch trace (first line %r)' % (path, version))

        csv_in = DictReader(f, encoding='utf-8')
        columns = list(csv_in.fieldnames or [])
        rows = []
        for row_dict in csv_in:
            rows.append({
                k: None if v == NA else float(v)
                for k, v in row_dict.items()})
    return Trace(columns, rows)
