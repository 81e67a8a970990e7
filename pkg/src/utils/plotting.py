import pathlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import pandas as pd

from src.utils import get_logger
from src.utils.data_utils import write_table

log = get_logger(__name__)

SCRIPT_NAME = "plot.gp"


@dataclass(frozen=True)
class CurveSpec:
    """One figure: ``y`` against ``x`` from a result table, one curve per value of ``group_by``."""

    name: str
    table: str
    x: str
    y: str
    group_by: Optional[str] = None
    logscale_y: bool = False


def _slug(value) -> str:
    text = f"{value:g}" if isinstance(value, float) else str(value)
    return "".join(c if c.isalnum() or c in "-." else "_" for c in text)


def _gnuplot_block(spec: CurveSpec, files: Sequence[pathlib.Path], titles: Sequence[str]) -> List[str]:
    lines = [
        f"set output '{spec.name}.png'",
        f"set xlabel '{spec.x}'",
        f"set ylabel '{spec.y}'",
        "set logscale y" if spec.logscale_y else "unset logscale y",
    ]
    parts = [f"'{f.name}' using 1:2 with linespoints title '{title}'" for f, title in zip(files, titles)]
    lines.append("plot " + ", \\\n     ".join(parts))
    return lines


def emit_plot_data(bundle, curves: Sequence[CurveSpec]) -> List[pathlib.Path]:
    """Writes one two-column CSV per curve and a gnuplot script that draws them.

    Args:
        bundle: ResultBundle of a finished run.
        curves: Figures to extract.

    Returns:
        List[pathlib.Path]: Written files, the script last. Empty for an empty bundle.
    """

    if bundle.empty:
        log.warning(f"Bundle in {bundle.out_dir} holds no tables, no plot data written")
        return []

    plot_dir = pathlib.Path(bundle.out_dir, "plots")
    written: List[pathlib.Path] = []
    script = ["set datafile separator ','", "set key autotitle columnhead", "set terminal pngcairo size 800,600"]
    for spec in curves:
        path = bundle.tables.get(spec.table)
        if path is None:
            log.warning(f"Curve <{spec.name}> skipped, table <{spec.table}> not in bundle")
            continue
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = [c for c in (spec.x, spec.y, spec.group_by) if c is not None and c not in frame]
        if missing or frame.empty:
            log.warning(f"Curve <{spec.name}> skipped, table <{spec.table}> lacks {missing or 'rows'}")
            continue
        groups = frame.groupby(spec.group_by, sort=False) if spec.group_by else [(spec.y, frame)]
        files, titles = [], []
        for key, group in groups:
            suffix = f"_{_slug(key)}" if spec.group_by else ""
            target = plot_dir / f"{spec.name}{suffix}.csv"
            write_table(target, group[[spec.x, spec.y]].dropna())
            files.append(target)
            titles.append(f"{spec.group_by}={key}" if spec.group_by else spec.y)
        written.extend(files)
        script.extend(_gnuplot_block(spec, files, titles))

    if not written:
        log.warning("No curve could be extracted, no plot script written")
        return []
    script_path = plot_dir / SCRIPT_NAME
    script_path.write_text("\n".join(script) + "\n")
    written.append(script_path)
    log.info(f"Plot data for {len(written) - 1} curves written to {plot_dir}")
    return written
