"""Rendering of result tables.

CSV is the canonical output: one row per cell in key order, ranks as
percentages with one decimal, the shift with four decimals, empty fields
for undefined values and ``ERR`` in every value field of a failed cell.
The text format pivots each model into an epsilon x (kind, w/m) grid of
``before->after`` percentages.
"""

import io
import logging
from pathlib import Path
from typing import Optional, Union

import pandas as pd

from advranking import AdvrankingError

from .harness import CellResult, ResultTable

logger = logging.getLogger(__name__)

COLUMNS = ("model", "kind", "epsilon", "wm", "rank_before", "rank_after", "sp_before", "sp_after", "shift")
FORMATS = ("csv", "text")
ERROR_MARK = "ERR"


class ReportError(AdvrankingError):
    """A report cannot be rendered or written."""


def _percent(value: Optional[float]) -> str:
    return "" if value is None else "{:.1f}".format(100 * value)


def _row(cell: CellResult) -> dict:
    key = cell.key
    row = {
        "model": key.model,
        "kind": key.kind.value,
        "epsilon": "{:g}".format(key.epsilon),
        "wm": str(key.wm),
    }
    if cell.failed:
        row.update({column: ERROR_MARK for column in COLUMNS[4:]})
        return row
    row.update(
        rank_before=_percent(cell.rank_before),
        rank_after=_percent(cell.rank_after),
        sp_before=_percent(cell.sp_before),
        sp_after=_percent(cell.sp_after),
        shift="" if cell.shift is None else "{:.4f}".format(cell.shift),
    )
    return row


def to_frame(table: ResultTable) -> pd.DataFrame:
    """Formatted cells as strings, one row per cell in key order."""

    return pd.DataFrame([_row(cell) for cell in table.rows()], columns=list(COLUMNS), dtype=str)


def render_csv(table: ResultTable) -> str:
    return to_frame(table).to_csv(index=False, lineterminator="\n")


def render_text(table: ResultTable) -> str:
    frame = to_frame(table)
    if frame.empty:
        return "(no results)\n"

    def arrow(row):
        if row["rank_before"] == ERROR_MARK:
            return ERROR_MARK
        if not row["rank_before"] and row["shift"]:
            return "shift {}".format(row["shift"])
        return "{}->{}".format(row["rank_before"], row["rank_after"])

    frame["cell"] = frame.apply(arrow, axis=1)
    frame["wm"] = frame["wm"].astype(int)
    frame["epsilon"] = frame["epsilon"].astype(float)
    blocks = []
    for model, block in frame.groupby("model", sort=False):
        pivot = block.pivot(index="epsilon", columns=["kind", "wm"], values="cell").fillna("")
        blocks.append("{}\n{}\n".format(model, pivot.to_string()))
    return "\n".join(blocks)


def emit_report(
    table: ResultTable,
    path: Union[str, Path, None] = None,
    fmt: str = "csv",
) -> str:
    """Render ``table`` and write it to ``path`` when given.

    Returns:
        The rendered report.

    Raises:
        ReportError: Unknown format or unwritable path.
    """

    if fmt not in FORMATS:
        raise ReportError("Unknown report format {!r} (expected one of {})".format(fmt, ", ".join(FORMATS)))
    content = render_csv(table) if fmt == "csv" else render_text(table)

    if path is not None:
        path = Path(path)
        try:
            with io.open(path, "w", encoding="utf-8", newline="") as stream:
                stream.write(content)
        except OSError as err:
            raise ReportError("Cannot write report {}: {}".format(path, err)) from err
        logger.info("Wrote %d result rows to %s", len(table), path)
    return content
