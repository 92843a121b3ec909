"""CSV report schemas and atomic file output."""
import csv
import io
import logging
import os
import tempfile
from typing import Iterable, List, Sequence, Union

import texttable
from typing_extensions import TypedDict

from .metrics import CategorySummary, MetricsReport, SpilloverRow

logger = logging.getLogger(__name__)


class MetricsRow(TypedDict):
    transform: str
    ap: float
    dp: float
    deo: float
    n: int


class SpilloverCsvRow(TypedDict):
    attribute: str
    hsic: float
    dp_orig: float
    dp_recon: float
    dp_delta: float


SweepRow = TypedDict(
    "SweepRow",
    {
        "lambda": float,
        "ap_mean": float,
        "ap_sd": float,
        "dp_mean": float,
        "dp_sd": float,
        "deo_mean": float,
        "deo_sd": float,
    },
)

METRICS_COLUMNS = list(MetricsRow.__annotations__)
SPILLOVER_COLUMNS = list(SpilloverCsvRow.__annotations__)
SWEEP_COLUMNS = list(SweepRow.__annotations__)
CATEGORY_COLUMNS = [
    "category",
    "n_attributes",
    "ap_orig",
    "ap_recon",
    "dp_orig",
    "dp_recon",
    "deo_orig",
    "deo_recon",
]


def fmt(value) -> str:
    "9 significant digits for reals, plain text otherwise."
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def atomic_write(path: str, content: Union[str, bytes]):
    """Write to a temporary file in the target directory, then rename over
    `path`, so readers never observe a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(content)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def to_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    with io.StringIO() as buffer:
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in columns])
        return buffer.getvalue()


def write_csv(path: str, columns: Sequence[str], rows: Iterable[dict]):
    atomic_write(path, to_csv(columns, rows))
    logger.info(f"Wrote {path}")


def metrics_rows(reports: List[MetricsReport]) -> List[MetricsRow]:
    return [
        MetricsRow(transform=r.transform, ap=r.ap, dp=r.dp, deo=r.deo, n=r.n_evaluated) for r in reports
    ]


def spillover_rows(rows: List[SpilloverRow]) -> List[SpilloverCsvRow]:
    return [
        SpilloverCsvRow(
            attribute=r.attribute,
            hsic=r.hsic_with_target,
            dp_orig=r.dp_original,
            dp_recon=r.dp_reconstructed,
            dp_delta=r.dp_delta_abs,
        )
        for r in rows
    ]


def category_rows(summaries: List[CategorySummary]) -> List[dict]:
    return [
        dict(
            zip(
                CATEGORY_COLUMNS,
                [
                    s.category,
                    s.n_attributes,
                    s.ap_original,
                    s.ap_reconstructed,
                    s.dp_original,
                    s.dp_reconstructed,
                    s.deo_original,
                    s.deo_reconstructed,
                ],
            )
        )
        for s in summaries
    ]


def format_table(columns: Sequence[str], rows: Iterable[dict], precision: int = 4) -> str:
    "Console rendering of report rows."
    table = texttable.Texttable(max_width=0)
    table.set_deco(texttable.Texttable.HEADER)
    table.set_precision(precision)
    table.header(list(columns))
    for row in rows:
        table.add_row([row[c] for c in columns])
    return table.draw()
