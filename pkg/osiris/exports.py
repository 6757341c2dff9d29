"""Report writers: CSV and JSON (byte-stable), XLSX and PDF (timestamped)."""
import csv
import io
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import openpyxl
from openpyxl.styles import Alignment, Font, PatternFill
from reportlab.lib import colors
from reportlab.lib.pagesizes import A3, landscape
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from .errors import WorkloadError

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json", "xlsx", "pdf")
TRACE_COLUMNS = ("cycle", "stage", "lane", "op", "unit")
ROOFLINE_COLUMNS = ("workload", "bw", "intensity", "achieved", "peak", "utilization")


def format_value(value: Any) -> Any:
    """Fixed text form for floats so CSV output never depends on repr quirks."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return f"{value:.9g}"
    return value


def columns_of(rows: Sequence[Dict[str, Any]]) -> List[str]:
    cols: List[str] = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def csv_text(rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> str:
    columns = list(columns or columns_of(rows))
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: format_value(row.get(k, "")) for k in columns})
    return out.getvalue()


def json_text(report: Any) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_csv(path: Path, rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.write_text(csv_text(rows, columns))
    return path


def write_json(path: Path, report: Any) -> Path:
    path = Path(path)
    path.write_text(json_text(report))
    return path


def _stamp() -> str:
    return f"Generated on {datetime.now().strftime('%d/%m/%Y %H:%M:%S')}"


def write_xlsx(path: Path, title: str, rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None,
               subtitle: Optional[str] = None) -> Path:
    columns = list(columns or columns_of(rows)) or ["empty"]
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = "Report"

    font_style = Font(name="Liberation Sans", size=10)
    header_font = Font(name="Liberation Sans", size=12, bold=True)
    title_font = Font(name="Liberation Sans", size=14, bold=True)
    center_align = Alignment(horizontal="center", vertical="center")

    current_row = 1
    ws.cell(row=current_row, column=1, value=title)
    ws.merge_cells(start_row=current_row, start_column=1, end_row=current_row, end_column=len(columns))
    cell = ws.cell(row=current_row, column=1)
    cell.font = title_font
    cell.alignment = center_align
    current_row += 1

    if subtitle:
        ws.cell(row=current_row, column=1, value=subtitle)
        ws.merge_cells(start_row=current_row, start_column=1, end_row=current_row, end_column=len(columns))
        ws.cell(row=current_row, column=1).alignment = center_align
        current_row += 1

    ws.append([c.upper() for c in columns])
    header_row_idx = current_row
    for cell in ws[header_row_idx]:
        cell.font = header_font
    for idx, row in enumerate(rows, start=1):
        ws.append([row.get(k) for k in columns])
        row_idx = idx + header_row_idx
        if row_idx % 2 == 0:
            fill = PatternFill(start_color="F0F0F0", end_color="F0F0F0", fill_type="solid")
            for cell in ws[row_idx]:
                cell.fill = fill
        for cell in ws[row_idx]:
            cell.font = font_style
    ws.append([])
    footer_cell = ws.cell(row=ws.max_row + 1, column=1, value=_stamp())
    footer_cell.font = Font(name="Liberation Sans", size=8, italic=True)
    path = Path(path)
    wb.save(path)
    return path


def write_pdf(path: Path, title: str, rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None,
              subtitle: Optional[str] = None) -> Path:
    columns = list(columns or columns_of(rows)) or ["empty"]
    path = Path(path)
    page = landscape(A3)
    doc = SimpleDocTemplate(str(path), pagesize=page, topMargin=30, bottomMargin=30, leftMargin=30, rightMargin=30)
    styles = getSampleStyleSheet()
    elements = [Paragraph(title, styles["Title"])]
    if subtitle:
        elements.append(Paragraph(subtitle, styles["Normal"]))
    elements.append(Spacer(1, 12))

    data = [[c.upper() for c in columns]]
    for row in rows:
        data.append([str(format_value(row.get(k, ""))) for k in columns])
    table = Table(data, repeatRows=1)
    font_size = 8 if len(columns) > 10 else 9
    table.setStyle(TableStyle([
        ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
        ("TEXTCOLOR", (0, 0), (-1, 0), colors.black),
        ("ALIGN", (0, 0), (-1, -1), "LEFT"),
        ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
        ("FONTSIZE", (0, 0), (-1, 0), font_size + 1),
        ("FONTSIZE", (0, 1), (-1, -1), font_size),
        ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
        ("VALIGN", (0, 0), (-1, -1), "TOP"),
        ("LEFTPADDING", (0, 0), (-1, -1), 2),
        ("RIGHTPADDING", (0, 0), (-1, -1), 2),
    ]))
    for i in range(1, len(data)):
        if i % 2 == 0:
            table.setStyle(TableStyle([("BACKGROUND", (0, i), (-1, i), colors.whitesmoke)]))
    elements.append(table)

    def footer(canvas, doc):
        canvas.saveState()
        canvas.setFont("Helvetica-Oblique", 8)
        canvas.drawRightString(page[0] - 30, 20, f"Page {canvas.getPageNumber()} | {_stamp()}")
        canvas.restoreState()

    doc.build(elements, onFirstPage=footer, onLaterPages=footer)
    return path


def write_report(path: Path, fmt: str, report: Dict[str, Any]) -> Path:
    """Write a report; tabular formats take its `rows`, JSON takes the whole document."""
    if fmt not in FORMATS:
        raise WorkloadError(f"unknown report format {fmt!r}; choose one of {', '.join(FORMATS)}")
    rows = report.get("rows", [])
    title = f"osiris {report.get('command', 'report')}: {report.get('workload') or ''}".strip()
    subtitle = f"parameter set {report['parameter_set']}" if report.get("parameter_set") else None
    if fmt == "json":
        out = write_json(path, report)
    elif fmt == "csv":
        out = write_csv(path, rows, report.get("columns"))
    elif fmt == "xlsx":
        out = write_xlsx(path, title, rows, report.get("columns"), subtitle)
    else:
        out = write_pdf(path, title, rows, report.get("columns"), subtitle)
    logger.info("wrote %s report to %s", fmt, out)
    return out


def write_trace(path: Path, events: Iterable) -> Path:
    rows = [e.as_row() if hasattr(e, "as_row") else dict(e) for e in events]
    return write_csv(path, rows, TRACE_COLUMNS)


def write_roofline(path: Path, points: Iterable) -> Path:
    return write_csv(path, [pt.as_row() for pt in points], ROOFLINE_COLUMNS)


def write_timeline(path: Path, timelines: Iterable) -> Path:
    """JSON array of phase records, one entry per scheduled op."""
    return write_json(path, [tl.to_dict() for tl in timelines])
