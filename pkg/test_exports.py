import json

import openpyxl
import pytest

from osiris import exports
from osiris.errors import WorkloadError
from osiris.gsc_scheduler import TraceEvent

REPORT = {
    "command": "sweep",
    "workload": "matvec_set4_l12",
    "parameter_set": "IV",
    "columns": ["varied", "value", "cycles", "utilization"],
    "rows": [
        {"varied": "bandwidth", "value": 5e11, "cycles": 900, "utilization": 1 / 3},
        {"varied": "bandwidth", "value": 1e12, "cycles": 600, "utilization": None},
    ],
}


def test_csv_text_fixes_float_form():
    text = exports.csv_text(REPORT["rows"], REPORT["columns"])
    assert text.splitlines() == [
        "varied,value,cycles,utilization",
        "bandwidth,5e+11,900,0.333333333",
        "bandwidth,1e+12,600,",
    ]
    assert exports.columns_of([{"a": 1}, {"b": 2, "a": 3}]) == ["a", "b"]


def test_json_text_is_key_sorted():
    assert exports.json_text({"b": 1, "a": 2}) == '{\n  "a": 2,\n  "b": 1\n}\n'


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_text_reports_are_byte_stable(tmp_path, fmt):
    a = exports.write_report(tmp_path / f"a.{fmt}", fmt, REPORT)
    b = exports.write_report(tmp_path / f"b.{fmt}", fmt, REPORT)
    assert a.read_bytes() == b.read_bytes()


def test_xlsx_report(tmp_path):
    path = exports.write_report(tmp_path / "r.xlsx", "xlsx", REPORT)
    ws = openpyxl.load_workbook(path).active
    assert ws.cell(row=1, column=1).value == "osiris sweep: matvec_set4_l12"
    assert ws.cell(row=2, column=1).value == "parameter set IV"
    assert [c.value for c in ws[3]] == ["VARIED", "VALUE", "CYCLES", "UTILIZATION"]
    assert ws.cell(row=4, column=3).value == 900


def test_pdf_report(tmp_path):
    path = exports.write_report(tmp_path / "r.pdf", "pdf", REPORT)
    assert path.read_bytes().startswith(b"%PDF")


def test_unknown_format(tmp_path):
    with pytest.raises(WorkloadError):
        exports.write_report(tmp_path / "r.txt", "txt", REPORT)


def test_side_files(tmp_path):
    trace = exports.write_trace(tmp_path / "t.csv", [TraceEvent(3, 1, 0, "bfly", "mdc")])
    assert trace.read_text().splitlines() == ["cycle,stage,lane,op,unit", "3,1,0,bfly,mdc"]

    class Timeline:
        def to_dict(self):
            return {"phases": [{"phase": "prologue"}]}

    timeline = exports.write_timeline(tmp_path / "tl.json", [Timeline(), Timeline()])
    assert len(json.loads(timeline.read_text())) == 2
