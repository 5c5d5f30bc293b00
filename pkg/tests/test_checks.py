import json

import pytest

from mvsds.checks import FAULTS, check_names, run_checks
from mvsds.cli import EXIT_CHECK, EXIT_OK, main

MODULES = ("sched", "camera", "scenegen", "mvnet", "trainer", "radiance", "distill")


def test_suite_names_cover_every_module():
    names = check_names()
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == set(MODULES)
    assert "distill.sds_equivalence" in names and "sched.normalization" in names


def test_full_suite_passes_via_cli(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["check", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["passed"] and report["failed"] == []
    assert [c["name"] for c in report["checks"]] == check_names()
    assert report["sds_max_rel_dev"] < 1e-5
    assert json.loads(capsys.readouterr().out) == report


def test_corrupted_alpha_is_named(tmp_path):
    assert FAULTS == ("alpha",)
    report = run_checks(only=["sched.normalization", "mvnet.f1_equality"], inject_fault="alpha")
    assert not report["passed"] and "sched.normalization" in report["failed"]
    assert "mvnet.f1_equality" not in report["failed"]
    assert main(["check", "--inject-fault", "alpha", "--out", str(tmp_path / "r.json")]) == EXIT_CHECK
    assert "sched.normalization" in json.loads((tmp_path / "r.json").read_text())["failed"]


def test_unknown_check_name():
    with pytest.raises(ValueError):
        run_checks(only=["sched.nonexistent"])
