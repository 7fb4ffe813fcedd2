import json

from simpleics.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from simpleics.scenario import load, save


def test_validate_default_and_file(tmp_path, capsys):
    assert main(["validate"]) == EXIT_OK
    p = tmp_path / "s.json"
    save(load(), p)
    assert main(["validate", str(p)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_validate_reports_paths_and_exit_codes(tmp_path, capsys):
    doc = load()
    doc["links"][0]["latency_us"] = -5
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["validate", str(p)]) == EXIT_INVALID
    assert "links[0].latency_us" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.json")]) == EXIT_IO


def test_run_rejects_bad_duration(tmp_path):
    assert main(["run", "--duration", "soon", "--out", str(tmp_path / "b")]) == EXIT_INVALID
    assert not (tmp_path / "b").exists()


def test_run_into_unwritable_path_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--duration", "5s", "--out", str(blocker / "b")]) == EXIT_IO


def test_runtime_fault_leaves_partial_bundle(tmp_path, monkeypatch):
    from simpleics import world

    def boom(self, *a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(world.World, "run", boom)
    out = tmp_path / "b"
    assert main(["run", "--duration", "5s", "--out", str(out)]) == EXIT_RUNTIME
    assert (out / "PARTIAL").exists()


def test_run_and_report(tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["run", "--seed", "3", "--duration", "2m", "--out", str(out)]) == EXIT_OK
    assert "seed 3" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    rep = tmp_path / "r"
    assert main(["report", str(out), "--out", str(rep), "--window", "1m", "--delimiter", "tsv"]) == EXIT_OK
    text = capsys.readouterr().out
    for section in ("# latency", "# protocols", "# coverage", "modbus/mqtt ratio"):
        assert section in text
    for name in ("latency.tsv", "protocols.tsv", "coverage.tsv", "latency.png", "protocols.png",
                 "coverage.png"):
        assert (rep / name).stat().st_size > 0
    assert (rep / "latency.png").read_bytes()[:4] == b"\x89PNG"
    header = (rep / "coverage.tsv").read_text().splitlines()[0]
    assert "\t" in header


def test_report_errors(tmp_path):
    assert main(["report", str(tmp_path / "none")]) == EXIT_IO
    assert main(["report", str(tmp_path), "--window", "bogus"]) == EXIT_INVALID


def test_usage_errors_are_invalid_not_io():
    assert main(["run"]) == EXIT_INVALID
    assert main(["frobnicate"]) == EXIT_INVALID
    assert main(["--version"]) == EXIT_OK
