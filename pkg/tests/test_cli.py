import csv
import io
import json

import pytest

from lptrain.cli import main

MODEL = "dense:6, relu, dense:3, softmax_ce"


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def small_args(*extra):
    return [
        "--set", f"model.layers={MODEL}",
        "--set", "dataset.n=30",
        "--set", "train.epochs=2",
        "--set", "train.batch_size=8",
        *extra,
    ]


def test_formats_lists_builtins(capsys):
    code, out, _ = run_cli(capsys, "formats")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    names = [r["name"] for r in rows]
    assert names == ["fp32", "hi16", "lo8_fwd", "lo8_bwd"]
    by_name = {r["name"]: r for r in rows}
    assert by_name["lo8_fwd"]["layout"] == "fp(4,3,4)"
    assert by_name["lo8_fwd"]["bits"] == "8"
    assert by_name["fp32"]["values"] == ""  # too wide to enumerate
    assert by_name["lo8_bwd"]["values"] == str(2 ** 8 - 1)


def test_formats_custom(capsys):
    code, out, _ = run_cli(capsys, "formats", "--fmt", "2,1,0")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert rows[-1]["values"] == "15"


def test_formats_bad_custom(capsys):
    code, _, err = run_cli(capsys, "formats", "--fmt", "2,1")
    assert code == 2
    assert err.startswith("error:") and err.count("\n") == 1


def test_assign_prints_plan(capsys):
    code, out, _ = run_cli(
        capsys, "assign", *small_args("--set", "scheme.kind=ours", "--set", "scheme.r=0.5")
    )
    assert code == 0
    body, footer = out.rsplit("#", 1)
    rows = list(csv.DictReader(io.StringIO(body)))
    assert {r["level"] for r in rows} <= {"lo", "hi"}
    assert footer.startswith(" low_precision_ratio=")
    ratio = float(footer.split("=", 1)[1])
    assert 0.5 <= ratio <= 1.0
    # every dense weight-gradient stays high by default
    assert all(r["level"] == "hi" for r in rows if r["kind"] == "bwd_weight")


def test_train_writes_outputs(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run_cli(
        capsys,
        "train",
        *small_args("--set", "scheme.kind=fp32", "--out", str(out_dir)),
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == 4  # header + 2 epochs + summary comment
    assert lines[-1].startswith("# scheme=fp32")
    epochs = (out_dir / "epochs.csv").read_text().strip().splitlines()
    assert len(epochs) == 3
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["scheme"] == "fp32" and summary["epochs"] == 2
    assert summary["mean_low_ratio"] == 0.0


def test_sweep_writes_and_is_deterministic(tmp_path, capsys):
    args = small_args(
        "--set", "scheme.kind=ours",
        "--set", "sweep.ratios=0.0,1.0",
        "--set", "sweep.repeats=1",
    )
    d1, d2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(capsys, "sweep", *args, "--out", str(d1))[0] == 0
    assert run_cli(capsys, "sweep", *args, "--out", str(d2))[0] == 0
    b1 = (d1 / "tradeoff.csv").read_bytes()
    assert b1 == (d2 / "tradeoff.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(b1.decode())))
    assert len(rows) == 2 and rows[0]["scheme"] == "ours"


def test_sweep_stdout(capsys):
    code, out, _ = run_cli(
        capsys,
        "sweep",
        *small_args(
            "--set", "scheme.kind=fp32",
            "--set", "sweep.repeats=2",
        ),
    )
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 2
    assert all(r["flagged"] == "0" for r in rows)


def test_reduce_reports_match(capsys):
    code, out, _ = run_cli(
        capsys, "reduce", "--weights", "1,2", "--profits", "2,1", "--capacity", "2"
    )
    assert code == 0
    assert "verdict: selection matches the knapsack optimum" in out
    assert "agree=True" in out


def test_config_file_plus_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"model.layers = {MODEL}\n"
        "dataset.n = 30\n"
        "train.epochs = 4\n"
        "train.batch_size = 8\n"
        "scheme.kind = fp32\n"
    )
    code, out, _ = run_cli(
        capsys, "train", "--config", str(cfg), "--set", "train.epochs=1"
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 3  # override cut it to one epoch


def test_missing_config_is_one_line_error(capsys):
    code, out, err = run_cli(capsys, "train", "--config", "/nope/run.cfg")
    assert code == 2 and out == ""
    assert err.startswith("error:") and err.count("\n") == 1


def test_bad_scheme_is_one_line_error(capsys):
    code, _, err = run_cli(capsys, "assign", *small_args("--set", "scheme.kind=wat"))
    assert code == 2
    assert "unknown scheme" in err


def test_no_command_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code != 0
