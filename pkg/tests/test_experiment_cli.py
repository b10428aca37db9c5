import csv
import io
import json
import math

import numpy as np
import pytest

from hybrid_se.cli import main
from hybrid_se.experiment import (CSV_HEADER, ConfigError, ExperimentConfig, MetricsRecord,
                                  records_to_csv, run_experiment, summarize, write_records,
                                  write_summary)


def _cfg(**kw):
    base = dict(case="ieee14", runs=2, max_iter=4, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("kw", [dict(runs=0), dict(sigma_pmu=0.0), dict(theta_bound_deg=-1),
                                dict(algorithms=("nope",)), dict(algorithms=()),
                                dict(max_iter=0), dict(perturb_fraction=1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw)


def test_row_count_schema_and_replay():
    cfg = _cfg()
    a = records_to_csv(run_experiment(cfg))
    b = records_to_csv(run_experiment(cfg))
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == cfg.runs * len(cfg.algorithms) * (cfg.max_iter + 1)
    for r in rows:
        assert float(r["state_mse"]) >= 0
        assert (r["phase_mse"] != "") == (r["algo"] in ("cvi", "am", "dvi"))
        assert r["wall_ms"] == ""


def test_process_workers_match_serial():
    cfg = _cfg(runs=3, algorithms=("wls", "cvi"))
    assert records_to_csv(run_experiment(cfg)) == records_to_csv(run_experiment(cfg, workers=2))


def test_zero_bound_wls_equals_cvi():
    cfg = _cfg(theta_bound_deg=0.0, algorithms=("wls", "cvi"), runs=2)
    recs = list(run_experiment(cfg))
    last = {(r.run, r.algo): r.state_mse for r in recs if r.iter == cfg.max_iter}
    for run in range(2):
        assert last[(run, "cvi")] == pytest.approx(last[(run, "wls")], abs=1e-8)


def test_run_seed_split():
    # run r of seed s replays as run 0 of seed s ^ r
    a = [r for r in run_experiment(_cfg(runs=3, seed=6, algorithms=("wls",))) if r.run == 2]
    b = list(run_experiment(_cfg(runs=1, seed=6 ^ 2, algorithms=("wls",))))
    assert [x.state_mse for x in a] == [x.state_mse for x in b]


def test_summary_hand_computation():
    recs = [MetricsRecord(0, "cvi", 0, 1.0, 0.5), MetricsRecord(1, "cvi", 0, 3.0, 0.5),
            MetricsRecord(2, "cvi", 0, 5.0, 0.5)]
    (row,) = summarize(recs)
    assert row.n == 3 and row.state_mse == pytest.approx(3.0)
    assert row.state_se == pytest.approx(2.0 / math.sqrt(3))
    assert row.phase_se == 0.0
    (single,) = summarize(recs[:1])
    assert single.state_mse == 1.0 and single.state_se == 0.0
    buf = io.StringIO()
    write_summary([row], buf)
    assert buf.getvalue().splitlines()[0].startswith("algo,iter,n,state_mse")


def test_jsonl_output():
    buf = io.StringIO()
    write_records([MetricsRecord(0, "wls", 0, float("nan"))], buf, "jsonl")
    assert json.loads(buf.getvalue())["state_mse"] is None
    with pytest.raises(ConfigError):
        write_records([], buf, "xml")


def test_cli_writes_csv_and_summary(tmp_path):
    out, summ = tmp_path / "r.csv", tmp_path / "s.csv"
    argv = ["--case", "ieee14", "--runs", "1", "--iters", "3", "--algos", "wls,dvi",
            "--out", str(out), "--summary", str(summ)]
    assert main(argv) == 0
    first = out.read_bytes()
    assert main(argv) == 0
    assert out.read_bytes() == first
    assert first.decode().splitlines()[0] == ",".join(CSV_HEADER)
    assert len(summ.read_text().splitlines()) == 1 + 2 * 4


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["--runs", "0"]) == 2
    assert main(["--sigma-pmu", "-1"]) == 2
    assert main(["--algos", "magic"]) == 2
    assert main(["--case", "nowhere"]) == 3
    assert main(["--case", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"buses": [], "branches": []}')
    assert main(["--case", str(bad)]) == 3
    assert main(["--pmu-buses", "1,99"]) == 3


def test_cli_print_placement(capsys):
    assert main(["--case", "ieee14", "--print-placement"]) == 0
    ids = [int(x) for x in capsys.readouterr().out.strip().split(",")]
    assert ids == sorted(ids) and len(ids) >= 1


def test_cli_jsonl_stdout(capsys):
    assert main(["--runs", "1", "--iters", "1", "--algos", "wls", "--format", "jsonl"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and json.loads(lines[1])["iter"] == 1


def test_timing_fills_wall_ms():
    recs = list(run_experiment(_cfg(runs=1, algorithms=("wls",), timing=True)))
    assert recs[-1].wall_ms is not None and recs[0].wall_ms is None
    assert np.isfinite(recs[-1].wall_ms)
