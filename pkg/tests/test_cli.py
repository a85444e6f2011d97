"""CLI surface tests: artifacts, determinism, exit codes."""

import json

import pytest

from rovtwin.bag import Bag
from rovtwin.bridge import Broker
from rovtwin.cli import main


def test_gen_map_deterministic(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    assert main(["gen-map", "--seed", "3", "--file", str(a)]) == 0
    assert main(["gen-map", "--seed", "3", "--file", str(b)]) == 0
    assert a.read_text() == b.read_text()


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["gen-map", "--no-such-flag"])
    assert err.value.code != 0


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SystemExit):
        main(["campaign-plan", "--config", str(bad), "--trials", "1"])


def test_replay_empty_bag(tmp_path, capsys):
    bag_path = tmp_path / "empty.jsonl"
    Bag(created_ns=1).save(bag_path)
    broker = Broker(tcp_port=0, ws_port=None).start()
    try:
        code = main(
            ["replay", "--bag", str(bag_path), "--port-tcp", str(broker.tcp_address[1])]
        )
    finally:
        broker.stop()
    assert code == 0
    assert "replayed 0 envelopes" in capsys.readouterr().out


def test_missing_bag_nonzero_exit(tmp_path):
    assert main(["replay", "--bag", str(tmp_path / "nope.jsonl")]) == 2


def test_campaign_reproducible_with_iteration_budgets(tmp_path):
    argv = [
        "campaign-plan",
        "--trials", "2",
        "--seed", "9",
        "--class", "SIMPLE",
        "--budget", "0.5",
        "--iter-budget", "800",
        "--out",
    ]
    a_dir = tmp_path / "a"
    b_dir = tmp_path / "b"
    assert main(argv + [str(a_dir)]) == 0
    assert main(argv + [str(b_dir)]) == 0
    a = (a_dir / "campaign.csv").read_text()
    b = (b_dir / "campaign.csv").read_text()
    assert a == b
    assert a.splitlines()[0] == "class,budget_s,trials,successes,rate,mean_cost_m,mean_iterations"


def test_report_renders_artifacts(tmp_path):
    (tmp_path / "campaign.csv").write_text(
        "class,budget_s,trials,successes,rate,mean_cost_m,mean_iterations\n"
        "SIMPLE,0.5,2,2,1.0000,12.0,100.0\n"
    )
    (tmp_path / "e2e.json").write_text(json.dumps({"reached": True, "contact_events": 0}))
    assert main(["report", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.md").read_text()
    assert "## Planning campaign" in text
    assert "| SIMPLE | 0.5 |" in text
    assert "reached: True" in text


def test_report_empty_dir_fails(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_bench_latency_writes_csv(tmp_path):
    assert main(["bench-latency", "--window", "5", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "delay_report.csv").read_text()
    assert text.splitlines()[0] == "msg_type,n,mean_ms,median_ms,p95_ms,mean_bytes"
    assert len(text.splitlines()) == 5
