import json
from pathlib import Path

import pytest

from adasched.cli import EXIT_INVALID, EXIT_OK, main
from adasched.rollout import plan_from_dict, plan_json


def files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root: Path, seed: int = 0) -> Path:
    assert main(["gen", "--seed", str(seed), "--jobs", "2", "--out", str(root)]) == EXIT_OK
    m = str(root / "manifest.json")
    assert main(["train", m, "--num-runs", "3", "--num-steps", "2"]) == EXIT_OK
    assert main(["eval", m]) == EXIT_OK
    assert main(["deploy", m, "--request", "8", "--force"]) == EXIT_OK
    assert main(["report", str(root)]) == EXIT_OK
    return root


def test_gen_full_suite(tmp_path):
    assert main(["gen", "--out", str(tmp_path)]) == EXIT_OK
    reqs = json.loads((tmp_path / "requests.json").read_text())
    jobs = json.loads((tmp_path / "jobs.json").read_text())
    assert len(jobs["jobs"]) == 4 and len(reqs["requests"]) == 81
    assert all("ti" in r for r in reqs["requests"])
    assert reqs["schema"] == "adasched.requests/1"


def test_pipeline_is_byte_identical(tmp_path):
    a = files(pipeline(tmp_path / "a"))
    b = files(pipeline(tmp_path / "b"))
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []
    assert {"report.csv", "qnet.json", "train_log.jsonl", "summary.csv"} <= set(a)
    assert a["report.csv"].startswith(b"# schema: adasched.compare/1")


def test_env_var_overrides_output(tmp_path, monkeypatch):
    assert main(["gen", "--jobs", "1", "--out", str(tmp_path)]) == EXIT_OK
    out = tmp_path / "elsewhere"
    monkeypatch.setenv("ADASCHED_OUT", str(out))
    assert main(["train", str(tmp_path / "manifest.json"), "--num-runs", "1", "--num-steps", "1"]) == EXIT_OK
    assert (out / "qnet.json").is_file() and not (tmp_path / "qnet.json").exists()


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert main(["gen", "--jobs", "2", "--out", str(tmp_path)]) == EXIT_OK
    m = tmp_path / "manifest.json"
    assert main(["eval", str(m)]) == EXIT_INVALID  # no checkpoint yet
    data = json.loads(m.read_text())
    data["train"]["learning_rate"] = 1
    m.write_text(json.dumps(data))
    assert main(["train", str(m)]) == EXIT_INVALID
    m.write_text("{ not json")
    assert main(["train", str(m)]) == EXIT_INVALID
    assert "manifest.json:1:" in capsys.readouterr().err


def test_deploy_refuses_rejected_plan(tmp_path):
    root = tmp_path
    assert main(["gen", "--jobs", "2", "--out", str(root)]) == EXIT_OK
    m = str(root / "manifest.json")
    assert main(["train", m, "--num-runs", "1", "--num-steps", "1"]) == EXIT_OK
    assert main(["eval", m]) == EXIT_OK
    path = root / "plans" / "rl_000.json"
    plan = plan_from_dict(json.loads(path.read_text()))
    for o in plan.outcomes:
        o.finish = o.deadline + 1000
    path.write_text(plan_json(plan))
    assert main(["deploy", m, "--request", "0"]) == EXIT_INVALID
    assert main(["deploy", m, "--request", "0", "--force"]) == EXIT_OK


def test_deploy_zero_interference_matches_prediction(tmp_path):
    root = pipeline(tmp_path)
    assert main(["deploy", str(root / "manifest.json"), "--request", "3", "--intensity", "0", "--seed", "5"]) == 0
    s = json.loads((root / "deploy" / "req003_seed5_summary.json").read_text())
    assert s["deployed_misses"] == s["predicted_misses"]
    header = json.loads((root / "deploy" / "req003_seed5_on.jsonl").read_text().splitlines()[0])
    assert header["schema"] == "adasched.trace/1" and header["safe_mode"] is True


def test_resume_continues_numbering(tmp_path):
    assert main(["gen", "--jobs", "2", "--out", str(tmp_path)]) == EXIT_OK
    m = str(tmp_path / "manifest.json")
    assert main(["train", m, "--num-runs", "2", "--num-steps", "1"]) == EXIT_OK
    assert main(["train", m, "--num-runs", "2", "--num-steps", "2", "--resume"]) == EXIT_OK
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()[1:]
    assert [json.loads(x)["episode"] for x in lines] == list(range(36))


def test_report_lists_deployments(tmp_path, capsys):
    pipeline(tmp_path)
    text = (tmp_path / "summary.csv").read_text()
    assert text.startswith("# schema: adasched.summary/1")
    assert "\n8,0," in text
    with pytest.raises(SystemExit):
        main(["bogus"])
