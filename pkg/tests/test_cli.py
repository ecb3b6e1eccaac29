import json

import pytest

from sftmix_lab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from sftmix_lab.trainer import read_config, read_metrics

SMALL = ["--epochs", "1", "--batch", "8", "--checkpoints", "2", "--heads", "2",
         "--d-ff", "32", "--max-seq-len", "32"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    """Small end-to-end pipeline: data, reference run, dynamics, split."""
    root = tmp_path_factory.mktemp("lab")
    assert run("gen-data", "--out", root / "train.jsonl", "--num", 32, "--max-len", 6) == EXIT_OK
    assert run("gen-data", "--out", root / "heldout.jsonl", "--num", 16, "--max-len", 6,
               "--heldout") == EXIT_OK
    assert run("train", "--recipe", "ntp", "--data", root / "train.jsonl", "--out", root / "ref",
               "--d-model", 16, *SMALL) == EXIT_OK
    assert run("dynamics", "--run", root / "ref", "--data", root / "train.jsonl",
               "--out", root / "conf.jsonl") == EXIT_OK
    assert run("split", "--confidence", root / "conf.jsonl", "--out", root / "split.json") == EXIT_OK
    return root


def test_gen_data_is_reproducible(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a.jsonl", "--num", 64) == EXIT_OK
    assert run("gen-data", "--out", tmp_path / "b.jsonl", "--num", 64) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_gen_data_odd_count_is_usage_error(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "a.jsonl", "--num", 2047) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_gen_data_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("SFTMIX_SEED", "3")
    run("gen-data", "--out", tmp_path / "env.jsonl", "--num", 16)
    monkeypatch.delenv("SFTMIX_SEED")
    run("gen-data", "--out", tmp_path / "flag.jsonl", "--num", 16, "--seed", 3)
    assert (tmp_path / "env.jsonl").read_bytes() == (tmp_path / "flag.jsonl").read_bytes()


def test_pipeline_outputs(lab):
    lines = (lab / "conf.jsonl").read_text().splitlines()
    assert len(lines) == 32
    assert len(json.loads(lines[0])["perplexities"]) == 2
    s = json.loads((lab / "split.json").read_text())
    assert len(s["confident"]) == len(s["unconfident"]) == 16


def test_mixup_recipe_without_split_is_usage_error(lab, capsys):
    code = run("train", "--recipe", "sftmix", "--data", lab / "train.jsonl", "--out",
               lab / "nosplit", "--d-model", 16, *SMALL)
    assert code == EXIT_USAGE
    assert "--split" in capsys.readouterr().err


def test_unknown_recipe_rejected_by_parser(lab):
    with pytest.raises(SystemExit) as exc:
        run("train", "--recipe", "bogus", "--data", lab / "train.jsonl", "--out", lab / "x")
    assert exc.value.code == 2


def test_eval_missing_run_dir(lab):
    assert run("eval", "--run", lab / "nope", "--data", lab / "heldout.jsonl") == EXIT_USAGE


def test_check_command_passes(capsys):
    assert run("check") == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_check_unknown_suite():
    assert run("check", "--only", "nonsense") == EXIT_USAGE


def test_config_file_then_flag_override(lab, tmp_path, monkeypatch):
    conf = tmp_path / "cfg.json"
    conf.write_text(json.dumps({"mu": 0.5, "seed": 4, "learning_rate": 1e-3}))
    monkeypatch.setenv("SFTMIX_SEED", "99")
    out = tmp_path / "run"
    assert run("train", "--recipe", "sftmix", "--config", conf, "--mu", 0.1, "--data",
               lab / "train.jsonl", "--split", lab / "split.json", "--out", out,
               "--d-model", 16, *SMALL) == EXIT_OK
    cfg = read_config(out)
    assert cfg.mu == 0.1 and cfg.seed == 4 and cfg.learning_rate == 1e-3


def test_weak_reference_strong_target_report(lab, capsys):
    # split from a d_model=16 reference feeds a d_model=32 target
    for name, recipe in [("ntp", "ntp"), ("sftmix", "sftmix")]:
        assert run("train", "--recipe", recipe, "--data", lab / "train.jsonl", "--split",
                   lab / "split.json", "--out", lab / name, "--d-model", 32, *SMALL) == EXIT_OK
        assert run("eval", "--run", lab / name, "--data", lab / "heldout.jsonl") == EXIT_OK
    assert read_config(lab / "sftmix").model.d_model == 32
    capsys.readouterr()
    code = run("report", "--runs", f"{lab / 'ntp'},{lab / 'sftmix'}", "--out", lab / "report.json")
    assert code == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 4
    report = json.loads((lab / "report.json").read_text())
    assert [r["recipe"] for r in report["rows"]] == ["ntp", "sftmix"]
    assert (lab / "report_loss.png").exists() and (lab / "report_perplexity.png").exists()


def test_report_flags_inconsistent_run(lab, tmp_path):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(lab / "ref", bad)
    run("eval", "--run", bad, "--data", lab / "heldout.jsonl")
    rows = read_metrics(bad)
    rows[0]["loss_total"] += 1.0
    (bad / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert run("report", "--runs", bad, "--out", tmp_path / "r.json") == EXIT_FAIL


def test_composition_and_embed(lab):
    assert run("composition", "--split", lab / "split.json", "--data", lab / "train.jsonl",
               "--out", lab / "comp.json") == EXIT_OK
    comp = json.loads((lab / "comp.json").read_text())
    assert sum(comp["fractions"]["confident"].values()) == pytest.approx(1.0)
    assert run("embed", "--run", lab / "ref", "--data", lab / "train.jsonl",
               "--out", lab / "emb.jsonl") == EXIT_OK
    assert len((lab / "emb.jsonl").read_text().splitlines()) == 32
    assert run("embed", "--run", lab / "ref", "--data", lab / "train.jsonl",
               "--out", lab / "emb.jsonl", "--checkpoint", 9) == EXIT_USAGE
