import json

import pytest

from ttamotion.cli import main, parse_assignments, UsageError
from ttamotion.motion import load_manifest
from ttamotion.network import build_model, get_params, load_checkpoint, params_equal

MINI_SET = ["--set", "channels=8", "--set", "n_shared_blocks=1", "--set", "heads=2", "--set", "head_dim=4",
            "--set", "obs_len=4", "--set", "horizon=2"]
HORIZONS = ["--horizons", "40,80"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["synth", "--out", str(corpus), "--categories", "3", "--subjects", "2", "--seqs-per", "2",
                 "--joints", "3", "--obs-len", "4", "--horizon", "2", "--seed", "1"]) == 0
    ckpt = root / "pre.ckpt"
    assert main(["pretrain", "--data", str(corpus), "--out", str(ckpt), "--epochs", "2", "--batch-size", "4",
                 "--setup", "iii", "--holdout", "C1", *MINI_SET]) == 0
    return root, corpus, ckpt


def run_eval(corpus, ckpt, out, *extra):
    return main(["eval", "--data", str(corpus), "--ckpt", str(ckpt), "--out", str(out), "--setup", "iii",
                 "--holdout", "C1", *HORIZONS, *extra])


# -- config parsing -------------------------------------------------------------------


def test_config_assignments_route_to_sections():
    values = parse_assignments(["# comment", "seed=3", "train.epochs = 7", "alpha=1e-4", ""], "test")
    assert values["train"]["seed"] == 3 and values["meta"]["seed"] == 3
    assert values["train"]["epochs"] == 7 and "epochs" not in values["meta"]
    assert values["meta"]["alpha"] == 1e-4
    with pytest.raises(UsageError):
        parse_assignments(["bogus=1"], "test")
    with pytest.raises(UsageError):
        parse_assignments(["no equals sign"], "test")


# -- synth ------------------------------------------------------------------------------


def test_synth_entry_count_and_determinism(tmp_path, data):
    _, corpus, _ = data
    assert len(load_manifest(corpus).entries) == 12
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--categories", "3", "--subjects", "2", "--seqs-per", "2",
          "--joints", "3", "--obs-len", "4", "--horizon", "2", "--seed", "1"])
    files = sorted(p.relative_to(corpus) for p in corpus.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert all((again / f).read_bytes() == (corpus / f).read_bytes() for f in files)


def test_synth_rejects_zero_categories(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", str(tmp_path / "x"), "--categories", "0"])
    assert info.value.code == 2


# -- pretrain ---------------------------------------------------------------------------


def test_pretrain_zero_epochs_saves_initialisation(tmp_path, data):
    _, corpus, _ = data
    out = tmp_path / "zero.ckpt"
    assert main(["pretrain", "--data", str(corpus), "--out", str(out), "--epochs", "0", "--seed", "5", *MINI_SET]) == 0
    model, _ = load_checkpoint(out)
    fresh = build_model(model.cfg, model.topo, 5)
    assert params_equal(get_params(model), get_params(fresh))


def test_pretrain_missing_manifest(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["pretrain", "--data", str(missing), "--out", str(tmp_path / "p.ckpt")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_pretrain_log_covers_every_epoch(data):
    root, _, _ = data
    rows = [line.split("\t") for line in (root / "pre.ckpt.log").read_text().splitlines()]
    assert {r[0] for r in rows} == {"0", "1"} and all(len(r) == 6 for r in rows)


# -- metatrain --------------------------------------------------------------------------


def test_metatrain_zero_beta_is_bit_identical(tmp_path, data):
    _, corpus, ckpt = data
    out = tmp_path / "m.ckpt"
    assert main(["metatrain", "--data", str(corpus), "--init", str(ckpt), "--out", str(out), "--beta", "0"]) == 0
    assert params_equal(get_params(load_checkpoint(out)[0]), get_params(load_checkpoint(ckpt)[0]))


def test_metatrain_default_rates_logged(tmp_path, data, capsys):
    _, corpus, ckpt = data
    assert main(["metatrain", "--data", str(corpus), "--init", str(ckpt), "--out", str(tmp_path / "m.ckpt"),
                 "--epochs", "0"]) == 0
    line = next(x for x in capsys.readouterr().err.splitlines() if "resolved config: " in x)
    config = json.loads(line.split("resolved config: ", 1)[1])
    assert config["meta"]["alpha"] == 2e-5 and config["meta"]["beta"] == 2e-5


def test_metatrain_zero_inner_steps_trains_primary_only(tmp_path, data):
    _, corpus, ckpt = data
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    common = ["metatrain", "--data", str(corpus), "--init", str(ckpt), "--beta", "1e-4", "--seed", "2"]
    assert main([*common, "--out", str(a), "--inner-steps", "0"]) == 0
    assert main([*common, "--out", str(b), "--alpha", "0"]) == 0
    pa, pb = get_params(load_checkpoint(a)[0]), get_params(load_checkpoint(b)[0])
    assert params_equal(pa, pb)
    assert not params_equal(pa, get_params(load_checkpoint(ckpt)[0]))


def test_metatrain_config_mismatch_reports_diff(tmp_path, data, capsys):
    _, corpus, ckpt = data
    code = main(["metatrain", "--data", str(corpus), "--init", str(ckpt), "--out", str(tmp_path / "m.ckpt"),
                 "--set", "channels=16"])
    assert code == 2
    assert "channels: checkpoint=8 requested=16" in capsys.readouterr().err


# -- eval --------------------------------------------------------------------------------


def test_eval_zero_steps_matches_no_tta(tmp_path, data):
    _, corpus, ckpt = data
    assert run_eval(corpus, ckpt, tmp_path / "a.csv") == 0
    assert run_eval(corpus, ckpt, tmp_path / "b.csv", "--tta", "--steps", "0") == 0
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_eval_default_steps_is_six(tmp_path, data):
    _, corpus, ckpt = data
    assert run_eval(corpus, ckpt, tmp_path / "e.csv", "--tta") == 0
    summary = json.loads((tmp_path / "e.csv.summary.json").read_text())
    assert summary["settings"]["steps"] == 6 and summary["settings"]["tta"] is True


def test_eval_csv_row_count(tmp_path, data):
    _, corpus, ckpt = data
    run_eval(corpus, ckpt, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    body = [line for line in lines[1:] if not line.startswith("*")]
    # C1 holds 2 subjects x 2 sequences; aggregate rows carry a '*' sequence id
    assert len(body) == 4 * 2
    assert len(lines) - 1 > len(body)


def test_eval_unknown_holdout_lists_candidates(tmp_path, data, capsys):
    _, corpus, ckpt = data
    code = main(["eval", "--data", str(corpus), "--ckpt", str(ckpt), "--out", str(tmp_path / "e.csv"),
                 "--setup", "iii", "--holdout", "C9", *HORIZONS])
    assert code == 2
    assert "C1, C2, C3" in capsys.readouterr().err


def test_eval_conflicting_tta_flags_rejected(tmp_path, data):
    _, corpus, ckpt = data
    with pytest.raises(SystemExit) as info:
        run_eval(corpus, ckpt, tmp_path / "e.csv", "--tta", "--no-tta")
    assert info.value.code == 2


# -- predict and gradcheck ------------------------------------------------------------------


def test_predict_writes_forecast_and_report(tmp_path, data):
    _, corpus, ckpt = data
    path, _, _ = load_manifest(corpus).entries[0]
    out, report = tmp_path / "f.mseq", tmp_path / "r.csv"
    assert main(["predict", "--ckpt", str(ckpt), "--input", str(corpus / path), "--out", str(out),
                 "--tta", "--steps", "2", "--report", str(report)]) == 0
    assert out.stat().st_size > 0
    assert len(report.read_text().splitlines()) == 4


def test_gradcheck_passes_and_covers_partitions(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    text = capsys.readouterr().out
    for name in ("shared", "pri_head", "aux1_head", "aux2_head"):
        assert name in text


def test_gradcheck_negative_control():
    assert main(["gradcheck", "--seed", "0", "--corrupt-gradient"]) != 0


# -- determinism -----------------------------------------------------------------------------


def _pipeline(root, corpus):
    root.mkdir()
    # identical file names: the checkpoint archive embeds its own stem
    pre, meta, csv = root / "p.ckpt", root / "m.ckpt", root / "e.csv"
    assert main(["pretrain", "--data", str(corpus), "--out", str(pre), "--epochs", "2", "--seed", "3",
                 "--threads", "1", *MINI_SET]) == 0
    assert main(["metatrain", "--data", str(corpus), "--init", str(pre), "--out", str(meta), "--beta", "1e-4",
                 "--threads", "1"]) == 0
    assert run_eval(corpus, meta, csv, "--tta", "--steps", "2", "--threads", "1") == 0
    return [p.read_bytes() for p in (pre, root / "p.ckpt.log", meta, csv, root / "e.csv.summary.json")]


def test_single_thread_pipeline_is_bit_identical(tmp_path, data):
    _, corpus, _ = data
    assert _pipeline(tmp_path / "a", corpus) == _pipeline(tmp_path / "b", corpus)
