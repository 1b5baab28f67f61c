import os

import numpy as np
import pytest

from ctrkd import cli, experiment, persist
from ctrkd.config import parse_config_text
from ctrkd.synth import SyntheticSpec, write_synthetic_file

TINY = SyntheticSpec(n_cat=4, vocab=12, n_num=2, latent_dim=2)


def tiny_config(tmp_path, extra="", rows=600, seeds="1"):
    data = tmp_path / "clicks.txt"
    write_synthetic_file(data, rows, seed=3, spec=TINY)
    text = f"""
data.path = clicks.txt
data.numeric_columns = 1-2
data.categorical_columns = 3-6
data.min_count = 2
output.dir = out
teacher.model = fm
teacher.embedding_dim = 4
student.model = dnn
student.embedding_dim = 4
student.hidden = 8
train.batch_size = 200
train.max_epochs = 2
train.patience = 3
train.seeds = {seeds}
distill.tau = 2.0
distill.beta = 0.5
distill.gamma = 0.5
{extra}
"""
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return path


def load_cfg(path):
    return parse_config_text(path.read_text(), base_dir=str(path.parent))


def test_preprocess_writes_artifacts(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path))
    art = experiment.stage_preprocess(cfg)
    out = tmp_path / "out"
    for name in ("vocab.tsv", "train.npz", "val.npz", "test.npz", "data_meta.txt"):
        assert (out / name).exists()
    assert len(art.train) + len(art.val) + len(art.test) == 600
    reloaded = experiment.DataArtifacts.load(str(out))
    assert reloaded.dims == art.dims
    assert reloaded.fingerprint == art.fingerprint


def test_run_produces_report_with_expected_cardinality(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, seeds="1,2,3"))
    report = experiment.run(cfg)
    by_model = {}
    for row in report.rows:
        by_model.setdefault(row.model, []).append(row)
    assert len(by_model["student_plain"]) == 3
    assert len(by_model["student_kd"]) == 3
    assert len(by_model["teacher/fm"]) == 1
    out = tmp_path / "out"
    assert (out / "report.csv").exists()
    assert (out / "report.txt").exists()
    assert (out / "status.txt").read_text().strip() == "ok"
    agg = {a.model: a for a in report.aggregates()}
    assert agg["student_plain"].auc_delta_permille == 0.0


def test_run_twice_is_deterministic(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, seeds="1,2"))
    r1 = experiment.run(cfg)
    r2 = experiment.run(cfg)
    assert [(w.model, w.seed, w.auc, w.logloss) for w in r1.rows] == \
           [(w.model, w.seed, w.auc, w.logloss) for w in r2.rows]


def test_distill_preflight_catches_missing_teachers(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path))
    experiment.stage_preprocess(cfg)
    with pytest.raises(experiment.StageError) as err:
        experiment._run_stage("distill", experiment.stage_distill, cfg)
    assert err.value.stage == "distill"
    # now train teachers but delete the checkpoint behind the meta file
    experiment.stage_teachers_from_disk(cfg)
    ckpt = experiment._read_meta(experiment._teacher_meta_path(cfg.output_dir))[0]["ckpt"]
    os.remove(ckpt)
    with pytest.raises(experiment.StageError):
        experiment._run_stage("distill", experiment.stage_distill, cfg)
    # no student outputs were produced by either failed attempt
    assert not os.path.exists(experiment._student_meta_path(cfg.output_dir))


def test_failed_stage_flags_status(tmp_path):
    cfg_path = tiny_config(tmp_path)
    cfg = load_cfg(cfg_path)
    os.remove(tmp_path / "clicks.txt")
    with pytest.raises(experiment.StageError) as err:
        experiment.run(cfg)
    assert err.value.stage == "preprocess"
    assert (tmp_path / "out" / "status.txt").read_text().startswith("failed: preprocess")


def test_make_ensemble_mode_m_architectures(tmp_path):
    # the 3T combination: three architectures over the same split
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = M\nensemble.teachers = deepfm,dcn,xdeepfm\n"
        "teacher.hidden = 6\nteacher.cross_layers = 2\nteacher.cin_maps = 3\n")))
    art = experiment.stage_preprocess(cfg)
    entries = experiment.make_ensemble(cfg, art)
    assert [e["model"] for e in entries] == \
        ["teacher/deepfm", "teacher/dcn", "teacher/xdeepfm"]
    for e in entries:
        assert os.path.exists(e["ckpt"])
    specs = [persist.load(e["ckpt"]).spec for e in entries]
    assert [s.wide for s in specs] == ["fm", "cross", "cin"]


def test_make_ensemble_mode_m_seed_multiplier(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = M\nensemble.teachers = fm\nensemble.seeds = 5,6\n")))
    art = experiment.stage_preprocess(cfg)
    entries = experiment.make_ensemble(cfg, art)
    assert len(entries) == 2
    a = persist.load(entries[0]["ckpt"])
    b = persist.load(entries[1]["ckpt"])
    assert a.spec == b.spec
    diffs = [not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors]
    assert any(diffs), "different seeds must give different parameters"


def test_make_ensemble_mode_d_partitions(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = D\nensemble.partitions = 3\n")))
    art = experiment.stage_preprocess(cfg)
    entries = experiment.make_ensemble(cfg, art)
    assert len(entries) == 3
    parts = []
    for i in range(3):
        with np.load(tmp_path / "out" / "teachers" / f"fm-p{i}.partition.npz") as z:
            parts.append((set(z["train"].tolist()), set(z["val"].tolist())))
    pool_size = len(art.train) + len(art.val)
    for train_idx, val_idx in parts:
        assert train_idx.isdisjoint(val_idx)
        assert len(train_idx | val_idx) == pool_size  # test rows never enter the pool
    for i in range(3):
        for j in range(i + 1, 3):
            assert parts[i][0] != parts[j][0], "training partitions must differ"


def test_make_ensemble_mode_d_needs_two_partitions(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = D\nensemble.partitions = 1\n")))
    art = experiment.stage_preprocess(cfg)
    with pytest.raises(ValueError):
        experiment.make_ensemble(cfg, art)


def test_evaluate_adds_teacher_average_row(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = M\nensemble.teachers = fm,lr\n")))
    experiment.run(cfg)
    rows = experiment._read_runs_csv(cfg.output_dir)
    names = [r.model for r in rows]
    assert "teachers_avg" in names
    t_rows = [r for r in rows if r.model.startswith("teacher/")]
    avg = next(r for r in rows if r.model == "teachers_avg")
    assert avg.auc == pytest.approx(np.mean([r.auc for r in t_rows]), abs=1e-12)


def test_prediction_average_mode(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra=(
        "ensemble.mode = M\nensemble.teachers = fm,lr\n"
        "report.ensemble_metric = prediction_average\n")))
    experiment.run(cfg)
    rows = experiment._read_runs_csv(cfg.output_dir)
    avg = next(r for r in rows if r.model == "teachers_avg")
    t_rows = [r for r in rows if r.model.startswith("teacher/")]
    # averaging predictions is not the same as averaging metrics
    assert avg.auc != pytest.approx(np.mean([r.auc for r in t_rows]), abs=1e-12)


def test_cotrain_scheme_through_pipeline(tmp_path):
    cfg = load_cfg(tiny_config(tmp_path, extra="distill.scheme = cotrain\n"))
    report = experiment.run(cfg)
    assert any(r.model == "student_kd" for r in report.rows)


def test_cli_full_cycle(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    for verb in ("preprocess", "train-teacher", "distill", "evaluate", "report"):
        assert cli.main([verb, "-c", str(cfg_path)]) == 0, verb
    out = capsys.readouterr().out
    assert "student_kd" in out
    assert "baseline" in out


def test_cli_run_and_overrides(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    assert cli.main(["run", "-c", str(cfg_path), "--set", "train.seeds=4"]) == 0
    meta = experiment._read_meta(str(tmp_path / "out" / "students_meta.csv"))
    assert {int(r["seed"]) for r in meta} == {4}


def test_cli_error_paths(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    assert cli.main(["distill", "-c", str(cfg_path)]) == 1  # no teachers yet
    assert cli.main(["run", "-c", str(cfg_path), "--set", "data.format=parquet"]) == 2
    assert cli.main(["make-ensemble", "-c", str(cfg_path)]) == 2  # no ensemble.mode
    err = capsys.readouterr().err
    assert "stage 'distill'" in err


def test_workers_env_gives_identical_results(tmp_path, monkeypatch):
    cfg = load_cfg(tiny_config(tmp_path, seeds="1,2"))
    experiment.run(cfg)
    serial = experiment._read_runs_csv(cfg.output_dir)
    monkeypatch.setenv(experiment.WORKERS_ENV, "2")
    experiment.run(cfg)
    parallel = experiment._read_runs_csv(cfg.output_dir)
    key = lambda rows: [(r.model, r.seed, r.auc, r.logloss, r.best_epoch) for r in rows]
    assert key(serial) == key(parallel)  # identical numbers, wall time aside
