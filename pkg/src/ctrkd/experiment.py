"""Experiment pipeline: preprocess -> teachers -> distill -> evaluate -> report.

Each stage persists its outputs under the config's output directory, so the
CLI verbs can run the stages in separate processes; ``run`` chains them all.
Any stage failure aborts with a stage-tagged error and flags the output
directory as failed so partially written artifacts are never mistaken for a
finished run.

Per-seed student training jobs are independent; setting the CTRKD_WORKERS
environment variable (the only env knob, never a science setting) fans them
out over worker processes with bit-identical results.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import persist
from .config import ExperimentConfig, parse_config_text
from .data import (EncodedDataset, FeatureVocabulary, RandomRatioSplit,
                   encode_rows, read_rows, split_rows)
from .metrics import auc, logloss
from .models import FieldDims, Model, spec_from_preset
from .report import ExperimentReport, ReportRow
from .train import (KD_LOSS_MIN, VAL_AUC_MAX, predict_dataset,
                    train_student_cotrain, train_student_pretrain,
                    train_teacher)

WORKERS_ENV = "CTRKD_WORKERS"

PLAIN_STUDENT = "student_plain"
KD_STUDENT = "student_kd"
TEACHERS_AVG = "teachers_avg"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _run_stage(stage: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as err:
        raise StageError(stage, err) from err


def _write_status(outdir: str, text: str) -> None:
    with open(os.path.join(outdir, "status.txt"), "w", encoding="utf-8") as f:
        f.write(text + "\n")


@dataclass
class DataArtifacts:
    dims: FieldDims
    fingerprint: str
    train: EncodedDataset
    val: EncodedDataset
    test: EncodedDataset

    @classmethod
    def load(cls, outdir: str) -> "DataArtifacts":
        meta = _read_kv(os.path.join(outdir, "data_meta.txt"))
        dims = FieldDims(tuple(int(x) for x in meta["vocab_sizes"].split(",") if x),
                         int(meta["n_numeric"]))
        return cls(dims=dims, fingerprint=meta["fingerprint"],
                   train=EncodedDataset.load_npz(os.path.join(outdir, "train.npz")),
                   val=EncodedDataset.load_npz(os.path.join(outdir, "val.npz")),
                   test=EncodedDataset.load_npz(os.path.join(outdir, "test.npz")))


def _read_kv(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                k, v = line.rstrip("\n").split(" = ", 1)
                out[k] = v
    return out


def _write_kv(path: str, kv: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in kv.items():
            f.write(f"{k} = {v}\n")


def stage_preprocess(cfg: ExperimentConfig) -> DataArtifacts:
    """Read raw rows, split, build the vocabulary on train only, encode."""
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    schema = cfg.table_schema()
    rows = read_rows(cfg.resolve_path("data.path"), schema.delimiter)
    train_rows, val_rows, test_rows = split_rows(rows, cfg.split_strategy())
    vocab = FeatureVocabulary.build(train_rows, schema, cfg["data.min_count"])
    vocab.save(os.path.join(outdir, "vocab.tsv"))
    datasets = [encode_rows(part, schema, vocab)
                for part in (train_rows, val_rows, test_rows)]
    for name, ds in zip(("train", "val", "test"), datasets):
        ds.save_npz(os.path.join(outdir, f"{name}.npz"))
    dims = FieldDims(vocab.sizes(), len(schema.numeric_fields))
    _write_kv(os.path.join(outdir, "data_meta.txt"), {
        "vocab_sizes": ",".join(str(v) for v in dims.vocab_sizes),
        "n_numeric": str(dims.n_numeric),
        "fingerprint": vocab.fingerprint(),
        "rows_train": str(len(datasets[0])),
        "rows_val": str(len(datasets[1])),
        "rows_test": str(len(datasets[2])),
    })
    return DataArtifacts(dims, vocab.fingerprint(), *datasets)


def _teacher_dir(outdir: str) -> str:
    return os.path.join(outdir, "teachers")


def _teacher_meta_path(outdir: str) -> str:
    return os.path.join(outdir, "teachers_meta.csv")


def _write_meta(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["model", "seed", "ckpt",
                                               "best_epoch", "seconds"])
        writer.writeheader()
        writer.writerows(rows)


def _read_meta(path: str) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _train_one_teacher(cfg: ExperimentConfig, art: DataArtifacts, name: str,
                       spec, seed: int, train_ds, val_ds) -> dict:
    hyper = cfg.train_hyper()
    model = Model(spec, art.dims, seed=seed)
    record = train_teacher(model, train_ds, hyper, seed=seed, val_data=val_ds)
    outdir = cfg.output_dir
    os.makedirs(_teacher_dir(outdir), exist_ok=True)
    ckpt = os.path.join(_teacher_dir(outdir), f"{name}.ckpt")
    persist.save(ckpt, model, seed=seed, epoch=record.best_epoch,
                 vocab_fingerprint=art.fingerprint)
    record.to_csv(os.path.join(_teacher_dir(outdir), f"{name}.record.csv"))
    return {"model": f"teacher/{name}", "seed": seed, "ckpt": ckpt,
            "best_epoch": record.best_epoch, "seconds": round(record.total_seconds, 3)}


def stage_teachers(cfg: ExperimentConfig, art: DataArtifacts) -> list[dict]:
    """Train the configured teacher, or a whole ensemble of them."""
    if "ensemble.mode" in cfg.values:
        entries = make_ensemble(cfg, art)
    else:
        spec = cfg.model_spec("teacher")
        name = cfg["teacher.model"]
        entries = [_train_one_teacher(cfg, art, name, spec,
                                      cfg["train.teacher_seed"], art.train, art.val)]
    _write_meta(_teacher_meta_path(cfg.output_dir), entries)
    return entries


def make_ensemble(cfg: ExperimentConfig, art: DataArtifacts) -> list[dict]:
    """Generate teacher checkpoints: mode M varies architectures/seeds on the
    shared split, mode D re-partitions train+val per teacher (same test set)."""
    mode = cfg["ensemble.mode"]
    base_seed = cfg["train.teacher_seed"]
    entries = []
    if mode == "M":
        presets = cfg.get("ensemble.teachers") or (cfg["teacher.model"],)
        seeds = cfg.get("ensemble.seeds") or (base_seed,)
        for preset in presets:
            spec = spec_from_preset(preset,
                                    embedding_dim=cfg["teacher.embedding_dim"],
                                    hidden=cfg["teacher.hidden"],
                                    dropout=cfg["teacher.dropout"],
                                    cross_layers=cfg["teacher.cross_layers"],
                                    cin_maps=cfg["teacher.cin_maps"])
            for seed in seeds:
                name = preset if len(seeds) == 1 else f"{preset}-s{seed}"
                entries.append(_train_one_teacher(cfg, art, name, spec, seed,
                                                  art.train, art.val))
    else:
        partitions = cfg.get("ensemble.partitions", 0)
        if partitions < 2:
            raise ValueError("ensemble.mode = D needs ensemble.partitions >= 2")
        spec = cfg.model_spec("teacher")
        preset = cfg["teacher.model"]
        pool = EncodedDataset.concatenate([art.train, art.val])
        train_frac = len(art.train) / len(pool)
        os.makedirs(_teacher_dir(cfg.output_dir), exist_ok=True)
        for i in range(partitions):
            # fresh random split of the train+val pool; the test set is untouched
            part_seed = cfg["ensemble.partition_seed"] + i
            perm = np.random.default_rng(part_seed).permutation(len(pool))
            cut = int(round(len(pool) * train_frac))
            train_idx, val_idx = np.sort(perm[:cut]), np.sort(perm[cut:])
            np.savez(os.path.join(_teacher_dir(cfg.output_dir),
                                  f"{preset}-p{i}.partition.npz"),
                     train=train_idx, val=val_idx)
            entries.append(_train_one_teacher(cfg, art, f"{preset}-p{i}", spec,
                                              base_seed + i,
                                              pool.subset(train_idx),
                                              pool.subset(val_idx)))
    return entries


def _student_dir(outdir: str) -> str:
    return os.path.join(outdir, "students")


def _student_meta_path(outdir: str) -> str:
    return os.path.join(outdir, "students_meta.csv")


def _load_teachers(cfg: ExperimentConfig, art: DataArtifacts) -> list[tuple[str, Model]]:
    meta = _read_meta(_teacher_meta_path(cfg.output_dir))
    out = []
    for row in meta:
        ckpt = persist.load(row["ckpt"])
        out.append((row["model"], ckpt.build_model(expected_fingerprint=art.fingerprint)))
    return out


def distill_preflight(cfg: ExperimentConfig) -> None:
    """Fail before any training if teacher checkpoints are not in place."""
    meta_path = _teacher_meta_path(cfg.output_dir)
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"no trained teachers found at {meta_path}; "
                                "run the teacher stage first")
    missing = [row["ckpt"] for row in _read_meta(meta_path)
               if not os.path.exists(row["ckpt"])]
    if missing:
        raise FileNotFoundError(f"missing teacher checkpoints: {missing}")


def _distill_seed_job(payload: tuple[str, str, int]) -> list[dict]:
    """Train the per-seed student arms; runs in-process or in a worker."""
    config_text, base_dir, seed = payload
    cfg = parse_config_text(config_text, base_dir)
    outdir = cfg.output_dir
    art = DataArtifacts.load(outdir)
    hyper = cfg.train_hyper()
    os.makedirs(_student_dir(outdir), exist_ok=True)
    rows = []

    if cfg["report.include_plain_student"]:
        plain = Model(cfg.model_spec("student"), art.dims, seed=seed)
        record = train_teacher(plain, art.train, hyper, seed=seed, val_data=art.val)
        name = f"{PLAIN_STUDENT}-s{seed}"
        ckpt = os.path.join(_student_dir(outdir), f"{name}.ckpt")
        persist.save(ckpt, plain, seed=seed, epoch=record.best_epoch,
                     vocab_fingerprint=art.fingerprint)
        record.to_csv(os.path.join(_student_dir(outdir), f"{name}.record.csv"))
        rows.append({"model": PLAIN_STUDENT, "seed": seed, "ckpt": ckpt,
                     "best_epoch": record.best_epoch,
                     "seconds": round(record.total_seconds, 3)})

    dcfg = cfg.distill_config()
    teachers = _load_teachers(cfg, art)
    student = Model(cfg.model_spec("student"), art.dims, seed=seed)
    if dcfg.scheme == "cotrain":
        if len(teachers) != 1:
            raise ValueError("co-train supports exactly one teacher")
        co_teacher = Model(teachers[0][1].spec, art.dims, seed=cfg["train.teacher_seed"])
        _, record = train_student_cotrain(co_teacher, student, dcfg, art.train,
                                          hyper, seed=seed)
        gate = projectors = None
    elif cfg["distill.stop"] == "kd_loss":
        train_ds = (EncodedDataset.concatenate([art.train, art.val])
                    if cfg["distill.merge_val"] else art.train)
        result = train_student_pretrain(student, [m for _, m in teachers], dcfg,
                                        train_ds, hyper, seed=seed,
                                        stop_mode=KD_LOSS_MIN)
        record, gate, projectors = result.record, result.gate, result.projectors
    else:
        result = train_student_pretrain(student, [m for _, m in teachers], dcfg,
                                        art.train, hyper, seed=seed,
                                        val_data=art.val, stop_mode=VAL_AUC_MAX)
        record, gate, projectors = result.record, result.gate, result.projectors

    extras = {}
    if gate is not None:
        extras.update({p.name: p.values for p in gate.parameters()})
    if projectors:
        for proj in projectors:
            extras.update({p.name: p.values for p in proj.parameters()})
    name = f"{KD_STUDENT}-s{seed}"
    ckpt = os.path.join(_student_dir(outdir), f"{name}.ckpt")
    persist.save(ckpt, student, seed=seed, epoch=record.best_epoch,
                 vocab_fingerprint=art.fingerprint, extras=extras)
    record.to_csv(os.path.join(_student_dir(outdir), f"{name}.record.csv"))
    rows.append({"model": KD_STUDENT, "seed": seed, "ckpt": ckpt,
                 "best_epoch": record.best_epoch,
                 "seconds": round(record.total_seconds, 3)})
    return rows


def stage_distill(cfg: ExperimentConfig) -> list[dict]:
    distill_preflight(cfg)
    payloads = [(cfg.serialize(), cfg.base_dir, seed) for seed in cfg.seeds]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_distill_seed_job, payloads))
    else:
        results = [_distill_seed_job(p) for p in payloads]
    rows = [row for group in results for row in group]
    _write_meta(_student_meta_path(cfg.output_dir), rows)
    return rows


def stage_evaluate(cfg: ExperimentConfig) -> list[ReportRow]:
    """Load every checkpoint and score it on the held-out test split."""
    outdir = cfg.output_dir
    art = DataArtifacts.load(outdir)
    rows: list[ReportRow] = []
    teacher_scores = []
    for meta_path in (_teacher_meta_path(outdir), _student_meta_path(outdir)):
        if not os.path.exists(meta_path):
            continue
        for entry in _read_meta(meta_path):
            model = persist.load(entry["ckpt"]).build_model(
                expected_fingerprint=art.fingerprint)
            scores = predict_dataset(model, art.test)
            labels = art.test.labels
            row = ReportRow(entry["model"], int(entry["seed"]),
                            auc(scores, labels), logloss(scores, labels),
                            int(entry["best_epoch"]), float(entry["seconds"]))
            rows.append(row)
            if entry["model"].startswith("teacher/"):
                teacher_scores.append(scores)
    if len(teacher_scores) >= 2:
        labels = art.test.labels
        if cfg["report.ensemble_metric"] == "prediction_average":
            mean_scores = np.mean(teacher_scores, axis=0)
            rows.append(ReportRow(TEACHERS_AVG, 0, auc(mean_scores, labels),
                                  logloss(mean_scores, labels), 0, 0.0))
        else:
            t_rows = [r for r in rows if r.model.startswith("teacher/")]
            rows.append(ReportRow(TEACHERS_AVG, 0,
                                  float(np.mean([r.auc for r in t_rows])),
                                  float(np.mean([r.logloss for r in t_rows])), 0, 0.0))
    _write_runs_csv(outdir, rows)
    return rows


def _write_runs_csv(outdir: str, rows: list[ReportRow]) -> None:
    with open(os.path.join(outdir, "runs.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "seed", "auc", "logloss", "best_epoch", "seconds"])
        for r in rows:
            writer.writerow([r.model, r.seed, repr(r.auc), repr(r.logloss),
                             r.best_epoch, r.seconds])


def _read_runs_csv(outdir: str) -> list[ReportRow]:
    with open(os.path.join(outdir, "runs.csv"), newline="", encoding="utf-8") as f:
        return [ReportRow(r["model"], int(r["seed"]), float(r["auc"]),
                          float(r["logloss"]), int(r["best_epoch"]),
                          float(r["seconds"]))
                for r in csv.DictReader(f)]


def stage_report(cfg: ExperimentConfig, rows: list[ReportRow] | None = None) -> ExperimentReport:
    outdir = cfg.output_dir
    if rows is None:
        rows = _read_runs_csv(outdir)
    report = ExperimentReport(rows, baseline=cfg["report.baseline"])
    with open(os.path.join(outdir, "report.csv"), "w", encoding="utf-8") as f:
        f.write(report.summary_csv())
    with open(os.path.join(outdir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.text_table())
    return report


def run(cfg: ExperimentConfig) -> ExperimentReport:
    """Execute the whole pipeline; exit state recorded in status.txt."""
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    _write_status(outdir, "running")
    try:
        _run_stage("preprocess", stage_preprocess, cfg)
        _run_stage("teachers", stage_teachers_from_disk, cfg)
        _run_stage("distill", stage_distill, cfg)
        rows = _run_stage("evaluate", stage_evaluate, cfg)
        report = _run_stage("report", stage_report, cfg, rows)
    except StageError as err:
        _write_status(outdir, f"failed: {err.stage}")
        raise
    _write_status(outdir, "ok")
    return report


def stage_teachers_from_disk(cfg: ExperimentConfig) -> list[dict]:
    art = DataArtifacts.load(cfg.output_dir)
    return stage_teachers(cfg, art)
