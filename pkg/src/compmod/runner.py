"""Experiment orchestration: datasets from config, the training loop, evaluation, sweeps."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, dumps
from .data import Dataset, batch_iter, gen_split_semantics, load_idx, train_test_split
from .errors import CompatibilityError, FormatError
from .models import (
    ModelParams,
    atomic_write,
    config_hash,
    default_specs,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .probe import knn_eval, linear_probe, spectrum_diagnostics
from .trainer import METRIC_COLUMNS, MetricsRow, TrainState, encode, train_epoch

EVAL_SCHEMA = "compmod.eval/1"
MIXUP_ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9)
LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0)
# linear evaluation probes the encoder output h, not the projector output z
PROBE_FEATURES = "encoder"


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "split_semantics":
        train, test = train_test_split(gen_split_semantics(cfg.split_spec()), d.test_fraction, d.seed)
    else:
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels)
    if d.train_limit is not None:
        train = train.take(np.arange(min(d.train_limit, len(train))))
    if d.test_limit is not None:
        test = test.take(np.arange(min(d.test_limit, len(test))))
    return train, test


def build_specs(cfg: RunConfig, input_dim: int):
    m = cfg.model
    return default_specs(
        input_dim,
        rep_dim=m.rep_dim,
        embed_dim=m.embed_dim,
        encoder_hidden=tuple(m.encoder_hidden),
        projector_hidden=tuple(m.projector_hidden),
        predictor_hidden=None if m.predictor_hidden is None else tuple(m.predictor_hidden),
        fusion=cfg.fusion(),
        base=cfg.loss.base,
        with_head=cfg.loss.compmod_enabled,
    )


def build_state(cfg: RunConfig, input_dim: int) -> TrainState:
    t = cfg.train
    return TrainState(
        init_params(build_specs(cfg, input_dim), t.seed),
        cfg.loss_config(),
        cfg.fusion(),
        lr=t.lr,
        init_seed=t.seed,
        epoch_seed=t.seed,
        ema_momentum=t.ema_momentum,
        compmod=cfg.loss.compmod_enabled,
        bilevel=cfg.loss.bilevel,
        hypergrad=cfg.hypergrad(),
    )


def evaluate(params: ModelParams, train: Dataset, test: Dataset, cfg: RunConfig) -> dict:
    ftr = encode(params, train.x, PROBE_FEATURES)
    fte = encode(params, test.x, PROBE_FEATURES)
    knn = knn_eval(ftr, train.y, fte, test.y, k=cfg.train.knn_k)
    probe = linear_probe(ftr, train.y, fte, test.y, epochs=cfg.train.probe_epochs, lr=cfg.train.probe_lr)
    return {"knn": knn, "probe": probe, "spectrum": spectrum_diagnostics(fte, cfg.loss_config())}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def metrics_csv(rows: list[MetricsRow]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_cell(v) for v in row.as_list()])
    return buf.getvalue().encode()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _checkpoint_extra(cfg: RunConfig, epochs_done: int) -> dict:
    return {"epochs_completed": epochs_done, "seed": cfg.train.seed, "dataset": asdict(cfg.dataset)}


def run_train(cfg: RunConfig, out_dir) -> list[MetricsRow]:
    """Train per config, writing config.json, metrics.csv (per epoch), checkpoint.cmpd and timing.json."""
    out = Path(out_dir)
    atomic_write(out / "config.json", dumps(cfg).encode())
    train, test = load_datasets(cfg)
    state = build_state(cfg, train.dim)
    ops = cfg.augment_ops()
    rows: list[MetricsRow] = []
    timings = []
    atomic_write(out / "metrics.csv", metrics_csv(rows))
    t = cfg.train
    for epoch in range(t.epochs):
        start = time.perf_counter()
        row = train_epoch(state, batch_iter(train, t.batch_size, [t.seed, epoch], ops, cfg.dataset.pairing))
        last = epoch == t.epochs - 1
        # eval_every=0 still evaluates after the final epoch
        if last or (t.eval_every and (epoch + 1) % t.eval_every == 0):
            res = evaluate(state.params, train, test, cfg)
            row.knn_acc = res["knn"].accuracy
            row.probe_acc = res["probe"].accuracy
        elapsed = time.perf_counter() - start
        timings.append(elapsed)
        if cfg.output.record_wallclock:
            row.wallclock_s = elapsed
        rows.append(row)
        atomic_write(out / "metrics.csv", metrics_csv(rows))
    save_checkpoint(out / "checkpoint.cmpd", state.params, asdict(cfg.loss), _checkpoint_extra(cfg, t.epochs))
    atomic_write(out / "timing.json", json.dumps({"epoch_seconds": timings}, indent=2).encode())
    return rows


def validate_eval(obj: dict):
    """Schema check for eval JSON; raises FormatError naming the first problem."""
    def need(cond, what):
        if not cond:
            raise FormatError(f"eval json: {what}")

    need(isinstance(obj, dict), "top level must be an object")
    need(obj.get("schema") == EVAL_SCHEMA, f"schema must be {EVAL_SCHEMA!r}")
    need(obj.get("features") in ("encoder", "projector"), "features must name a network")
    for key in ("knn", "linear_probe"):
        part = obj.get(key)
        need(isinstance(part, dict), f"{key} missing")
        need(isinstance(part.get("accuracy"), float) and 0.0 <= part["accuracy"] <= 1.0, f"{key}.accuracy out of range")
        need(isinstance(part.get("n"), int) and part["n"] > 0, f"{key}.n must be a positive integer")
        need(isinstance(part.get("per_class"), dict), f"{key}.per_class missing")
    need(isinstance(obj.get("knn", {}).get("meta", {}).get("k"), int), "knn.meta.k missing")
    spec = obj.get("spectrum")
    need(isinstance(spec, dict) and {"coding_entropy", "effective_rank"} <= set(spec), "spectrum incomplete")
    need(isinstance(obj.get("loss_config_hash"), str), "loss_config_hash missing")


def run_eval(checkpoint, cfg: RunConfig, out_path) -> dict:
    params, manifest = load_checkpoint(checkpoint)
    train, test = load_datasets(cfg)
    expected = {net: list(spec.widths) for net, spec in build_specs(cfg, train.dim).items()}
    found = {net: list(spec.widths) for net, spec in params.specs.items()}
    if expected != found:
        diff = sorted(k for k in set(expected) | set(found) if expected.get(k) != found.get(k))
        raise CompatibilityError(f"checkpoint widths do not match the config for {', '.join(diff)}")
    res = evaluate(params, train, test, cfg)
    obj = {
        "schema": EVAL_SCHEMA,
        "features": PROBE_FEATURES,
        "checkpoint": str(checkpoint),
        "loss_config_hash": manifest["loss_config_hash"],
        "config_matches_checkpoint": manifest["loss_config_hash"] == config_hash(asdict(cfg.loss)),
        "knn": res["knn"].to_dict(),
        "linear_probe": res["probe"].to_dict(),
        "spectrum": res["spectrum"],
    }
    validate_eval(obj)
    atomic_write(Path(out_path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
    return obj


def ablation_cells(axis: str) -> list[tuple[str, dict]]:
    """``(name, {section: {key: value}})`` for every cell of a sweep axis."""
    if axis == "lambda_grid":
        return [
            (f"l1={l1:g}_l2={l2:g}", {"loss": {"lambda1": l1, "lambda2": l2}})
            for l1 in LAMBDA_GRID
            for l2 in LAMBDA_GRID
        ]
    if axis == "fusion":
        fusion = lambda kind, alpha=None: {"loss": {"fusion": kind, "alpha": alpha, "sample_alpha": False}}
        cells = [("concat_repr", fusion("concat_repr"))]
        cells += [(f"mixup_{a:g}", fusion("mixup", a)) for a in MIXUP_ALPHAS]
        cells.append(("concat_embed", fusion("concat_embed")))
        cells.append(("no_bilevel", {"loss": {"bilevel": False}}))
        return cells
    raise ValueError(f"unknown ablation axis {axis!r}")


def _run_cell(args) -> dict:
    name, cfg, out = args
    rows = run_train(cfg, out)
    last = rows[-1] if rows else MetricsRow(0)
    return {"cell": name, "probe_acc": last.probe_acc, "knn_acc": last.knn_acc}


def run_ablation(cfg: RunConfig, axis: str, out_dir, threads: int | None = None) -> list[dict]:
    out = Path(out_dir)
    cells = ablation_cells(axis)
    jobs = []
    for name, changes in cells:
        cell_cfg = cfg.with_overrides(changes)
        jobs.append((name, cell_cfg, out / axis / name))
    threads = threads or int(os.environ.get("COMPMOD_THREADS", "1") or 1)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    for (name, changes), res in zip(cells, results):
        res["swept"] = json.dumps(changes, sort_keys=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["cell", "swept", "probe_acc", "knn_acc"], lineterminator="\n")
    writer.writeheader()
    for res in results:
        writer.writerow({k: (_cell(v) if k.endswith("_acc") else v) for k, v in res.items()})
    atomic_write(out / f"ablation_{axis}.csv", buf.getvalue().encode())
    return results
