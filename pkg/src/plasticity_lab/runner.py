"""Continual training loop, task-boundary diagnostics and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as dg
from .config import ORACLES, ExperimentConfig
from .network import ParamSet, forward, init_glorot, loss_and_error, loss_gradient, per_sample_gram
from .numerics import RandomStream, sym_eig
from .optim import AdamState, Regularizer, RegularizerSpec, adam_step
from .tasks import Dataset, TaskStream, load_idx, minibatches, subset_and_project, synthetic_dataset, task_view

log = logging.getLogger(__name__)

BASE_COLUMNS = (
    "seed", "task", "task_end_error", "task_end_loss", "avg_online_error", "hessian_erank_rel",
    "feature_erank_rel", "update_norm_l1_avg", "weight_norm_l1", "dormancy_negentropy",
    "grad_overlap", "dist_init_l2", "dist_init_w2",
)
ORACLE_COLUMNS = ("fisher_erank_rel", "gauss_newton_erank_rel", "exact_erank_rel")

# stream ids for the independent random streams of one run
_DATA, _SUBSET, _INIT, _BATCHES, _PROBE, _FISHER = 1, 2, 3, 4, 5, 6

CHECKPOINT_MAGIC = b"PLCK"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    def __init__(self, task: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at task {task}, step {step}")
        self.task = task
        self.step = step


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def fmt(value) -> str:
    if value is None:
        return ""
    return f"{float(value):.9g}"


def csv_columns(config: ExperimentConfig) -> tuple[str, ...]:
    return BASE_COLUMNS + (ORACLE_COLUMNS if config.oracles else ())


def csv_row(config: ExperimentConfig, record: dg.DiagnosticsRecord) -> list[str]:
    row = [str(config.seed), str(record.task)]
    row += [fmt(getattr(record, c)) for c in BASE_COLUMNS[2:]]
    if config.oracles:
        row += [fmt(getattr(record, c)) for c in ORACLE_COLUMNS]
    return row


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "idx":
        base = load_idx(config.images_path, config.labels_path)
    else:
        rng = RandomStream(config.seed, _DATA)
        base = synthetic_dataset(config.synthetic_classes, config.synthetic_per_class, config.synthetic_dim, rng)
    subset = min(config.subset_size, len(base))
    return subset_and_project(base, subset, config.projection_dim, RandomStream(config.seed, _SUBSET))


def probe_indices(config: ExperimentConfig, n: int, task: int) -> np.ndarray:
    m = min(config.probe_batch, n)
    return np.sort(RandomStream(config.seed, _PROBE).child(task).permutation(n)[:m])


def save_checkpoint(path: str, params: ParamSet, adam: AdamState, task: int) -> None:
    """Flat little-endian float64 dump behind a versioned header."""
    header = CHECKPOINT_MAGIC + struct.pack("<IqqQ", CHECKPOINT_VERSION, task, adam.t, params.size)
    body = np.concatenate([params.data, params.init_flat(), adam.m, adam.v]).astype("<f8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str, params: ParamSet, adam: AdamState) -> int:
    """Restore params (including the init snapshot) and Adam state; returns the task index."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = len(CHECKPOINT_MAGIC) + struct.calcsize("<IqqQ")
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < head:
        raise ValueError(f"{path}: not a checkpoint file")
    version, task, t, d = struct.unpack("<IqqQ", raw[4:head])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if d != params.size or len(raw) != head + 32 * d:
        raise ValueError(f"{path}: checkpoint holds {d} parameters, network has {params.size}")
    body = np.frombuffer(raw, dtype="<f8", offset=head).astype(np.float64)
    params.assign_flat(body[:d])
    params.set_snapshot(body[d:2 * d])
    adam.m[:] = body[2 * d:3 * d]
    adam.v[:] = body[3 * d:]
    adam.t = int(t)
    return int(task)


def start_of_task_metrics(config: ExperimentConfig, params: ParamSet, view: Dataset, task: int) -> dict:
    """Curvature metrics on the probe batch before the first update of ``task``."""
    idx = probe_indices(config, len(view), task)
    x, y = view.inputs[idx], view.labels[idx]
    act = config.activation
    gram = per_sample_gram(params, act, x, y)
    m = gram.shape[0]
    ones = np.full(m, 1.0 / m)
    gtg = gram @ ones  # G^T g for the probe-batch gradient g = G 1/M
    g_norm = math.sqrt(max(float(ones @ gtg), 0.0))
    evals, evecs = sym_eig(gram)
    evals = np.clip(evals, 0.0, None)
    out = {
        "hessian_erank_rel": dg.RankReport.from_values(evals, min(params.size, m)).relative,
        "grad_overlap": dg.grad_overlap_from_eig(evals, evecs, gtg, g_norm) if g_norm > 0 else 0.0,
    }
    if "fisher" in config.oracles:
        rng = RandomStream(config.seed, _FISHER).child(task)
        out["fisher_erank_rel"] = dg.fisher_rank(params, act, x, rng).relative
    if "gauss_newton" in config.oracles:
        out["gauss_newton_erank_rel"] = dg.gauss_newton_rank(params, act, x).relative
    if "exact" in config.oracles:
        out["exact_erank_rel"] = dg.exact_rank(params, act, x, y).relative
    return out


def end_of_task_metrics(config: ExperimentConfig, params: ParamSet, view: Dataset, task: int) -> dict:
    act = config.activation
    logits, _ = forward(params, act, view.inputs)
    loss, error = loss_and_error(logits, view.labels)
    idx = probe_indices(config, len(view), task)
    _, cache = forward(params, act, view.inputs[idx])
    phi = cache.representation
    l2, w2 = dg.dist_from_init(params)
    return {
        "task_end_error": error,
        "task_end_loss": loss,
        "weight_norm_l1": dg.weight_norm(params),
        "dormancy_negentropy": dg.dormancy_negentropy(phi),
        "feature_erank_rel": dg.feature_effective_rank(phi).relative,
        "dist_init_l2": l2,
        "dist_init_w2": w2,
    }


def train_task(config: ExperimentConfig, params: ParamSet, adam: AdamState, reg: Regularizer,
               view: Dataset, task: int) -> dict:
    """Run the task's update budget; returns online error and mean update L1 norm."""
    act = config.activation
    batch = min(config.batch_size, len(view))
    rng = RandomStream(config.seed, _BATCHES).child(task)
    online_errors, update_norms = [], []
    step = 0
    for epoch in range(config.epochs_per_task):
        for idx in minibatches(len(view), batch, epoch, rng):
            x, y = view.inputs[idx], view.labels[idx]
            loss, error, grad, _ = loss_gradient(params, act, x, y)
            if not math.isfinite(loss):
                raise NumericalError(task, step, loss)
            online_errors.append(error)
            grad = reg.add_gradient(params, grad, x)
            delta = adam_step(adam, params, grad)
            update_norms.append(float(np.abs(delta).sum()))
            step += 1
    return {
        "avg_online_error": float(np.mean(online_errors)),
        "update_norm_l1_avg": dg.update_norm_avg(update_norms),
    }


def run_experiment(config: ExperimentConfig, write_csv: bool = True) -> RunResult:
    """Train on ``config.num_tasks`` tasks, recording one diagnostics row per task.

    Curvature metrics in row k are measured at the start of task k, before
    its first update; the rest are measured at the end of task k.
    """
    data = build_dataset(config)
    stream = TaskStream(data, config.stream, config.seed)
    layout = (data.dim,) + tuple(config.hidden_widths) + (data.num_classes,)
    params = init_glorot(layout, config.activation, RandomStream(config.seed, _INIT))
    adam = AdamState.zeros(params.size, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    reg = Regularizer(RegularizerSpec(config.regularizer, config.strength), params, config.activation)
    result = RunResult(config)

    first = 0
    out = None
    if write_csv:
        os.makedirs(os.path.dirname(os.path.abspath(config.output)), exist_ok=True)
    if config.resume and config.checkpoint and os.path.exists(config.checkpoint):
        first = load_checkpoint(config.checkpoint, params, adam) + 1
        reg = Regularizer(reg.spec, params, config.activation)
        log.info("resuming from task %d", first)
    if write_csv:
        mode = "a" if first else "w"
        out = open(config.output, mode, newline="", encoding="utf-8")
    try:
        writer = csv.writer(out, lineterminator="\n") if out else None
        if writer and not first:
            writer.writerow(csv_columns(config))
        for task in range(first, config.num_tasks):
            tic = time.perf_counter()
            view = task_view(stream, task)
            if config.reset_adam:
                adam.reset()
            start = start_of_task_metrics(config, params, view, task)
            during = train_task(config, params, adam, reg, view, task)
            end = end_of_task_metrics(config, params, view, task)
            record = dg.DiagnosticsRecord(task=task, **start, **during, **end)
            result.records.append(record)
            result.seconds.append(time.perf_counter() - tic)
            if writer:
                writer.writerow(csv_row(config, record))
                out.flush()
            if config.checkpoint:
                save_checkpoint(config.checkpoint, params, adam, task)
            log.info("task %d error %.4f erank %.3f (%.1fs)", task, record.task_end_error,
                     record.hessian_erank_rel, result.seconds[-1])
    finally:
        if out:
            out.close()
    return result


def _cell_name(reg: str, strength: float, seed: int) -> str:
    return f"{reg}_s{strength:g}_seed{seed}.csv"


def _run_cell(config: ExperimentConfig) -> tuple[str, list[float]]:
    result = run_experiment(config)
    return config.output, [r.task_end_error for r in result.records]


def run_sweep(base: ExperimentConfig, regularizers, strengths, seeds, out_dir: str, workers: int = 1) -> str:
    """One run per (regularizer, strength, seed) cell plus ``summary.csv``.

    The summary holds the mean task-end error over each cell's final 10
    tasks. A failing cell is recorded with its error and the sweep goes on.
    """
    if not regularizers or not strengths or not seeds:
        raise ValueError("sweep grids must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    cells = []
    for reg in regularizers:
        for strength in strengths if reg != "none" else [0.0]:
            for seed in seeds:
                path = os.path.join(out_dir, _cell_name(reg, strength, seed))
                cells.append(base.replace(regularizer=reg, strength=float(strength), seed=int(seed),
                                          output=path, checkpoint="", resume=False))
    outcomes = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, c) for c in cells]
            for cell, fut in zip(cells, futures):
                try:
                    outcomes.append((cell, fut.result(), ""))
                except Exception as exc:  # recorded in the summary
                    outcomes.append((cell, None, f"{type(exc).__name__}: {exc}"))
    else:
        for cell in cells:
            try:
                outcomes.append((cell, _run_cell(cell), ""))
            except Exception as exc:  # recorded in the summary
                outcomes.append((cell, None, f"{type(exc).__name__}: {exc}"))
    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["regularizer", "strength", "seed", "status", "final10_task_end_error", "csv"])
        for cell, res, err in outcomes:
            if res is None:
                writer.writerow([cell.regularizer, fmt(cell.strength), cell.seed, "failed: " + err, "", ""])
            else:
                path, errors = res
                writer.writerow([cell.regularizer, fmt(cell.strength), cell.seed, "ok",
                                 fmt(np.mean(errors[-10:])), os.path.basename(path)])
    return summary


VALIDATION_ESTIMATORS = ("exact", "empirical_fisher", "fisher", "gauss_newton")


def validate_hessian_approx(config: ExperimentConfig) -> tuple[str, list[dict]]:
    """Compare start-of-task relative eranks of the estimators against the exact Hessian.

    ``config.oracles`` selects the extra estimators (all of them when empty);
    the exact Hessian is always computed.
    """
    oracles = config.oracles or ORACLES
    # the exact Hessian is that of the whole task objective, so every estimator sees all task data
    cfg = config.replace(
        oracles=tuple(dict.fromkeys(("exact",) + tuple(oracles))),
        probe_batch=max(config.probe_batch, config.subset_size),
    )
    layout_size = _param_count(cfg)
    if layout_size > dg.DENSE_GUARD:
        raise dg.SizeGuardError(f"{layout_size} parameters exceed the dense-matrix guard of {dg.DENSE_GUARD}")
    result = run_experiment(cfg, write_csv=False)
    rows = []
    for r in result.records:
        ranks = {"exact": r.exact_erank_rel, "empirical_fisher": r.hessian_erank_rel}
        if "fisher" in cfg.oracles:
            ranks["fisher"] = r.fisher_erank_rel
        if "gauss_newton" in cfg.oracles:
            ranks["gauss_newton"] = r.gauss_newton_erank_rel
        row = {"seed": cfg.seed, "task": r.task, "task_end_error": r.task_end_error}
        row.update({f"{k}_erank_rel": v for k, v in ranks.items()})
        row.update({f"{k}_abs_diff": abs(v - ranks["exact"]) for k, v in ranks.items()})
        rows.append(row)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0]) if rows else []
    writer.writerow(header)
    for row in rows:
        writer.writerow([str(v) if k in ("seed", "task") else fmt(v) for k, v in row.items()])
    os.makedirs(os.path.dirname(os.path.abspath(cfg.output)), exist_ok=True)
    with open(cfg.output, "w", newline="", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    return cfg.output, rows


def _param_count(config: ExperimentConfig) -> int:
    d_in = config.projection_dim or (config.synthetic_dim if config.dataset == "synthetic" else 784)
    widths = (d_in,) + tuple(config.hidden_widths) + (config.synthetic_classes if config.dataset == "synthetic" else 10,)
    return sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))
