"""Training loop with early stopping, top-k evaluation, multi-tuple fusion and sweeps."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .aggregation import AVERAGE, aggregate, aggregation_backward
from .errors import DataError, ParameterError, ScriptorError
from .models import (
    ClassifierHead,
    Network,
    NetworkSpec,
    build_head,
    build_network,
    extract_locals,
    locals_backward,
)
from .sampling import derive_seed, make_epoch_plan, next_batches

log = logging.getLogger(__name__)

# writer id -> (N, 1, 64, 64) normalized patches
PatchSet = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class TrainingConfig:
    spec: NetworkSpec = field(default_factory=NetworkSpec)
    aggregation: str = AVERAGE
    k: int | None = None
    n: int = 20
    p: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.9
    # global gradient-norm cap applied before each momentum step; None disables it
    clip_norm: float | None = 1.0
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"tuple size n must be >= 1, got {self.n}")
        if self.patience < 1 or self.max_epochs < 1 or self.p < 1:
            raise ParameterError("patience, max_epochs and p must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError(f"clip_norm must be positive or None, got {self.clip_norm}")


@dataclass
class Model:
    """A trained extractor, its classifier head, and the writer order of the head's rows."""

    net: Network
    head: ClassifierHead
    writers: list[str]
    aggregation: str = AVERAGE
    k: int | None = None

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.head.weight, self.head.bias]

    def logits(self, patches: np.ndarray) -> np.ndarray:
        """Logits for one n-tuple of patches ``(n, 1, 64, 64)``."""
        locals_, _ = extract_locals(self.net, patches)
        g, _ = aggregate(locals_, self.aggregation, self.k)
        return self.head.weight @ g.values + self.head.bias

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_top1: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_top1(self) -> float:
        return max((r.val_top1 for r in self.records), default=float("nan"))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_top1", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.val_top1:.4f}", f"{r.seconds:.3f}"])


@dataclass
class EvalReport:
    k_list: tuple[int, ...]
    # k -> one accuracy (percent) per trial
    per_trial: dict[int, list[float]]

    @property
    def trials(self) -> int:
        return len(next(iter(self.per_trial.values())))

    def mean(self, k: int = 1) -> float:
        return float(np.mean(self.per_trial[k]))

    def var(self, k: int = 1) -> float:
        """Population variance over trials."""
        return float(np.var(self.per_trial[k]))


def _check_sizes(data: PatchSet, need: int, what: str):
    for writer, patches in data.items():
        if len(patches) < need:
            raise DataError(f"writer {writer} has {len(patches)} {what} patches, needs at least {need}")


def new_model(cfg: TrainingConfig, writers: Sequence[str]) -> Model:
    net = build_network(cfg.spec, derive_seed(cfg.seed, 10))
    head = build_head(len(writers), cfg.spec.depth, derive_seed(cfg.seed, 11))
    return Model(net, head, sorted(writers), cfg.aggregation, cfg.k)


def train_step(model: Model, patches: np.ndarray, label: int, state: nn.OptimizerState,
               clip_norm: float | None = None) -> float:
    """One SGD step on a single n-tuple; returns the loss before the update."""
    locals_, caches = extract_locals(model.net, patches)
    g, actx = aggregate(locals_, model.aggregation, model.k)
    logits, lin_cache = nn.linear(g.values, model.head.weight, model.head.bias)
    loss, d_logits = nn.softmax_cross_entropy(logits, label)
    lg = nn.linear_backward(lin_cache, d_logits)
    d_locals = aggregation_backward(actx, lg.d_input)
    grads = locals_backward(model.net, caches, d_locals) + lg.d_params
    if clip_norm is not None:
        grads, _ = nn.clip_by_global_norm(grads, clip_norm)
    nn.sgd_step(model.params, grads, state)
    return loss


def train(cfg: TrainingConfig, train_set: PatchSet, val_set: PatchSet, progress=None):
    """Train until validation top-1 stalls for ``cfg.patience`` epochs.

    Returns ``(best_model, history)`` where ``best_model`` is a copy taken at
    the first epoch reaching the best validation top-1.
    """
    _check_sizes(train_set, cfg.n, "training")
    _check_sizes(val_set, cfg.n, "validation")
    writers = sorted(train_set)
    missing = set(val_set) - set(writers)
    if missing:
        raise DataError(f"validation writers not in training set: {sorted(missing)}")
    model = new_model(cfg, writers)
    label = {w: i for i, w in enumerate(model.writers)}
    state = nn.OptimizerState.for_params(model.params, cfg.learning_rate, cfg.momentum)
    ids = {w: range(len(train_set[w])) for w in writers}

    history = TrainingHistory()
    best_model, best_val, stale = model.copy(), -1.0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        plan = make_epoch_plan(ids, cfg.n, cfg.p, derive_seed(cfg.seed, 20, epoch))
        losses = []
        for it in range(cfg.p):
            for batch in next_batches(plan, it):
                x = train_set[batch.writer][list(batch.patch_ids)]
                losses.append(train_step(model, x, label[batch.writer], state, cfg.clip_norm))
        if not np.all(np.isfinite(losses)):
            raise ScriptorError(f"training diverged in epoch {epoch}; lower the learning rate")
        val = evaluate_topk(model, val_set, cfg.n, (1,), trials=1, seed=derive_seed(cfg.seed, 30, epoch))
        rec = EpochRecord(epoch, float(np.mean(losses)), val.mean(1), time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4f val_top1 %.2f (%.1fs)", epoch, rec.loss, rec.val_top1, rec.seconds)
        if progress:
            progress(rec)
        if rec.val_top1 > best_val:
            best_val, best_model, stale = rec.val_top1, model.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_model, history


def _ranks(scores: np.ndarray, true_idx: int) -> int:
    """0-based rank of ``true_idx``; ties rank the lower index first."""
    order = np.argsort(-scores, kind="stable")
    return int(np.nonzero(order == true_idx)[0][0])


def _trial_rng(seed: int, trial: int):
    return np.random.default_rng(derive_seed(seed, trial))


def _writer_index(model: Model, data: PatchSet) -> dict[str, int]:
    idx = {w: i for i, w in enumerate(model.writers)}
    unknown = [w for w in data if w not in idx]
    if unknown:
        raise DataError(f"writers not enrolled in the model: {sorted(unknown)}")
    return idx


def evaluate_topk(model: Model, eval_set: PatchSet, n: int, k_list=(1, 5, 10), trials: int = 20, seed: int = 0) -> EvalReport:
    """Per trial, one random n-tuple per writer; top-k identification accuracy in percent."""
    _check_sizes(eval_set, n, "evaluation")
    k_list = tuple(sorted(set(k_list)))
    idx = _writer_index(model, eval_set)
    writers = sorted(eval_set)
    per_trial: dict[int, list[float]] = {k: [] for k in k_list}
    for trial in range(trials):
        rng = _trial_rng(seed, trial)
        ranks = []
        for w in writers:
            pick = rng.permutation(len(eval_set[w]))[:n]
            ranks.append(_ranks(model.logits(eval_set[w][pick]), idx[w]))
        ranks = np.array(ranks)
        for k in k_list:
            per_trial[k].append(100.0 * float((ranks < k).mean()))
    return EvalReport(k_list, per_trial)


def fuse_probabilities(prob_vectors: Sequence[np.ndarray], fusion: str = "mean") -> np.ndarray:
    """Combine per-tuple softmax vectors into one score vector.

    ``mean`` averages probabilities; ``vote`` counts per-tuple argmax wins and
    breaks equal counts by the mean probability.
    """
    probs = np.asarray(prob_vectors, dtype=np.float64)
    mean = probs.sum(axis=0) / len(probs)
    if fusion == "mean":
        return mean
    if fusion == "vote":
        votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1]).astype(np.float64)
        return votes + mean / (mean.max() + 1.0)
    raise ParameterError(f"unknown fusion {fusion!r}; expected 'mean' or 'vote'")


@dataclass
class MultiTupleResult:
    # one dict per trial: writer -> predicted writer
    predictions: list[dict[str, str]]
    report: EvalReport


def evaluate_multi_tuple(model: Model, pool: PatchSet, n: int, t: int = 5, seed: int = 0,
                         k_list=(1, 5, 10), trials: int = 20, fusion: str = "mean") -> MultiTupleResult:
    """Fuse ``t`` disjoint n-tuples per writer (cut from one permutation) into one decision."""
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    _check_sizes(pool, n * t, "evaluation")
    k_list = tuple(sorted(set(k_list)))
    idx = _writer_index(model, pool)
    writers = sorted(pool)
    per_trial: dict[int, list[float]] = {k: [] for k in k_list}
    predictions = []
    for trial in range(trials):
        rng = _trial_rng(seed, trial)
        ranks, preds = [], {}
        for w in writers:
            perm = rng.permutation(len(pool[w]))
            if t == 1:
                scores = model.logits(pool[w][perm[:n]])
            else:
                probs = [nn.softmax(model.logits(pool[w][perm[j * n:(j + 1) * n]])) for j in range(t)]
                scores = fuse_probabilities(probs, fusion)
            ranks.append(_ranks(scores, idx[w]))
            preds[w] = model.writers[int(np.argmax(scores))]
        predictions.append(preds)
        ranks = np.array(ranks)
        for k in k_list:
            per_trial[k].append(100.0 * float((ranks < k).mean()))
    return MultiTupleResult(predictions, EvalReport(k_list, per_trial))


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    train: PatchSet
    val: PatchSet
    test: PatchSet

    def subset(self, writers: int | None = None, n_s: int | None = None) -> "Dataset":
        """First ``writers`` writers (sorted) and the first ``n_s`` training patches of each."""
        names = sorted(self.train)
        if writers is not None:
            if writers > len(names):
                raise DataError(f"requested {writers} writers but the dataset has {len(names)}")
            names = names[:writers]
        train = {w: self.train[w][:n_s] if n_s else self.train[w] for w in names}
        return Dataset(train, {w: self.val[w] for w in names}, {w: self.test[w] for w in names})


@dataclass(frozen=True)
class SweepCell:
    n: int
    n_s: int | None
    writers: int | None
    aggregation: str
    k: int | None


@dataclass
class SweepRow:
    cell: SweepCell
    seed: int
    report: EvalReport | None = None
    epochs: int = 0
    error: str | None = None
    writers: int = 0
    n_s: int = 0


@dataclass(frozen=True)
class SweepGrid:
    n: tuple[int, ...] = (20,)
    n_s: tuple[int | None, ...] = (None,)
    writers: tuple[int | None, ...] = (None,)
    aggregation: tuple[str, ...] = (AVERAGE,)
    k: tuple[int | None, ...] = (None,)

    def cells(self) -> list[SweepCell]:
        out = []
        for n, n_s, wr, agg, k in product(self.n, self.n_s, self.writers, self.aggregation, self.k):
            cell = SweepCell(n, n_s, wr, agg, k if agg == "KMA" else None)
            if cell not in out:
                out.append(cell)
        return out


def cell_seed(master: int, index: int) -> int:
    return derive_seed(master, 40, index)


def run_cell(base: TrainingConfig, data: Dataset, cell: SweepCell, seed: int,
             k_list=(1, 5, 10), trials: int = 20) -> SweepRow:
    """Train and evaluate one sweep cell; errors are captured on the row."""
    row = SweepRow(cell, seed)
    try:
        sub = data.subset(cell.writers, cell.n_s)
        row.writers = len(sub.train)
        row.n_s = min(len(v) for v in sub.train.values())
        cfg = replace(base, n=cell.n, aggregation=cell.aggregation, k=cell.k, seed=seed)
        model, history = train(cfg, sub.train, sub.val)
        row.epochs = len(history.records)
        row.report = evaluate_topk(model, sub.test, cell.n, k_list, trials, derive_seed(seed, 50))
    except ScriptorError as exc:
        row.error = str(exc)
        log.warning("sweep cell %s failed: %s", cell, exc)
    return row


def sweep(grid: SweepGrid, base: TrainingConfig, data: Dataset, k_list=(1, 5, 10),
          trials: int = 20, workers: int = 1) -> list[SweepRow]:
    """Train + evaluate every grid cell with its own derived seed."""
    cells = grid.cells()
    seeds = [cell_seed(base.seed, i) for i in range(len(cells))]
    if workers <= 1 or len(cells) == 1:
        return [run_cell(base, data, c, s, k_list, trials) for c, s in zip(cells, seeds)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, base, data, c, s, k_list, trials) for c, s in zip(cells, seeds)]
        return [f.result() for f in futures]


RESULTS_HEADER = ["experiment", "writers", "n", "N_s", "aggregation", "K", "trial",
                  "top1", "top5", "top10", "epochs", "seed"]


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def result_rows(experiment: str, report: EvalReport | None, *, writers, n, n_s, aggregation,
                k, epochs, seed, error: str | None = None) -> list[list[str]]:
    """CSV rows for one report: one per trial, then ``mean`` and ``var`` summaries."""
    base = [experiment, str(writers), str(n), "" if n_s is None else str(n_s), aggregation,
            "" if k is None else str(k)]
    tail = [str(epochs), str(seed)]
    if report is None:
        return [base + ["failed", "", "", ""] + tail]

    def cols(fn):
        return [_fmt(fn(k_)) if k_ in report.per_trial else "" for k_ in (1, 5, 10)]

    rows = [base + [str(t)] + cols(lambda k_: report.per_trial[k_][t]) + tail for t in range(report.trials)]
    rows.append(base + ["mean"] + cols(report.mean) + tail)
    rows.append(base + ["var"] + cols(report.var) + tail)
    return rows


def write_results_csv(path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        w.writerows(rows)


def sweep_rows(experiment: str, rows: Sequence[SweepRow]) -> list[list[str]]:
    out = []
    for r in rows:
        out += result_rows(experiment, r.report, writers=r.writers, n=r.cell.n, n_s=r.n_s,
                           aggregation=r.cell.aggregation, k=r.cell.k, epochs=r.epochs,
                           seed=r.seed, error=r.error)
    return out
