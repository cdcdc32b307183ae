"""Training: optimizers, masked losses, stage runner, scheme registry, grid search.

A "stage" minimizes masked binary cross-entropy on one or more tasks over a
declared trainable scope and returns the parameter snapshot with the best
validation AUROC. Schemes chain stages: optional multilabel pretraining,
an optional full-model source-task stage, then the final target stage whose
scope (all layers, head only, or the last k blocks) defines the approach.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .core import MISSING
from .eval import auroc

__all__ = [
    "OptimizerConfig",
    "SchemeConfig",
    "ArrayDataset",
    "TrainingDiverged",
    "SCHEME_NAMES",
    "SGD_LR_GRID",
    "SGD_MOMENTUM_GRID",
    "bce_loss",
    "masked_multilabel_loss",
    "train_stage",
    "run_scheme",
    "grid_select",
    "default_sgd_grid",
    "write_curves_csv",
]

PROB_CLAMP = 1e-7

SGD_LR_GRID = (1e-3, 1e-2, 1e-1)
SGD_MOMENTUM_GRID = (0.8, 0.9)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the curves recorded so far."""

    def __init__(self, message, curves):
        super().__init__(message)
        self.curves = curves


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer and budget for one training stage."""

    kind: str = "sgd_momentum"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    min_epochs: int = 0
    checkpoint_interval_batches: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    @classmethod
    def adam_default(cls, **kw) -> "OptimizerConfig":
        base = dict(
            kind="adam",
            learning_rate=1e-4,
            beta1=0.9,
            beta2=0.999,
            batch_size=16,
            checkpoint_interval_batches=200,
        )
        base.update(kw)
        return cls(**base)


def default_sgd_grid(**common) -> list:
    """The 3 x 2 learning-rate / momentum grid."""
    return [
        OptimizerConfig(kind="sgd_momentum", learning_rate=lr, momentum=m, **common)
        for lr in SGD_LR_GRID
        for m in SGD_MOMENTUM_GRID
    ]


# ---------------------------------------------------------------------------
# data


@dataclass
class ArrayDataset:
    """Records flattened into arrays; missing labels are NaN."""

    images: np.ndarray
    labels: dict
    image_ids: list
    patient_ids: list

    def __len__(self) -> int:
        return len(self.image_ids)

    @classmethod
    def from_records(cls, records, tasks) -> "ArrayDataset":
        records = list(records)
        images = np.stack([r.pixels for r in records]) if records else np.zeros((0, 0, 0))
        labels = {}
        for t in tasks:
            col = np.full(len(records), np.nan)
            for i, r in enumerate(records):
                v = r.labels.get(t, MISSING)
                if v is not MISSING:
                    col[i] = float(v)
            labels[t] = col
        return cls(
            images=images,
            labels=labels,
            image_ids=[r.image_id for r in records],
            patient_ids=[r.patient_id for r in records],
        )

    def relabel(self, mapping: dict) -> "ArrayDataset":
        return ArrayDataset(self.images, {new: self.labels[old] for new, old in mapping.items()},
                            self.image_ids, self.patient_ids)


# ---------------------------------------------------------------------------
# losses


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped away from 0/1."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def masked_multilabel_loss(predictions: dict, labels: dict) -> float:
    """Sum over tasks of the mean BCE over non-missing labels.

    ``labels`` carries NaN for missing entries; a task with no present labels
    contributes zero.
    """
    total = 0.0
    for task, p in predictions.items():
        y = np.asarray(labels[task], dtype=np.float64)
        m = ~np.isnan(y)
        if m.any():
            total += bce_loss(np.asarray(p)[m], y[m])
    return float(total)


def _loss_and_dlogits(logits: dict, labels: dict):
    """Masked loss plus d(loss)/d(logit) arrays, per task."""
    total = 0.0
    dlogits = {}
    for task, l in logits.items():
        y = labels[task]
        m = ~np.isnan(y)
        dl = np.zeros_like(l)
        if m.any():
            p = M.sigmoid(l[m])
            total += bce_loss(p, y[m])
            dl[m] = (p - y[m]) / m.sum()
        dlogits[task] = dl
    return total, dlogits


# ---------------------------------------------------------------------------
# optimizers


class _SgdMomentum:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate
        self.mu = cfg.momentum
        self.velocity = {}

    def step(self, path: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        v = self.velocity.get(path, 0.0)
        v = self.mu * v - self.lr * grad
        self.velocity[path] = v
        return param + v


class _Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate
        self.b1, self.b2 = cfg.beta1, cfg.beta2
        self.eps = 1e-8
        self.m, self.v, self.t = {}, {}, {}

    def step(self, path: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        t = self.t.get(path, 0) + 1
        m = self.b1 * self.m.get(path, 0.0) + (1 - self.b1) * grad
        v = self.b2 * self.v.get(path, 0.0) + (1 - self.b2) * grad * grad
        self.t[path], self.m[path], self.v[path] = t, m, v
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(cfg: OptimizerConfig):
    return _Adam(cfg) if cfg.kind == "adam" else _SgdMomentum(cfg)


# ---------------------------------------------------------------------------
# stage runner


def _check_trainable_labels(data: ArrayDataset, tasks) -> None:
    for t in tasks:
        y = data.labels[t]
        present = y[~np.isnan(y)]
        if present.size == 0 or np.unique(present).size < 2:
            raise ValueError(f"single-class training labels for task {t!r}")


def _mean_auroc(probs: dict, labels: dict) -> float:
    scores = []
    for t, p in probs.items():
        y = labels[t]
        m = ~np.isnan(y)
        if m.any() and np.unique(y[m]).size == 2:
            scores.append(auroc(np.asarray(p)[m], y[m].astype(int)))
    return float(np.mean(scores)) if scores else float("nan")


def train_stage(
    state: M.ModelState,
    train: ArrayDataset,
    val: ArrayDataset,
    tasks,
    optimizer: OptimizerConfig,
    tuned_blocks: int | None = None,
    tune_heads: bool = True,
    stage_name: str = "stage",
):
    """Minimize masked BCE on ``tasks``; return (best-validation state, curves).

    The trainable scope (last ``tuned_blocks`` encoder blocks, plus heads when
    ``tune_heads``) is applied before any step. The returned state is the
    snapshot with the best mean validation AUROC; curves record per-epoch
    train/validation loss and AUROC plus any interval checkpoints.
    """
    tasks = [tasks] if isinstance(tasks, str) else list(tasks)
    if len(train) == 0:
        raise ValueError("empty training data")
    for t in tasks:
        if t not in state.heads:
            raise KeyError(f"no head for task {t!r}")
    k = state.spec.n_blocks if tuned_blocks is None else tuned_blocks
    state = M.set_trainable(state, k, tune_heads)
    _check_trainable_labels(train, tasks)

    curves = {"epochs": [], "checkpoints": [], "stage": stage_name, "tasks": tasks}
    if optimizer.max_epochs == 0:
        out = state.copy()
        curves["best"] = {"metric": float("nan"), "where": "init"}
        out.provenance.append(_provenance_entry(stage_name, tasks, state, optimizer, 0, None, None))
        return out, curves

    head_only = not any(state.trainable_blocks) and state.trainable_heads
    opt = _make_optimizer(optimizer)
    best = {"state": state.copy(), "metric": -np.inf, "where": "init"}
    n = len(train)

    feats_train = feats_val = None
    if head_only:
        feats_train = M.features(state, train.images)
        feats_val = M.features(state, val.images) if len(val) else None

    def val_metric(st):
        if len(val) == 0:
            return float("nan")
        if head_only:
            logits = M.head_logits(st, feats_val, tasks)
        else:
            logits = M.head_logits(st, M.features(st, val.images), tasks)
        probs = {t: M.sigmoid(l) for t, l in logits.items()}
        return _mean_auroc(probs, val.labels)

    def consider(st, where):
        metric = val_metric(st)
        if np.isfinite(metric) and metric > best["metric"]:
            best["state"] = st.copy()
            best["metric"] = metric
            best["where"] = where
        return metric

    cur = state.copy()
    global_batch = 0
    epochs_since_best = 0
    stop = False
    for epoch in range(optimizer.max_epochs):
        rng = np.random.default_rng([optimizer.seed, epoch])
        order = rng.permutation(n)
        epoch_probs = {t: np.full(n, np.nan) for t in tasks}
        losses = []
        for start in range(0, n, optimizer.batch_size):
            idx = order[start : start + optimizer.batch_size]
            if head_only:
                fb = feats_train[idx]
                logits = M.head_logits(cur, fb, tasks)
                batch_labels = {t: train.labels[t][idx] for t in tasks}
                loss, dlogits = _loss_and_dlogits(logits, batch_labels)
                new_heads = {}
                for t in tasks:
                    dl = dlogits[t]
                    h = cur.heads[t]
                    new_heads[t] = {
                        "w": opt.step(f"head.{t}.w", h["w"], fb.T @ dl),
                        "b": opt.step(f"head.{t}.b", h["b"], np.asarray(dl.sum())),
                    }
                nxt = cur.copy()
                nxt.heads.update(new_heads)
                cur = nxt
            else:
                logits, cache = M.forward_cached(cur, train.images[idx], tasks)
                batch_labels = {t: train.labels[t][idx] for t in tasks}
                loss, dlogits = _loss_and_dlogits(logits, batch_labels)
                bgrads, hgrads = M.backward_from_logits(cur, cache, dlogits)
                nxt = cur.copy()
                for i, blk in enumerate(cur.blocks):
                    if cur.trainable_blocks[i]:
                        nxt.blocks[i] = {
                            "W": opt.step(f"block{i}.W", blk["W"], bgrads[i]["dW"]),
                            "b": opt.step(f"block{i}.b", blk["b"], bgrads[i]["db"]),
                        }
                if cur.trainable_heads:
                    for t in tasks:
                        h = cur.heads[t]
                        nxt.heads[t] = {
                            "w": opt.step(f"head.{t}.w", h["w"], hgrads[t]["dw"]),
                            "b": opt.step(f"head.{t}.b", h["b"], hgrads[t]["db"]),
                        }
                cur = nxt
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {start // optimizer.batch_size}",
                    curves,
                )
            losses.append(loss)
            for t in tasks:
                p = M.sigmoid(logits[t])
                epoch_probs[t][idx] = p
            global_batch += 1
            if (
                optimizer.checkpoint_interval_batches
                and global_batch % optimizer.checkpoint_interval_batches == 0
            ):
                metric = consider(cur, f"batch{global_batch}")
                curves["checkpoints"].append({"batch": global_batch, "val_auroc": metric})

        train_loss = float(np.mean(losses))
        train_auroc = _mean_auroc(epoch_probs, train.labels)
        prev_best = best["metric"]
        val_auroc = consider(cur, f"epoch{epoch}")
        val_loss = float("nan")
        if len(val):
            if head_only:
                logits = M.head_logits(cur, feats_val, tasks)
            else:
                logits = M.head_logits(cur, M.features(cur, val.images), tasks)
            probs = {t: M.sigmoid(l) for t, l in logits.items()}
            val_loss = masked_multilabel_loss(probs, val.labels)
        curves["epochs"].append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "train_auroc": train_auroc,
                "val_loss": val_loss,
                "val_auroc": val_auroc,
            }
        )
        if best["metric"] > prev_best:
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if (
                len(val)
                and epoch + 1 >= optimizer.min_epochs
                and epochs_since_best >= optimizer.patience
            ):
                stop = True
        if stop:
            break

    out = best["state"] if len(val) else cur
    out = out.copy()
    curves["best"] = {"metric": best["metric"], "where": best["where"]}
    out.provenance.append(
        _provenance_entry(
            stage_name, tasks, state, optimizer, len(curves["epochs"]), best["metric"], best["where"]
        )
    )
    return out, curves


def _provenance_entry(stage_name, tasks, state, optimizer, epochs, metric, where):
    return {
        "stage": stage_name,
        "tasks": list(tasks),
        "tuned_blocks": int(sum(state.trainable_blocks)),
        "tune_heads": bool(state.trainable_heads),
        "optimizer": optimizer.kind,
        "learning_rate": optimizer.learning_rate,
        "batch_size": optimizer.batch_size,
        "epochs_run": epochs,
        "best_val_auroc": None if metric is None or not np.isfinite(metric) else float(metric),
        "selected": where,
    }


# ---------------------------------------------------------------------------
# schemes (pretraining / fine-tuning approaches)


SCHEME_NAMES = ("all_layers", "all_layers_mc", "last_layer_mc", "last_layer_mc_a", "multitask")


@dataclass(frozen=True)
class SchemeConfig:
    """Which stages run and what scope each stage tunes.

    ``pretrain_stages`` is a tuple of (dataset role, scope); ``final_stage``
    is (dataset role, scope). Scope is "all", "head", or an integer count of
    tuned trailing blocks (heads always tuned with an integer scope).
    """

    name: str
    pretrain_stages: tuple
    final_stage: tuple

    @classmethod
    def named(cls, name: str, tuned_blocks: int | None = None) -> "SchemeConfig":
        if name == "all_layers":
            return cls(name, (), ("target", "all"))
        if name == "all_layers_mc":
            return cls(name, (("multilabel", "all"),), ("target", "all"))
        if name == "last_layer_mc":
            return cls(name, (("multilabel", "all"),), ("target", "head"))
        if name == "last_layer_mc_a":
            return cls(name, (("multilabel", "all"), ("source", "all")), ("target", "head"))
        if name == "multitask":
            return cls(name, (), ("source+target", "all"))
        if name == "blockwise":
            if tuned_blocks is None:
                raise ValueError("blockwise scheme needs tuned_blocks")
            return cls(
                f"blockwise_{tuned_blocks}",
                (("multilabel", "all"), ("source", "all")),
                ("target", int(tuned_blocks)),
            )
        raise ValueError(f"unknown scheme {name!r}")

    def required_roles(self):
        return [role for role, _ in self.pretrain_stages] + [self.final_stage[0]]


def _scope_args(scope, n_blocks: int):
    if scope == "all":
        return n_blocks, True
    if scope == "head":
        return 0, True
    return int(scope), True


def run_scheme(
    scheme: SchemeConfig,
    datasets: dict,
    spec: M.ModelSpec,
    seed: int,
    stage_optimizers: dict | None = None,
    pretrain_restarts: int = 3,
):
    """Execute a scheme's stages in order; returns (final state, info).

    ``datasets`` maps roles ("multilabel", "source", "target",
    "source+target") to dicts with "train", "val" (ArrayDataset) and "tasks".
    Multilabel pretraining restarts from ``pretrain_restarts`` random
    initializations and keeps the restart whose best checkpoint has the top
    mean validation AUROC; source-task heads are discarded after their stage.
    """
    stage_optimizers = dict(stage_optimizers or {})
    for role in scheme.required_roles():
        if role not in datasets:
            raise ValueError(f"scheme {scheme.name!r} needs dataset role {role!r}")

    info = {"scheme": scheme.name, "seed": seed, "stages": []}
    state = None

    for role, scope in scheme.pretrain_stages:
        ds = datasets[role]
        opt = stage_optimizers.get(role) or (
            OptimizerConfig.adam_default(seed=seed) if role == "multilabel" else OptimizerConfig(seed=seed)
        )
        k, th = _scope_args(scope, spec.n_blocks)
        if role == "multilabel":
            candidates = []
            for r in range(pretrain_restarts):
                st = M.init_state(spec, ds["tasks"], seed=_derive(seed, 101 + r))
                M.assert_head_capacity(st)
                st, curves = train_stage(
                    st, ds["train"], ds["val"], ds["tasks"],
                    replace(opt, seed=_derive(seed, 201 + r)),
                    tuned_blocks=k, tune_heads=th, stage_name=f"pretrain_r{r}",
                )
                candidates.append((st, curves))
            metrics = [c[1]["best"]["metric"] for c in candidates]
            pick = int(np.nanargmax(metrics))
            state, curves = candidates[pick]
            info["stages"].append(
                {"stage": "pretrain", "role": role, "restart_metrics": [float(m) for m in metrics],
                 "picked_restart": pick, "curves": curves}
            )
            for t in ds["tasks"]:
                state = M.drop_head(state, t)
        else:
            if state is None:
                state = M.init_state(spec, [], seed=_derive(seed, 100))
            task = _single_task(ds)
            state = M.attach_head(state, task)
            M.assert_head_capacity(state)
            state, curves = train_stage(
                state, ds["train"], ds["val"], task,
                replace(opt, seed=_derive(seed, 300)),
                tuned_blocks=k, tune_heads=th, stage_name=role,
            )
            info["stages"].append({"stage": role, "role": role, "curves": curves})
            state = M.drop_head(state, task)

    role, scope = scheme.final_stage
    ds = datasets[role]
    opt = stage_optimizers.get("final") or stage_optimizers.get(role) or OptimizerConfig(seed=seed)
    k, th = _scope_args(scope, spec.n_blocks)
    if state is None:
        state = M.init_state(spec, [], seed=_derive(seed, 100))
    tasks = list(ds["tasks"]) if not isinstance(ds["tasks"], str) else [ds["tasks"]]
    if len(tasks) > 1:
        state = M.attach_multitask_heads(state, tasks)
    else:
        state = M.attach_head(state, tasks[0])
    M.assert_head_capacity(state)
    state, curves = train_stage(
        state, ds["train"], ds["val"], tasks,
        replace(opt, seed=_derive(seed, 400)),
        tuned_blocks=k, tune_heads=th, stage_name="final",
    )
    info["stages"].append({"stage": "final", "role": role, "curves": curves})
    info["final_hash"] = M.params_hash(state)
    return state, info


def _single_task(ds) -> str:
    tasks = ds["tasks"]
    if isinstance(tasks, str):
        return tasks
    if len(tasks) != 1:
        raise ValueError(f"expected a single task, got {tasks}")
    return tasks[0]


def _derive(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# hyperparameter grid


def grid_select(
    state: M.ModelState,
    train: ArrayDataset,
    val: ArrayDataset,
    tasks,
    grid,
    tuned_blocks: int | None = None,
    tune_heads: bool = True,
):
    """Train one copy per config; return (best config, per-config table).

    Best = highest validation AUROC; ties break toward the smaller learning
    rate, then the smaller momentum.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    table = []
    for cfg in grid:
        _, curves = train_stage(
            state.copy(), train, val, tasks, cfg,
            tuned_blocks=tuned_blocks, tune_heads=tune_heads, stage_name="grid",
        )
        table.append({"config": cfg, "val_auroc": float(curves["best"]["metric"])})
    ranked = sorted(
        table,
        key=lambda row: (
            -(row["val_auroc"] if np.isfinite(row["val_auroc"]) else -np.inf),
            row["config"].learning_rate,
            row["config"].momentum,
        ),
    )
    return ranked[0]["config"], table


def write_curves_csv(curves: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_auroc", "val_loss", "val_auroc"])
        for row in curves["epochs"]:
            writer.writerow(
                [row["epoch"], row["train_loss"], row["train_auroc"], row["val_loss"], row["val_auroc"]]
            )
