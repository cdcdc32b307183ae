import math

import numpy as np
import pytest

from shortcutlab import model as M
from shortcutlab.core import ImageRecord
from shortcutlab.train import (
    ArrayDataset,
    OptimizerConfig,
    SchemeConfig,
    TrainingDiverged,
    bce_loss,
    default_sgd_grid,
    grid_select,
    masked_multilabel_loss,
    run_scheme,
    train_stage,
)


def _dataset(images, labels_by_task):
    n = len(images)
    return ArrayDataset(
        images=np.asarray(images, dtype=np.float64),
        labels={t: np.asarray(v, dtype=np.float64) for t, v in labels_by_task.items()},
        image_ids=[f"i{k}" for k in range(n)],
        patient_ids=[f"p{k}" for k in range(n)],
    )


def _separable_data(n=24, side=16, seed=0):
    """Constant-intensity images: brightness alone separates the classes."""
    rng = np.random.default_rng(seed)
    levels = np.concatenate([rng.uniform(0.1, 0.35, n // 2), rng.uniform(0.65, 0.9, n - n // 2)])
    labels = (levels > 0.5).astype(float)
    order = rng.permutation(n)
    images = np.stack([np.full((side, side), lv) for lv in levels[order]])
    return _dataset(images, {"chf": labels[order]})


# ---------------------------------------------------------------------------
# losses


def test_all_missing_loss_is_zero():
    preds = {"a": np.array([0.3, 0.8])}
    labels = {"a": np.array([np.nan, np.nan])}
    assert masked_multilabel_loss(preds, labels) == 0.0


def test_perfect_predictions_near_zero_loss():
    preds = {"a": np.array([1 - 1e-7, 1e-7])}
    labels = {"a": np.array([1.0, 0.0])}
    assert masked_multilabel_loss(preds, labels) < 1e-5


def test_half_probability_is_ln2():
    preds = {"a": np.array([0.5])}
    labels = {"a": np.array([1.0])}
    assert masked_multilabel_loss(preds, labels) == pytest.approx(math.log(2), abs=1e-12)


def test_multitask_loss_is_sum_of_single_task_losses():
    rng = np.random.default_rng(0)
    p1, p2 = rng.uniform(0.01, 0.99, 50), rng.uniform(0.01, 0.99, 50)
    y1 = rng.integers(0, 2, 50).astype(float)
    y2 = rng.integers(0, 2, 50).astype(float)
    y1[rng.uniform(size=50) < 0.2] = np.nan
    y2[rng.uniform(size=50) < 0.2] = np.nan
    joint = masked_multilabel_loss({"a": p1, "b": p2}, {"a": y1, "b": y2})
    parts = masked_multilabel_loss({"a": p1}, {"a": y1}) + masked_multilabel_loss({"b": p2}, {"b": y2})
    assert joint == pytest.approx(parts, abs=1e-9)


def test_bce_clamps_extremes():
    assert np.isfinite(bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])))


# ---------------------------------------------------------------------------
# train_stage


def _spec():
    return M.ModelSpec(image_side=16, block_channels=(8, 16))


def test_zero_epochs_leaves_state_unchanged():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=0)
    before = M.params_hash(state)
    out, curves = train_stage(state, data, data, "chf", OptimizerConfig(max_epochs=0))
    assert M.params_hash(out) == before
    assert curves["epochs"] == []


def test_head_only_stage_freezes_encoder_bits():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=1)
    enc_before = M.params_hash(state, include_heads=False)
    out, _ = train_stage(
        state, data, data, "chf",
        OptimizerConfig(learning_rate=0.5, max_epochs=5, batch_size=8),
        tuned_blocks=0, tune_heads=True,
    )
    assert M.params_hash(out, include_heads=False) == enc_before
    assert M.params_hash(out) != M.params_hash(state)


def test_partial_freeze_keeps_early_blocks_bit_identical():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=2)
    first_before = M.params_hash(state, blocks=[0], include_heads=False)
    out, _ = train_stage(
        state, data, data, "chf",
        OptimizerConfig(learning_rate=0.1, max_epochs=3, batch_size=8),
        tuned_blocks=1, tune_heads=True,
    )
    assert M.params_hash(out, blocks=[0], include_heads=False) == first_before
    assert M.params_hash(out, blocks=[1], include_heads=False) != M.params_hash(
        state, blocks=[1], include_heads=False
    )


def test_separable_features_reach_perfect_training_auroc():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=3)
    out, curves = train_stage(
        state, data, data, "chf",
        OptimizerConfig(learning_rate=1.0, max_epochs=200, patience=200, batch_size=24),
        tuned_blocks=0, tune_heads=True,
    )
    assert curves["epochs"][-1]["train_auroc"] == 1.0


def test_head_only_fast_path_matches_logistic_regression_oracle():
    # independent oracle: plain SGD-momentum logistic regression on the
    # frozen features must match the head-only training path bit for bit
    data = _separable_data(n=16)
    state = M.init_state(_spec(), ["chf"], seed=4)
    cfg = OptimizerConfig(learning_rate=0.3, momentum=0.9, max_epochs=3, batch_size=4, patience=99)
    out, _ = train_stage(state, data, ArrayDataset(np.zeros((0, 16, 16)), {"chf": np.zeros(0)}, [], []),
                         "chf", cfg, tuned_blocks=0, tune_heads=True)

    feats = M.features(state, data.images)
    w = state.heads["chf"]["w"].copy()
    b = state.heads["chf"]["b"].copy()
    vw, vb = 0.0, 0.0
    y = data.labels["chf"]
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = feats[idx] @ w + b
            p = 1 / (1 + np.exp(-logits))
            dl = (p - y[idx]) / len(idx)
            gw, gb = feats[idx].T @ dl, dl.sum()
            vw = cfg.momentum * vw - cfg.learning_rate * gw
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            w, b = w + vw, b + vb
    assert np.allclose(out.heads["chf"]["w"], w, atol=1e-12)
    assert np.allclose(out.heads["chf"]["b"], b, atol=1e-12)


def test_single_class_labels_error():
    data = _dataset(np.zeros((4, 16, 16)), {"chf": [1.0, 1.0, 1.0, 1.0]})
    state = M.init_state(_spec(), ["chf"], seed=5)
    with pytest.raises(ValueError, match="single-class"):
        train_stage(state, data, data, "chf", OptimizerConfig(max_epochs=1))


def test_divergence_raises_with_curves():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=6)
    state.blocks[0]["W"][0, 0, 0, 0] = np.inf  # nan reaches the loss via 0*inf
    with pytest.raises(TrainingDiverged) as exc:
        with np.errstate(invalid="ignore", over="ignore"):
            train_stage(
                state, data, data, "chf",
                OptimizerConfig(learning_rate=0.01, max_epochs=2, batch_size=8),
            )
    assert exc.value.curves["stage"] == "stage"


def test_checkpoint_selection_is_maximal():
    data = _separable_data(n=32)
    state = M.init_state(_spec(), ["chf"], seed=7)
    out, curves = train_stage(
        state, data, data, "chf",
        OptimizerConfig(learning_rate=0.2, max_epochs=4, batch_size=8,
                        checkpoint_interval_batches=2),
        tuned_blocks=0, tune_heads=True,
    )
    best = curves["best"]["metric"]
    for ck in curves["checkpoints"]:
        assert best >= ck["val_auroc"] - 1e-12
    for ep in curves["epochs"]:
        assert best >= ep["val_auroc"] - 1e-12


def test_training_deterministic():
    data = _separable_data()
    hashes = []
    for _ in range(2):
        state = M.init_state(_spec(), ["chf"], seed=8)
        out, _ = train_stage(
            state, data, data, "chf",
            OptimizerConfig(learning_rate=0.05, max_epochs=4, batch_size=8, seed=11),
        )
        hashes.append(M.params_hash(out))
    assert hashes[0] == hashes[1]


# ---------------------------------------------------------------------------
# schemes


EXPECTED_SCHEME_TABLE = {
    "all_layers": ((), ("target", "all")),
    "all_layers_mc": ((("multilabel", "all"),), ("target", "all")),
    "last_layer_mc": ((("multilabel", "all"),), ("target", "head")),
    "last_layer_mc_a": ((("multilabel", "all"), ("source", "all")), ("target", "head")),
    "multitask": ((), ("source+target", "all")),
}


def test_scheme_table_fidelity():
    for name, (pre, final) in EXPECTED_SCHEME_TABLE.items():
        cfg = SchemeConfig.named(name)
        assert cfg.pretrain_stages == pre, name
        assert cfg.final_stage == final, name
    bw = SchemeConfig.named("blockwise", tuned_blocks=2)
    assert bw.final_stage == ("target", 2)
    assert bw.pretrain_stages == EXPECTED_SCHEME_TABLE["last_layer_mc_a"][0]


def _scheme_datasets(seed=0):
    rng = np.random.default_rng(seed)

    def mk(n, tasks):
        levels = rng.uniform(0.1, 0.9, n)
        images = np.stack([np.full((16, 16), lv) + rng.normal(0, 0.02, (16, 16)) for lv in levels])
        labels = {}
        for i, t in enumerate(tasks):
            flip = rng.uniform(size=n) < 0.1
            labels[t] = ((levels > 0.5) ^ flip).astype(float)
        return _dataset(np.clip(images, 0, 1), labels)

    ml = mk(20, ["t1", "t2"])
    src = mk(20, ["pna"])
    tgt = mk(20, ["chf"])
    both = mk(20, ["pna", "chf"])
    return {
        "multilabel": {"train": ml, "val": ml, "tasks": ["t1", "t2"]},
        "source": {"train": src, "val": src, "tasks": "pna"},
        "target": {"train": tgt, "val": tgt, "tasks": "chf"},
        "source+target": {"train": both, "val": both, "tasks": ["pna", "chf"]},
    }


FAST_OPTS = {
    "multilabel": OptimizerConfig.adam_default(learning_rate=1e-3, max_epochs=1,
                                               checkpoint_interval_batches=None),
    "source": OptimizerConfig(learning_rate=0.01, max_epochs=1),
    "final": OptimizerConfig(learning_rate=0.01, max_epochs=2),
}


def test_all_layers_provenance_single_stage():
    datasets = _scheme_datasets()
    state, info = run_scheme(
        SchemeConfig.named("all_layers"), datasets, _spec(), seed=0,
        stage_optimizers=FAST_OPTS, pretrain_restarts=1,
    )
    stages = [p["stage"] for p in state.provenance]
    assert stages == ["final"]
    assert list(state.heads) == ["chf"]


def test_last_layer_mc_a_provenance_and_frozen_final_stage():
    datasets = _scheme_datasets()
    state, info = run_scheme(
        SchemeConfig.named("last_layer_mc_a"), datasets, _spec(), seed=1,
        stage_optimizers=FAST_OPTS, pretrain_restarts=2,
    )
    stages = [p["stage"] for p in state.provenance]
    assert stages[0].startswith("pretrain_r")
    assert stages[1] == "source"
    assert stages[2] == "final"
    assert list(state.heads) == ["chf"]  # source head discarded
    # final stage tuned the head only: trainable dim = feature_dim + 1
    assert state.trainable_blocks == [False, False]
    assert state.trainable_heads


def test_multitask_scheme_two_heads_one_stage():
    datasets = _scheme_datasets()
    state, info = run_scheme(
        SchemeConfig.named("multitask"), datasets, _spec(), seed=2,
        stage_optimizers=FAST_OPTS, pretrain_restarts=1,
    )
    assert sorted(state.heads) == ["chf", "pna"]
    assert [p["stage"] for p in state.provenance] == ["final"]


def test_missing_dataset_role_errors():
    datasets = _scheme_datasets()
    del datasets["source"]
    with pytest.raises(ValueError, match="needs dataset role"):
        run_scheme(SchemeConfig.named("last_layer_mc_a"), datasets, _spec(), seed=0,
                   stage_optimizers=FAST_OPTS)


def test_run_scheme_deterministic():
    datasets = _scheme_datasets()
    hashes = []
    for _ in range(2):
        state, _ = run_scheme(
            SchemeConfig.named("last_layer_mc", ), datasets, _spec(), seed=3,
            stage_optimizers=FAST_OPTS, pretrain_restarts=2,
        )
        hashes.append(M.params_hash(state))
    assert hashes[0] == hashes[1]


# ---------------------------------------------------------------------------
# grid selection


def test_grid_singleton_returns_it():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=9)
    only = OptimizerConfig(learning_rate=0.05, max_epochs=1)
    best, table = grid_select(state, data, data, "chf", [only], tuned_blocks=0)
    assert best == only
    assert len(table) == 1


def test_grid_evaluates_all_six_points():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=10)
    grid = default_sgd_grid(max_epochs=1, batch_size=12)
    best, table = grid_select(state, data, data, "chf", grid, tuned_blocks=0)
    assert len(table) == 6
    lrs = sorted({row["config"].learning_rate for row in table})
    assert lrs == [1e-3, 1e-2, 1e-1]


def test_grid_tie_breaks_toward_smaller_lr_then_momentum():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=11)
    grid = default_sgd_grid(max_epochs=0)  # every config scores identically
    best, _ = grid_select(state, data, data, "chf", grid, tuned_blocks=0)
    assert best.learning_rate == 1e-3
    assert best.momentum == 0.8


def test_grid_deterministic():
    data = _separable_data()
    state = M.init_state(_spec(), ["chf"], seed=12)
    grid = default_sgd_grid(max_epochs=1, batch_size=12)
    a, _ = grid_select(state, data, data, "chf", grid, tuned_blocks=0)
    b, _ = grid_select(state, data, data, "chf", grid, tuned_blocks=0)
    assert a == b
