"""Tests for the ablation matrix and hyperparameter sweep drivers."""

import numpy as np
import pytest

from dualrec import experiments as ex
from dualrec.config import SWEEPABLE, VARIANTS, ConfigError, RunConfig
from dualrec.data import InteractionSet, freeze_splits


def make_set(num_users, num_items, per_user, seed):
    rng = np.random.default_rng(seed)
    pairs = set()
    for u in range(num_users):
        for i in rng.choice(num_items, size=per_user, replace=False):
            pairs.add((u, int(i)))
    return InteractionSet(
        num_users=num_users,
        num_items=num_items,
        interactions=pairs,
        user_map={f"u{i}": i for i in range(num_users)},
        item_map={f"i{i}": i for i in range(num_items)},
    )


def tiny_splits():
    return freeze_splits(make_set(8, 14, 5, seed=100),
                         make_set(8, 12, 4, seed=200),
                         seed=0, n_candidates=3)


def config(**kw):
    base = dict(k=4, l=1, epochs=2, lr=0.02, batch_size=32, neg_ratio=2,
                eval_negatives=3, top_k=3, seed=0, init_std=0.2)
    base.update(kw)
    return RunConfig(**base)


class TestRunVariant:
    def test_overrides_variant_and_keeps_rest(self):
        split_a, split_b = tiny_splits()
        outcome = ex.run_variant("wo_spe", split_a, split_b, config(variant="full"))
        assert outcome.tag == "wo_spe"
        assert outcome.report.config.variant == "wo_spe"
        assert outcome.report.config.k == 4

    def test_rejects_unknown_tag(self):
        split_a, split_b = tiny_splits()
        with pytest.raises(ConfigError):
            ex.run_variant("bogus", split_a, split_b, config())


class TestAblate:
    def test_eight_rows_in_variant_order(self):
        split_a, split_b = tiny_splits()
        rows, table = ex.ablate(split_a, split_b, config())
        assert len(rows) == len(VARIANTS) == 8
        assert [row["tag"] for row in rows] == list(VARIANTS)
        lines = table.strip().split("\n")
        assert lines[0] == ex.ABLATION_HEADER
        assert len(lines) == 1 + 8
        for row, line in zip(rows, lines[1:]):
            fields = line.split("\t")
            assert fields[0] == row["tag"]
            np.testing.assert_allclose(float(fields[1]), row["hr_a"], atol=5e-7)
            assert 0.0 <= row["hr_a"] <= 1.0 and 0.0 <= row["hr_b"] <= 1.0

    def test_subset_of_variants(self):
        split_a, split_b = tiny_splits()
        rows, _ = ex.ablate(split_a, split_b, config(), variants=("base", "full"))
        assert [row["tag"] for row in rows] == ["base", "full"]


class TestSweep:
    def test_grid_rows_and_header(self):
        split_a, split_b = tiny_splits()
        rows, table = ex.sweep("lr", [0.01, 0.02], split_a, split_b, config())
        assert [row["tag"] for row in rows] == ["0.01", "0.02"]
        assert table.startswith("lr\thr_a\tndcg_a\thr_b\tndcg_b\n")

    def test_l_grid_changes_architecture(self):
        split_a, split_b = tiny_splits()
        rows, _ = ex.sweep("l", [1, 2], split_a, split_b, config())
        assert [row["tag"] for row in rows] == ["1", "2"]

    def test_fusion_grid(self):
        split_a, split_b = tiny_splits()
        rows, _ = ex.sweep("fusion", ["concat", "sum", "attention"],
                           split_a, split_b, config())
        assert [row["tag"] for row in rows] == ["concat", "sum", "attention"]

    def test_unknown_param_rejected(self):
        split_a, split_b = tiny_splits()
        with pytest.raises(ConfigError):
            ex.sweep("k", [4], split_a, split_b, config())

    def test_empty_grid_rejected(self):
        split_a, split_b = tiny_splits()
        with pytest.raises(ConfigError):
            ex.sweep("lr", [], split_a, split_b, config())

    def test_invalid_value_rejected(self):
        split_a, split_b = tiny_splits()
        with pytest.raises(ConfigError):
            ex.sweep("l", [1.5], split_a, split_b, config())
        with pytest.raises(ConfigError):
            ex.sweep("fusion", ["stack"], split_a, split_b, config())


class TestCoerceSweepValue:
    def test_types(self):
        assert ex._coerce_sweep_value("l", "2") == 2
        assert isinstance(ex._coerce_sweep_value("l", "2"), int)
        assert ex._coerce_sweep_value("lr", "0.5") == 0.5
        assert ex._coerce_sweep_value("fusion", "sum") == "sum"
        with pytest.raises(ConfigError):
            ex._coerce_sweep_value("l", "1.5")

    def test_sweepable_covers_fields(self):
        assert set(ex._SWEEP_FIELDS) == set(SWEEPABLE)
