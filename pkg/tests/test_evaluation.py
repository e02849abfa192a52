"""Tests for chip-population evaluation, scenario tables, and the
gradient-bias demonstration."""

import json

import numpy as np
import pytest

import pimvar.evaluation as evaluation
from pimvar.evaluation import (
    EvalConfig,
    bias_demo,
    chip_seed,
    evaluate,
    run_scenario1,
    run_scenario2,
)
from pimvar.network import build_tinynet
from pimvar.selftuning import STConfig
from pimvar.training import TrainConfig, accuracy, train_vat
from pimvar.variability import ChipInstance, VariabilityConfig


def eval_cfg(**kw):
    base = dict(n_chips=8, master_seed=0, dtype="float64", limit=100)
    base.update(kw)
    return EvalConfig(**base)


@pytest.fixture(scope="module")
def vat_ckpt(synth_train, synth_test):
    cfg = TrainConfig(
        pipeline="vat",
        epochs=1,
        batch_size=50,
        base_lr=0.05,
        seed=3,
        val_chips=0,
        dtype="float64",
        train_subset=150,
        variability=VariabilityConfig(sigma_w=0.2, sigma_b=0.0),
    )
    ckpt, _ = train_vat(build_tinynet(), synth_train, synth_test, cfg)
    return ckpt


class TestEvalConfig:
    def test_missing_tuning_block_means_no_correction(self):
        cfg = EvalConfig(st=None)
        assert cfg.st == STConfig()
        assert cfg.st.st_type == "none"

    def test_validation(self):
        with pytest.raises(ValueError, match="n_chips"):
            EvalConfig(n_chips=0)
        with pytest.raises(ValueError, match="dtype"):
            EvalConfig(dtype="float16")

    def test_fingerprint_payload_ignores_thread_count(self):
        a = EvalConfig(threads=1).fingerprint_payload()
        b = EvalConfig(threads=8).fingerprint_payload()
        assert a == b
        assert "threads" not in a


class TestEvaluate:
    def test_zero_deviation_population_is_degenerate(self, tiny_ckpt, synth_test):
        """Every zero-deviation chip is the same hardware, so the population
        collapses onto the quantize-only accuracy with zero spread."""
        rep = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=VariabilityConfig()))
        model = tiny_ckpt.to_model()
        want = accuracy(model, synth_test, "quant_only", limit=100)
        np.testing.assert_array_equal(rep.accuracies, np.full(8, want))
        assert rep.mean == want
        assert rep.std == 0.0
        assert rep.n_nonrecoverable == 0

    def test_single_chip_population(self, tiny_ckpt, synth_test):
        rep = evaluate(
            tiny_ckpt,
            synth_test,
            eval_cfg(n_chips=1, variability=VariabilityConfig(sigma_w=0.3, sigma_b=0.0)),
        )
        assert rep.accuracies.shape == (1,)
        assert rep.mean == rep.min == rep.max == rep.accuracies[0]

    def test_matches_manual_chip_loop(self, tiny_ckpt, synth_test):
        """The report is exactly one accuracy() call per seeded chip."""
        var = VariabilityConfig(sigma_w=0.4, sigma_b=0.1)
        cfg = eval_cfg(n_chips=3, variability=var, limit=64)
        rep = evaluate(tiny_ckpt, synth_test, cfg)
        model = tiny_ckpt.to_model(np.float64)
        manual = [
            accuracy(
                model,
                synth_test,
                "quant_perturbed",
                chip=ChipInstance(chip_seed(0, c), var),
                limit=64,
            )
            for c in range(3)
        ]
        np.testing.assert_array_equal(rep.accuracies, manual)

    def test_threaded_equals_serial(self, tiny_ckpt, synth_test):
        var = VariabilityConfig(sigma_w=0.4, sigma_b=0.2)
        a = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var, threads=1))
        b = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var, threads=4))
        np.testing.assert_array_equal(a.accuracies, b.accuracies)
        assert a.fingerprint == b.fingerprint

    def test_population_stable_under_rerun(self, tiny_ckpt, synth_test):
        var = VariabilityConfig(sigma_w=0.3, sigma_b=0.1)
        a = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var))
        b = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var))
        np.testing.assert_array_equal(a.accuracies, b.accuracies)
        assert a.fingerprint == b.fingerprint

    def test_fingerprint_tracks_config(self, tiny_ckpt, synth_test):
        var = VariabilityConfig(sigma_w=0.3, sigma_b=0.0)
        a = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var))
        b = evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var, master_seed=1))
        assert a.fingerprint != b.fingerprint

    def test_checkpoint_untouched(self, tiny_ckpt, synth_test):
        before = tiny_ckpt.fingerprint()
        evaluate(
            tiny_ckpt,
            synth_test,
            eval_cfg(variability=VariabilityConfig(sigma_w=0.5, sigma_b=0.2)),
        )
        assert tiny_ckpt.fingerprint() == before

    def test_correction_requires_quantized_checkpoint(self, vat_ckpt, synth_test):
        cfg = eval_cfg(st=STConfig(st_type="gtm_only"))
        with pytest.raises(ValueError, match="quantized"):
            evaluate(vat_ckpt, synth_test, cfg)

    def test_full_precision_checkpoint_deploys_without_quantizers(self, vat_ckpt, synth_test):
        rep = evaluate(
            vat_ckpt,
            synth_test,
            eval_cfg(variability=VariabilityConfig(sigma_w=0.2, sigma_b=0.0)),
        )
        assert 0.0 <= rep.mean <= 1.0

    def test_unrecoverable_chips_become_nan_and_are_excluded(self, tiny_ckpt, synth_test):
        """An oversized guard rejects roughly the chips whose offset estimate
        is negative; they must appear as NaN, stay out of the mean, and be
        counted."""
        cfg = eval_cfg(
            n_chips=16,
            variability=VariabilityConfig(sigma_w=0.1, sigma_b=0.5),
            st=STConfig(st_type="gtm_only", guard=1.0),
        )
        rep = evaluate(tiny_ckpt, synth_test, cfg)
        nan_mask = np.isnan(rep.accuracies)
        assert rep.n_nonrecoverable == int(nan_mask.sum())
        assert 0 < rep.n_nonrecoverable < 16
        valid = rep.accuracies[~nan_mask]
        np.testing.assert_allclose(rep.mean, valid.mean())
        np.testing.assert_allclose(rep.std, valid.std())

    def test_report_artifacts(self, tiny_ckpt, synth_test, tmp_path):
        """report.json and per_chip.csv are deterministic; wall time lives in
        a separate metadata file."""
        var = VariabilityConfig(sigma_w=0.3, sigma_b=0.0)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var)).save(a_dir)
        evaluate(tiny_ckpt, synth_test, eval_cfg(variability=var)).save(b_dir)
        for name in ("report.json", "per_chip.csv"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()
        report = json.loads((a_dir / "report.json").read_text())
        assert "wall_time_s" not in report
        meta = json.loads((a_dir / "metadata.json").read_text())
        assert meta["wall_time_s"] >= 0.0
        rows = (a_dir / "per_chip.csv").read_text().strip().splitlines()
        assert rows[0] == "chip_index,accuracy,recoverable,fingerprint"
        assert len(rows) == 1 + 8


class TestChipSeeds:
    def test_deterministic_and_distinct(self):
        seeds = [chip_seed(0, i) for i in range(100)]
        assert seeds == [chip_seed(0, i) for i in range(100)]
        assert len(set(seeds)) == 100
        assert chip_seed(1, 0) != chip_seed(0, 0)


SCENARIO_TRAIN = dict(
    epochs=1,
    batch_size=50,
    base_lr=0.05,
    seed=0,
    val_chips=0,
    dtype="float64",
    train_subset=150,
)


class TestScenarioTables:
    def test_within_only_grid(self, synth_train, synth_test, tmp_path):
        rows = run_scenario1(
            build_tinynet(),
            synth_train,
            synth_test,
            sigmas=(0.0, 0.3),
            train_cfg=TrainConfig(**SCENARIO_TRAIN),
            eval_cfg=eval_cfg(n_chips=4, limit=64),
            arms=("qat", "qavat"),
            out_dir=tmp_path,
        )
        assert [(r["arm"], r["sigma_w"]) for r in rows] == [
            ("qat", 0.0),
            ("qavat", 0.0),
            ("qat", 0.3),
            ("qavat", 0.3),
        ]
        assert all(r["sigma_b"] == 0.0 for r in rows)
        assert all(np.isfinite(r["mean"]) for r in rows)

    def test_grid_resumes_from_saved_cells(self, synth_train, synth_test, tmp_path, monkeypatch):
        """A rerun over a finished grid must read the per-cell files instead
        of retraining anything."""
        args = dict(
            spec=build_tinynet(),
            train_ds=synth_train,
            test_ds=synth_test,
            sigmas=(0.3,),
            train_cfg=TrainConfig(**SCENARIO_TRAIN),
            eval_cfg=eval_cfg(n_chips=4, limit=64),
            arms=("qavat",),
            out_dir=tmp_path,
        )
        first = run_scenario1(**args)

        def boom(*a, **kw):
            raise AssertionError("resume must not retrain")

        monkeypatch.setattr(evaluation, "train", boom)
        second = run_scenario1(**args)
        assert second == first

    def test_unknown_arm_rejected(self, synth_train, synth_test):
        with pytest.raises(ValueError, match="arm"):
            run_scenario1(
                build_tinynet(),
                synth_train,
                synth_test,
                sigmas=(0.3,),
                train_cfg=TrainConfig(**SCENARIO_TRAIN),
                eval_cfg=eval_cfg(),
                arms=("qavat", "distill"),
            )

    def test_mixed_deviation_rows(self, synth_train, synth_test):
        """One total-deviation point expands to four rows from one trained
        network: uncorrected within-only and mixed, then the matching and the
        mismatched correction; the mixed rows split the budget evenly."""
        rows = run_scenario2(
            build_tinynet(),
            synth_train,
            synth_test,
            sigma_tots=(0.4,),
            train_cfg=TrainConfig(**SCENARIO_TRAIN),
            eval_cfg=eval_cfg(n_chips=4, limit=64),
        )
        assert [r["arm"] for r in rows] == [
            "qavat_within",
            "qavat_mixed",
            "qavat_mixed_st",
            "qavat_mixed_wrong_st",
        ]
        comp = 0.4 / np.sqrt(2.0)
        within, mixed, st, wrong = rows
        assert within["sigma_w"] == 0.4 and within["sigma_b"] == 0.0
        np.testing.assert_allclose([mixed["sigma_w"], mixed["sigma_b"]], [comp, comp])
        assert st["st_type"] == "gtm_only"
        assert wrong["st_type"] == "gtm_plus_ltm"
        assert all(r["sigma_tot"] == 0.4 for r in rows)


class TestBiasDemo:
    def test_reparameterized_estimator_hits_true_gradient(self):
        """L = (w(1+eps)-t)^2 at w=1, t=0, sigma=0.5: the true gradient of
        E[L] is 2.5 and the deviation-as-constant estimator centers on 2.0,
        missing the 2 sigma^2 w term."""
        out = bias_demo(w=1.0, t=0.0, sigma=0.5, n=400_000, seed=0)
        assert out["analytic_true_grad"] == pytest.approx(2.5)
        assert out["analytic_naive_mean"] == pytest.approx(2.0)
        assert abs(out["reparam_mean"] - 2.5) < 3.0 * out["reparam_se"]
        assert abs(out["naive_mean"] - 2.0) < 3.0 * out["naive_se"]

    def test_estimators_separated(self):
        """With sigma = 0.5 the estimator gap (0.5) dwarfs both standard
        errors, so the bias is statistically unambiguous."""
        out = bias_demo(n=400_000)
        gap = out["reparam_mean"] - out["naive_mean"]
        assert gap > 10.0 * max(out["reparam_se"], out["naive_se"])

    def test_deterministic(self):
        assert bias_demo(n=10_000, seed=5) == bias_demo(n=10_000, seed=5)

    def test_shifted_target(self):
        out = bias_demo(w=2.0, t=1.0, sigma=0.3, n=200_000, seed=2)
        assert out["analytic_true_grad"] == pytest.approx(2.0 + 2.0 * 0.09 * 2.0)
        assert abs(out["reparam_mean"] - out["analytic_true_grad"]) < 3.0 * out["reparam_se"]
