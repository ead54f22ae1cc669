"""
Tests for the optimizer, the training loop, checkpoints and cross-validation.
"""

import math

import numpy as np
import pytest

from vgib.exceptions import ArchitectureMismatchError, CheckpointError, ConfigError, DatasetError, NonFiniteError
from vgib.schemas import TrainConfig
from vgib.services import training_service
from vgib.services.bottleneck_service import A_FLOOR
from vgib.services.gnn_service import parameter_digest
from vgib.services.graph_service import GraphService
from vgib.services.training_service import (
    METRIC_COLUMNS,
    AdamOptimizer,
    AdamState,
    TrainingService,
    adam_step,
    build_model,
    evaluate_accuracy,
    load_checkpoint,
    predict,
    save_checkpoint,
    write_metrics_csv,
)
from vgib.utils import autodiff as ad


def quick_config(**overrides):
    values = {"hidden_dim": 4, "epochs": 2, "batch_size": 8, "learning_rate": 0.01, "seed": 1}
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def splits():
    graphs = GraphService.generate_motif_dataset(24, seed=11)
    return GraphService.split_dataset(graphs, (0.5, 0.25, 0.25), seed=0)


@pytest.fixture(scope="module")
def classifier(splits):
    return TrainingService.train(splits, quick_config(mode="classify", gates=False))


@pytest.fixture(scope="module")
def planted_splits():
    graphs = GraphService.generate_motif_dataset(64, seed=21)
    return GraphService.split_dataset(graphs, (0.75, 0.125, 0.125), seed=0)


class TestAdam:
    """Test the Adam update."""

    def test_first_step_moves_by_learning_rate(self):
        """Test bias correction makes the first step exactly lr in the gradient's sign."""
        x = ad.parameter([1.0], "x")
        adam_step({"x": x}, {"x": np.array([1.0])}, AdamState(), lr=0.1)
        assert x.value[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_gradient_leaves_parameter(self):
        """Test a zero gradient does not move the parameter."""
        x = ad.parameter([2.0, -3.0], "x")
        adam_step({"x": x}, {"x": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(x.value, [2.0, -3.0])

    def test_minimizes_quadratic(self):
        """Test repeated steps drive x² towards its minimum."""
        x = ad.parameter([1.0], "x")
        optimizer = AdamOptimizer({"x": x}, lr=0.05)
        for _ in range(500):
            optimizer.zero_grad()
            ad.backward(ad.sum(ad.square(x)))
            optimizer.step()
        assert abs(x.value[0]) < 0.05
        assert optimizer.state.step == 500

    def test_non_finite_gradient(self):
        """Test a NaN gradient stops the update and names the tensor."""
        x = ad.parameter([1.0], "x")
        with pytest.raises(NonFiniteError) as info:
            adam_step({"x": x}, {"x": np.array([math.nan])}, AdamState(), lr=0.1)
        assert info.value.term == "x"
        assert x.value[0] == 1.0


class TestTrain:
    """Test end-to-end training."""

    def test_zero_epochs(self, splits):
        """Test zero epochs keep the initial model with no metric rows."""
        result = TrainingService.train(splits, quick_config(epochs=0))
        assert result.metrics == []
        assert result.best_epoch == 0
        assert math.isfinite(result.checkpoint.val_loss)

    def test_metric_rows(self, splits):
        """Test one metric row per epoch with wall time off by default."""
        result = TrainingService.train(splits, quick_config(epochs=3))
        assert [m.epoch for m in result.metrics] == [1, 2, 3]
        assert all(m.seconds == 0.0 for m in result.metrics)
        assert result.checkpoint.val_loss <= min([m.val_total for m in result.metrics] + [math.inf])
        assert 0.0 <= result.test_accuracy <= 1.0

    def test_resolves_dimensions(self, splits):
        """Test the checkpoint records the dataset's feature width and class count."""
        result = TrainingService.train(splits, quick_config(epochs=1))
        assert result.checkpoint.config.feature_dim == 8
        assert result.checkpoint.config.num_outputs == 2

    def test_deterministic(self, splits):
        """Test the same seed gives the same checkpoint."""
        a = TrainingService.train(splits, quick_config())
        b = TrainingService.train(splits, quick_config())
        assert a.checkpoint.model_dump() == b.checkpoint.model_dump()

    def test_gin_backbone(self, splits):
        """Test the GIN backbone trains to a finite loss."""
        result = TrainingService.train(splits, quick_config(backbone="gin", readout="mean", epochs=1))
        assert all(math.isfinite(m.train_total) for m in result.metrics)

    def test_task_mismatch(self, splits):
        """Test categorical labels cannot train a regression run."""
        with pytest.raises(ConfigError, match="categorical"):
            TrainingService.train(splits, quick_config(task="regression"))

    def test_explain_mode_needs_posthoc(self, splits):
        """Test explain mode is refused by plain training."""
        with pytest.raises(ConfigError, match="train_posthoc"):
            TrainingService.train(splits, quick_config(mode="explain"))

    def test_empty_validation_split(self, splits):
        """Test training needs validation graphs."""
        with pytest.raises(DatasetError):
            TrainingService.train((splits[0], [], splits[2]), quick_config())

    def test_metrics_csv(self, splits, tmp_path):
        """Test the metrics file has the fixed header and one row per epoch."""
        result = TrainingService.train(splits, quick_config(epochs=2))
        path = tmp_path / "metrics.csv"
        write_metrics_csv(result.metrics, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert len(lines) == 3


class TestTrainingProgress:
    """Test that interpret-mode training learns and stays stable."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_losses_fall_and_stay_finite(self, planted_splits, seed):
        """Test every logged loss is finite and the last epoch beats the first on cls and total."""
        result = TrainingService.train(planted_splits, quick_config(hidden_dim=16, epochs=30, seed=seed))
        for m in result.metrics:
            assert all(math.isfinite(v) for v in (m.train_total, m.train_cls, m.train_mi, m.train_aux, m.val_total))
        first, last = result.metrics[0], result.metrics[-1]
        assert last.train_cls < first.train_cls
        assert last.train_total < first.train_total

    def test_compression_term_within_clamp_maximum(self, planted_splits):
        """Test the mean mi term never exceeds the per-graph maximum the A floor and population std allow."""
        largest = max(g.num_nodes for g in planted_splits[0])
        ceiling = -0.5 * math.log(A_FLOOR) + 0.5 + largest / 2.0
        result = TrainingService.train(planted_splits, quick_config(epochs=10))
        assert all(m.train_mi <= ceiling for m in result.metrics)

    def test_non_finite_term_aborts_with_epoch_and_term(self, splits, monkeypatch):
        """Test a NaN compression term stops training at the first epoch and names the term."""
        real_loss = training_service.vgib_loss
        calls = []

        def nan_after_first_call(*args, **kwargs):
            loss = real_loss(*args, **kwargs)
            calls.append(loss)
            # The first call is the initial validation pass.
            if len(calls) > 1:
                loss.mi = math.nan
            return loss

        monkeypatch.setattr(training_service, "vgib_loss", nan_after_first_call)
        with pytest.raises(NonFiniteError) as info:
            TrainingService.train(splits, quick_config(epochs=3))
        assert info.value.epoch == 1
        assert info.value.term == "mi"
        assert len(calls) == 2


class TestCheckpoints:
    """Test saving, loading and rebuilding models."""

    def test_round_trip(self, splits, classifier, tmp_path):
        """Test a reloaded model gives identical logits."""
        path = tmp_path / "checkpoint.json"
        save_checkpoint(classifier.checkpoint, path)
        model = build_model(load_checkpoint(path))
        batch = GraphService.make_batch(splits[2])
        np.testing.assert_array_equal(model.clean_logits(batch).value, classifier.model.clean_logits(batch).value)

    def test_truncated_file(self, classifier, tmp_path):
        """Test a cut-off checkpoint is rejected."""
        path = tmp_path / "checkpoint.json"
        save_checkpoint(classifier.checkpoint, path)
        text = path.read_text(encoding="utf-8")
        path.write_text(text[: len(text) // 2], encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint is a checkpoint error."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.json")

    def test_hidden_dim_mismatch_names_tensor(self, classifier):
        """Test a config that disagrees with the stored tensors names the first mismatch."""
        document = classifier.checkpoint
        wrong = document.model_copy(update={"config": document.config.model_copy(update={"hidden_dim": 5})})
        with pytest.raises(ArchitectureMismatchError, match="encoder.W0"):
            build_model(wrong)

    def test_unknown_pooling(self, splits, classifier):
        """Test unknown prediction pooling is rejected."""
        with pytest.raises(ConfigError):
            predict(classifier.model, splits[2], pooling="max")

    def test_empty_evaluation(self, classifier):
        """Test accuracy needs at least one graph."""
        with pytest.raises(DatasetError):
            evaluate_accuracy(classifier.model, [])


class TestPosthoc:
    """Test explainer training over a frozen classifier."""

    def test_frozen_classifier_untouched(self, splits, classifier):
        """Test explainer training never changes the frozen tensors."""
        before = parameter_digest(build_model(classifier.checkpoint).named_parameters())
        result = TrainingService.train_posthoc(classifier.checkpoint, splits, quick_config(mode="explain"))
        assert parameter_digest(result.model.frozen.named_parameters()) == before
        assert result.checkpoint.frozen_config is not None
        assert result.checkpoint.config.mode == "explain"

    def test_explainer_checkpoint_rebuilds(self, splits, classifier):
        """Test an explainer checkpoint rebuilds with identical node probabilities."""
        result = TrainingService.train_posthoc(classifier.checkpoint, splits, quick_config(mode="explain", epochs=1))
        batch = GraphService.make_batch(splits[2])
        rebuilt = build_model(result.checkpoint)
        np.testing.assert_array_equal(rebuilt.node_probabilities(batch), result.model.node_probabilities(batch))

    def test_targets_are_frozen_predictions(self, splits, classifier, monkeypatch):
        """Test the explainer trains against the frozen classifier's argmax, not the dataset labels."""
        real_fit = training_service._fit
        seen = {}

        def recording_fit(model, config, train_graphs, val_graphs, train_targets=None, val_targets=None):
            seen["graphs"], seen["targets"] = train_graphs, train_targets
            return real_fit(model, config, train_graphs, val_graphs, train_targets, val_targets)

        monkeypatch.setattr(training_service, "_fit", recording_fit)
        TrainingService.train_posthoc(classifier.checkpoint, splits, quick_config(mode="explain", epochs=1))
        frozen = build_model(classifier.checkpoint)
        logits = frozen.clean_logits(GraphService.make_batch(seen["graphs"][:10])).value
        np.testing.assert_array_equal(seen["targets"][:10], np.argmax(logits, axis=1))

    def test_rejects_gated_model(self, splits):
        """Test only plain classifiers can be explained post hoc."""
        gated = TrainingService.train(splits, quick_config(epochs=0))
        with pytest.raises(ArchitectureMismatchError, match="plain classifier"):
            TrainingService.train_posthoc(gated.checkpoint, splits, quick_config(mode="explain"))


class TestCrossValidate:
    """Test k-fold evaluation."""

    def test_three_folds(self):
        """Test one accuracy per fold, each within [0, 1]."""
        graphs = GraphService.generate_motif_dataset(30, seed=2)
        result = TrainingService.cross_validate(graphs, quick_config(epochs=1), k=3)
        assert [f.fold for f in result.folds] == [0, 1, 2]
        assert all(0.0 <= f.accuracy <= 1.0 for f in result.folds)
        assert 0.0 <= result.mean <= 1.0
        assert result.std >= 0.0
