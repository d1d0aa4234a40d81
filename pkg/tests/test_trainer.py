import numpy as np
import pytest

from core.errors import ConfigError, FrozenWeightsMutatedError, TrainingDivergedError
from core.metrics import load_run_record, save_run_record
from processors import DatasetProcessor, DatasetSpec
from ssf.adapters.baselines import HEAD, MethodConfig, restore_method
from ssf.model.config import preset
from ssf.model.vit import build_model, forward, load_graph
from ssf.services import trainer
from ssf.services.fold import build_fold_plan, fold_checkpoint
from ssf.services.trainer import (
    TrainConfig, evaluate, evaluate_checkpoint, finetune, predict, pretrain, run_pretrain
)
from ssf.tensor import Tensor

from tests.helpers import random_images, ssf_method

STEPS_100 = TrainConfig(epochs=25, warmup_epochs=1, base_lr=1e-3, batch_size=16, max_steps=100)


@pytest.fixture(scope="module")
def upstream_splits():
    return DatasetProcessor.gen_synthetic(DatasetSpec(task_id="upstream_shapes", seed=1, n_train=48, n_val=16))


class TestTrainConfig:
    @pytest.mark.parametrize("fields", [
        {"epochs": 5, "warmup_epochs": 5},
        {"batch_size": 0},
        {"base_lr": 0.0},
        {"dtype": "f16"},
        {"max_steps": -1},
    ])
    def test_rejects(self, fields):
        with pytest.raises(ConfigError):
            TrainConfig(**fields).validate()

    def test_method_overrides(self):
        cfg = TrainConfig().with_method(MethodConfig(lr=0.5, epochs=3, warmup_epochs=0))
        assert (cfg.base_lr, cfg.epochs, cfg.warmup_epochs, cfg.weight_decay) == (0.5, 3, 0, 0.05)

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=4, dtype="f64", max_steps=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestPretrain:
    def test_zero_epochs_returns_the_initialization(self, upstream_splits):
        cfg = preset("toy")
        params = pretrain(cfg, upstream_splits, TrainConfig(epochs=0))
        init, _ = build_model(cfg)
        assert params.digest() == init.digest()

    def test_runs_are_reproducible(self, upstream_splits):
        train_cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, max_steps=5)
        a, record = run_pretrain(preset("toy"), upstream_splits, train_cfg)
        b, _ = run_pretrain(preset("toy"), upstream_splits, train_cfg)
        assert a.digest() == b.digest()
        assert record.steps == 5
        assert a.digest() != build_model(preset("toy"))[0].digest()

    def test_records_every_epoch(self, upstream_splits):
        _, record = run_pretrain(preset("toy"), upstream_splits, TrainConfig(epochs=2, warmup_epochs=1, batch_size=24))
        assert [e["epoch"] for e in record.epochs] == [0, 1]
        assert record.steps == 4
        assert 0.0 <= record.final_val_acc <= 1.0

    def test_rejects_mismatched_images(self):
        splits = DatasetProcessor.gen_synthetic(DatasetSpec(n_train=8, n_val=4, image_side=8))
        with pytest.raises(ConfigError):
            pretrain(preset("toy"), splits, TrainConfig(epochs=1, warmup_epochs=0))


class TestFinetune:
    @pytest.mark.parametrize("method", [
        MethodConfig(method="ssf"),
        MethodConfig(method="bias"),
        MethodConfig(method="adapter", adapter_dim=4),
        MethodConfig(method="vpt_deep", prompts=2),
        MethodConfig(method="vpt_shallow", prompts=2),
        MethodConfig(method="linear"),
    ], ids=lambda m: m.method)
    def test_only_trainable_tensors_move(self, pretrained, downstream_splits, method):
        source_digest = pretrained.digest()
        params, record = finetune(pretrained, method, downstream_splits, STEPS_100)
        assert record.steps == 100
        assert pretrained.digest() == source_digest

        for name in params.names():
            if name not in pretrained:
                continue
            moved = params.tensor_hash(name) != pretrained.tensor_hash(name)
            assert moved == (name in params.trainable_names()), name
        assert record.frozen_digest_before == record.frozen_digest_after
        assert record.trainable_digest_before != record.trainable_digest_after

    def test_linear_probe_changes_only_the_head(self, pretrained, downstream_splits):
        params, record = finetune(pretrained, MethodConfig(method="linear"), downstream_splits, STEPS_100)
        changed = [n for n in pretrained.names() if params.tensor_hash(n) != pretrained.tensor_hash(n)]
        assert sorted(changed) == sorted(HEAD)
        assert record.trainable_params == params.num_params(HEAD)

    def test_identity_ssf_without_steps_matches_backbone(self, pretrained, downstream_splits, toy_cfg):
        cfg = TrainConfig(epochs=1, warmup_epochs=0, max_steps=0)
        params, _ = finetune(pretrained, ssf_method(init="constant"), downstream_splits, cfg)
        graph = load_graph(params)
        state = restore_method(params.copy(), graph)
        images = random_images(toy_cfg, 8)
        assert np.array_equal(predict(params, graph, images, state), forward(pretrained, graph, images).data)

    def test_resets_head_for_new_class_count(self, pretrained):
        splits = DatasetProcessor.gen_synthetic(
            DatasetSpec(task_id="downstream_shifted", n_train=32, n_val=8, num_classes=6))
        params, _ = finetune(pretrained, MethodConfig(method="linear"), splits,
                             TrainConfig(epochs=1, warmup_epochs=0, batch_size=16))
        assert params["head.weight"].shape == (6, 32)
        assert params.metadata["model_config"]["num_classes"] == 6
        assert pretrained["head.weight"].shape == (4, 32)

    def test_float64_runs(self, pretrained, downstream_splits):
        params, _ = finetune(pretrained, MethodConfig(method="ssf"), downstream_splits,
                             TrainConfig(epochs=1, warmup_epochs=0, batch_size=32, dtype="f64"))
        assert all(params[n].dtype == np.float64 for n in params)

    def test_rejects_checkpoints_with_method_tensors(self, pretrained, downstream_splits):
        params, _ = finetune(pretrained, MethodConfig(method="ssf"), downstream_splits,
                             TrainConfig(epochs=1, warmup_epochs=0, max_steps=1))
        with pytest.raises(ConfigError):
            finetune(params, MethodConfig(method="ssf"), downstream_splits, TrainConfig(epochs=1, warmup_epochs=0))

    def test_divergence_carries_a_dump(self, pretrained, downstream_splits, monkeypatch):
        monkeypatch.setattr(trainer.ops, "cross_entropy", lambda logits, labels: Tensor(np.array(np.nan)))
        with pytest.raises(TrainingDivergedError) as err:
            finetune(pretrained, MethodConfig(method="ssf"), downstream_splits,
                     TrainConfig(epochs=1, warmup_epochs=0, seed=7))
        assert err.value.dump["seed"] == 7
        assert err.value.dump["step"] == 0

    def test_frozen_mutation_is_detected(self, pretrained, downstream_splits, monkeypatch):
        original = trainer.AdamW.step

        def leaky_step(self, lr, grads=None):
            original(self, lr, grads)
            self.params["patch_embed.weight"].data[0, 0] += 1.0

        monkeypatch.setattr(trainer.AdamW, "step", leaky_step)
        with pytest.raises(FrozenWeightsMutatedError):
            finetune(pretrained, MethodConfig(method="ssf"), downstream_splits,
                     TrainConfig(epochs=1, warmup_epochs=0, max_steps=2))


class TestEvaluate:
    def test_accuracy_bounds(self, pretrained, downstream_splits):
        graph = load_graph(pretrained)
        result = evaluate(pretrained, graph, downstream_splits.val)
        assert 0.0 <= result.accuracy <= 1.0
        assert result.total == len(downstream_splits.val)
        assert result.correct == round(result.accuracy * result.total)

    def test_folded_checkpoint_scores_like_the_hooked_one(self, pretrained, downstream_splits):
        params, _ = finetune(pretrained, MethodConfig(method="ssf"), downstream_splits,
                             TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, dtype="f64"))
        folded = fold_checkpoint(params, build_fold_plan(load_graph(params), params))
        hooked = evaluate_checkpoint(params, downstream_splits.val)
        merged = evaluate_checkpoint(folded, downstream_splits.val)
        assert hooked.correct == merged.correct
        assert hooked.loss == pytest.approx(merged.loss, abs=1e-10)

    def test_run_record_round_trip(self, pretrained, downstream_splits, tmp_path):
        _, record = finetune(pretrained, MethodConfig(method="bias"), downstream_splits,
                             TrainConfig(epochs=2, warmup_epochs=1, batch_size=32))
        prefix = str(tmp_path / "run")
        save_run_record(record.to_dict(), prefix)
        loaded = load_run_record(prefix)
        assert loaded["epochs"] == record.epochs
        assert loaded["trainable_params"] == record.trainable_params


# =============================================================================
# Desk-scale acceptance runs
# =============================================================================

@pytest.mark.slow
class TestEfficacy:
    SEEDS = range(3)

    @pytest.fixture(scope="class")
    def backbone_and_task(self):
        cfg = preset("toy")
        upstream = DatasetProcessor.gen_synthetic(DatasetSpec(task_id="upstream_shapes", seed=0))
        backbone, record = run_pretrain(cfg, upstream, TrainConfig(epochs=10, warmup_epochs=1, base_lr=1e-3))
        downstream = DatasetProcessor.gen_synthetic(DatasetSpec(task_id="downstream_shifted", seed=0))
        return backbone, record, downstream

    @classmethod
    def mean_acc(cls, backbone, method, downstream):
        train_cfg = TrainConfig(epochs=10, warmup_epochs=1, base_lr=5e-3)
        runs = [finetune(backbone, method, downstream, TrainConfig(**{**train_cfg.to_dict(), "seed": s}))[1]
                for s in cls.SEEDS]
        return float(np.mean([r.final_val_acc for r in runs]))

    def test_pretrained_backbone_is_accurate(self, backbone_and_task):
        _, record, _ = backbone_and_task
        assert record.final_val_acc >= 0.9

    def test_ssf_beats_linear_and_bias(self, backbone_and_task):
        backbone, _, downstream = backbone_and_task
        ssf_acc = self.mean_acc(backbone, MethodConfig(method="ssf"), downstream)
        lin_acc = self.mean_acc(backbone, MethodConfig(method="linear"), downstream)
        bias_acc = self.mean_acc(backbone, MethodConfig(method="bias"), downstream)
        assert ssf_acc - lin_acc >= 0.05
        assert ssf_acc >= bias_acc

    def test_accuracy_grows_with_layers(self, backbone_and_task):
        backbone, _, downstream = backbone_and_task
        accs = [self.mean_acc(backbone, ssf_method(sites=f"first:{k}"), downstream) for k in (0, 1, 2)]
        assert accs[0] <= accs[1] <= accs[2]
