import math

import numpy as np
import pytest
import torch

from ecgtl.errors import ConfigError, DataError, IncompatibilityError
from ecgtl.model import ResNetConfig, build_resnet
from ecgtl.spectrogram import Fingerprint
from ecgtl.trainer import (
    Checkpoint,
    CohortDataset,
    ImageDataset,
    TrainConfig,
    checkpoint_digest,
    crossval,
    finetune,
    load_checkpoint,
    make_folds,
    predict_patient,
    pretrain,
    save_checkpoint,
)

torch.set_num_threads(1)

FP32 = Fingerprint(image_height=32, image_width=32)


def toy_dataset(n_per_class=8, num_classes=5, seed=0, fp=FP32):
    """Tiny separable dataset: class k has mean level k/num_classes."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in range(num_classes):
        base = (k + 0.5) / num_classes
        imgs = np.clip(
            base + 0.05 * rng.normal(size=(n_per_class, fp.channels, fp.image_height, fp.image_width)),
            0, 1,
        )
        images.append(imgs)
        labels.extend([k] * n_per_class)
    return ImageDataset(
        np.concatenate(images).astype(np.float32),
        np.array(labels, dtype=np.int64),
        fp,
        label_names=[str(k) for k in range(num_classes)],
    )


def toy_cohort(n_patients=12, segs=3, seed=0, fp=FP32, effect=0.3):
    rng = np.random.default_rng(seed)
    ids, labels, seg_map = [], {}, {}
    for i in range(n_patients):
        pid = f"p{i:02d}"
        label = i % 2
        base = 0.3 + effect * label
        seg_map[pid] = np.clip(
            base + 0.05 * rng.normal(size=(segs, fp.channels, fp.image_height, fp.image_width)),
            0, 1,
        ).astype(np.float32)
        ids.append(pid)
        labels[pid] = label
    return CohortDataset(ids, labels, seg_map, fp)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.001
        assert cfg.optimizer == "adam"

    @pytest.mark.parametrize(
        "kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"epochs": 0},
                   {"optimizer": "rmsprop"}, {"freeze_policy": "freeze_everything"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestPretrain:
    def test_initial_loss_is_ln5_with_uniform_logits(self):
        ds = toy_dataset()
        model = build_resnet(ResNetConfig(18, 1, 5), seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        model.eval()
        logits = model(torch.from_numpy(ds.images))
        loss = torch.nn.functional.cross_entropy(logits, torch.from_numpy(ds.labels))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-6)

    def test_smoke_loss_decreases(self):
        ds = toy_dataset()
        ckpt = pretrain(ds, TrainConfig(epochs=5, seed=1, batch_size=16))
        history = ckpt.metadata["history"]
        assert min(h["loss"] for h in history[1:]) < history[0]["loss"]
        assert history[-1]["accuracy"] > history[0]["accuracy"]

    def test_seed_determinism(self):
        ds = toy_dataset()
        cfg = TrainConfig(epochs=1, seed=3, batch_size=16)
        a = pretrain(ds, cfg)
        b = pretrain(ds, cfg)
        for k, v in a.state.items():
            assert torch.equal(v, b.state[k]), k

    def test_empty_dataset_rejected(self):
        empty = ImageDataset(
            np.zeros((0, 1, 32, 32), dtype=np.float32),
            np.zeros(0, dtype=np.int64), FP32,
        )
        with pytest.raises(DataError):
            pretrain(empty, TrainConfig(epochs=1))

    def test_single_class_rejected(self):
        ds = toy_dataset(num_classes=1)
        with pytest.raises(DataError):
            pretrain(ds, TrainConfig(epochs=1))

    def test_training_log_written(self, tmp_path):
        import json

        log = tmp_path / "log.jsonl"
        pretrain(toy_dataset(), TrainConfig(epochs=2, seed=0, batch_size=16), log_path=log)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert [l["epoch"] for l in lines] == [1, 2]
        assert all(set(l) == {"epoch", "split", "loss", "accuracy"} for l in lines)


@pytest.fixture(scope="module")
def base_checkpoint():
    return pretrain(toy_dataset(), TrainConfig(epochs=1, seed=5, batch_size=16))


class TestFinetune:
    def binary_dataset(self, seed=0):
        ds = toy_dataset(n_per_class=6, num_classes=2, seed=seed)
        return ds

    def test_initial_binary_loss_is_ln2(self, base_checkpoint):
        model = base_checkpoint.build_model()
        from ecgtl.model import replace_head

        replace_head(model, 2, seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        model.eval()
        ds = self.binary_dataset()
        logits = model(torch.from_numpy(ds.images))
        loss = torch.nn.functional.cross_entropy(logits, torch.from_numpy(ds.labels))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_freeze_all_but_head(self, base_checkpoint):
        tuned = finetune(
            base_checkpoint, self.binary_dataset(),
            TrainConfig(epochs=2, seed=1, batch_size=8, freeze_policy="freeze_all_but_head"),
        )
        for name, tensor in base_checkpoint.state.items():
            if not name.startswith("head."):
                assert torch.equal(tensor, tuned.state[name]), name

    def test_default_freeze_policy_keeps_early_stages(self, base_checkpoint):
        tuned = finetune(
            base_checkpoint, self.binary_dataset(),
            TrainConfig(epochs=1, seed=1, batch_size=8),
        )
        frozen = [n for n in base_checkpoint.state
                  if n.startswith(("stem.", "stages.0.", "stages.1."))]
        assert frozen
        for name in frozen:
            assert torch.equal(base_checkpoint.state[name], tuned.state[name]), name
        # later stages actually train
        trained = [n for n in base_checkpoint.state if n.startswith("stages.3.") and "weight" in n]
        assert any(
            not torch.equal(base_checkpoint.state[n], tuned.state[n]) for n in trained
        )

    def test_fingerprint_mismatch_rejected(self, base_checkpoint):
        ds = self.binary_dataset()
        ds.fingerprint = Fingerprint(image_height=32, image_width=32, window_len=256)
        with pytest.raises(IncompatibilityError):
            finetune(base_checkpoint, ds, TrainConfig(epochs=1))

    def test_head_is_binary(self, base_checkpoint):
        tuned = finetune(
            base_checkpoint, self.binary_dataset(), TrainConfig(epochs=1, seed=0, batch_size=8)
        )
        assert tuned.config.num_classes == 2
        assert tuned.label_map == {0: "non_responder", 1: "responder"}


class TestPredictPatient:
    def model_with_fixed_probability(self, p):
        model = build_resnet(ResNetConfig(18, 1, 2), seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor([0.0, math.log(p / (1 - p))]))
        return model

    def test_high_probability_responder(self):
        model = self.model_with_fixed_probability(0.9)
        prob, cls = predict_patient(model, np.random.rand(3, 1, 32, 32).astype(np.float32))
        assert prob == pytest.approx(0.9, abs=1e-6)
        assert cls == 1

    def test_exact_half_is_non_responder(self):
        model = build_resnet(ResNetConfig(18, 1, 2), seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        prob, cls = predict_patient(model, np.random.rand(2, 1, 32, 32).astype(np.float32))
        assert prob == pytest.approx(0.5, abs=1e-7)
        assert cls == 0

    def test_mean_aggregation(self):
        model = build_resnet(ResNetConfig(18, 1, 2), seed=3)
        segs = np.random.rand(4, 1, 32, 32).astype(np.float32)
        from ecgtl.model import forward

        per_seg = torch.softmax(forward(model, torch.from_numpy(segs)), dim=1)[:, 1]
        prob, _ = predict_patient(model, segs)
        assert prob == pytest.approx(float(per_seg.mean()), abs=1e-7)

    def test_zero_segments_rejected(self):
        model = build_resnet(ResNetConfig(18, 1, 2), seed=0)
        with pytest.raises(DataError):
            predict_patient(model, np.zeros((0, 1, 32, 32), dtype=np.float32))


class TestMakeFolds:
    def paper_labels(self):
        labels = {f"p{i:03d}": 1 for i in range(46)}
        labels.update({f"n{i:03d}": 0 for i in range(25)})
        return labels

    def test_paper_fold_sizes(self):
        plan = make_folds(self.paper_labels(), k=5, seed=0)
        sizes = sorted(len(plan.fold_members(f)) for f in range(5))
        assert sizes == [14, 14, 14, 14, 15]

    def test_paper_positive_stratification(self):
        labels = self.paper_labels()
        plan = make_folds(labels, k=5, seed=0)
        for f in range(5):
            positives = sum(labels[p] for p in plan.fold_members(f))
            assert positives in (9, 10)

    def test_disjoint_cover(self):
        labels = self.paper_labels()
        plan = make_folds(labels, k=5, seed=3)
        seen = [p for f in range(5) for p in plan.fold_members(f)]
        assert sorted(seen) == sorted(labels)

    def test_deterministic_and_seed_sensitive(self):
        labels = self.paper_labels()
        a = make_folds(labels, k=5, seed=1)
        b = make_folds(labels, k=5, seed=1)
        c = make_folds(labels, k=5, seed=2)
        assert a.assignment == b.assignment
        assert a.assignment != c.assignment

    def test_k_exceeding_patients_rejected(self):
        with pytest.raises(ConfigError):
            make_folds({"a": 0, "b": 1}, k=3)


class TestCheckpointIO:
    def test_round_trip(self, tmp_path, base_checkpoint):
        save_checkpoint(base_checkpoint, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == base_checkpoint.config
        assert loaded.label_map == base_checkpoint.label_map
        assert loaded.fingerprint == base_checkpoint.fingerprint
        for k, v in base_checkpoint.state.items():
            assert loaded.state[k].dtype == v.dtype
            assert torch.equal(loaded.state[k].float(), v.float()), k

    def test_loaded_model_forward_identical(self, tmp_path, base_checkpoint):
        save_checkpoint(base_checkpoint, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        from ecgtl.model import forward

        x = torch.rand(2, 1, 32, 32)
        assert torch.equal(
            forward(base_checkpoint.build_model(), x),
            forward(loaded.build_model(), x),
        )

    def test_digest_stability(self, tmp_path, base_checkpoint):
        save_checkpoint(base_checkpoint, tmp_path / "a")
        save_checkpoint(base_checkpoint, tmp_path / "b")
        assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")

    def test_manifest_contents(self, tmp_path, base_checkpoint):
        import json

        save_checkpoint(base_checkpoint, tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        assert set(manifest) >= {"architecture", "label_map", "fingerprint", "metadata"}
        assert manifest["fingerprint"]["window_len"] == 512


class TestCrossval:
    def test_five_fold_rows_and_format(self, base_checkpoint):
        cohort = toy_cohort(n_patients=10)
        report = crossval(
            cohort, TrainConfig(epochs=1, seed=0, batch_size=8),
            checkpoint=base_checkpoint, k=5, seed=0,
        )
        assert len(report.folds) == 5
        line = report.summary_line("resnet")
        import re

        assert re.search(r"\d\.\d{3} ± \d\.\d{3}", line) or "n/a" in line

    def test_scratch_mode_runs(self):
        cohort = toy_cohort(n_patients=8)
        report = crossval(
            cohort, TrainConfig(epochs=1, seed=0, batch_size=8), checkpoint=None,
            k=4, seed=0,
        )
        assert len(report.folds) == 4
