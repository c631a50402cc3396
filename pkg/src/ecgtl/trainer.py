"""Training workflow: pretrain on arrhythmia beats, transfer the weights,
fine-tune on a patient cohort, evaluate with grouped stratified k-fold
cross-validation."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    IncompatibilityError,
)
from .metrics import MetricsReport, accuracy, confusion, sensitivity, specificity
from .model import ResNet, ResNetConfig, build_resnet, replace_head
from .spectrogram import Fingerprint

FREEZE_POLICIES = {
    "none": (),
    "freeze_stem_and_stages_1_2": ("stem.", "stages.0.", "stages.1."),
    "freeze_all_but_head": ("stem.", "stages.", "pool."),
}


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64  # paper-scale value is 2000; desk default is 64
    epochs: int = 5
    optimizer: str = "adam"
    seed: int = 0
    freeze_policy: str = "freeze_stem_and_stages_1_2"
    class_weights: list[float] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {self.freeze_policy!r}")


@dataclass
class ImageDataset:
    """Labeled image tensors plus the preprocessing fingerprint that
    produced them. ``groups`` carries the source record/patient per image."""

    images: np.ndarray  # [N x C x H x W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    fingerprint: Fingerprint
    groups: list[str] | None = None
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Checkpoint:
    state: dict  # torch state_dict
    config: ResNetConfig
    label_map: dict[int, str]
    fingerprint: Fingerprint
    metadata: dict = field(default_factory=dict)

    def build_model(self) -> ResNet:
        model = build_resnet(self.config, seed=0)
        model.load_state_dict(self.state)
        return model


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]  # patient id -> fold index

    def fold_members(self, fold: int) -> list[str]:
        return [p for p, f in self.assignment.items() if f == fold]


_TORCH_DTYPES = {
    torch.float32: 0,
    torch.int64: 1,
    torch.float64: 2,
}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Checkpoint directory: manifest.json + weights.bin.

    weights.bin: u32 tensor count, then per tensor a u16 name length,
    the UTF-8 name, and the tensor in the container format (float32;
    integer state entries are cast and restored from the manifest's
    dtype table).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtypes = {}
    blob = bytearray(struct.pack("<I", len(ckpt.state)))
    tmp = path / "_tensor.tmp"
    for name, tensor in ckpt.state.items():
        dtypes[name] = "int64" if tensor.dtype == torch.int64 else "float32"
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        tensorio.write_tensor(tmp, arr)
        blob += tmp.read_bytes()
    tmp.unlink(missing_ok=True)
    (path / "weights.bin").write_bytes(bytes(blob))
    manifest = {
        "architecture": ckpt.config.to_dict(),
        "label_map": {str(k): v for k, v in ckpt.label_map.items()},
        "fingerprint": ckpt.fingerprint.to_dict(),
        "metadata": ckpt.metadata,
        "dtypes": dtypes,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "weights.bin").read_bytes()
    (count,) = struct.unpack_from("<I", raw, 0)
    pos = 4
    dtypes = manifest.get("dtypes", {})
    state = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise FormatError("weights.bin truncated in name table")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        # Tensor container: parse header to find payload length.
        if raw[pos : pos + 4] != tensorio.MAGIC:
            raise FormatError(f"weights.bin: bad tensor magic at {name}")
        ndim = raw[pos + 6]
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos + 7)
        size = 7 + 8 * ndim + 4 * int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(raw[pos + 7 + 8 * ndim : pos + size], dtype="<f4").reshape(dims)
        pos += size
        tensor = torch.from_numpy(arr.copy())
        if dtypes.get(name) == "int64":
            tensor = tensor.to(torch.int64)
        state[name] = tensor
    return Checkpoint(
        state=state,
        config=ResNetConfig.from_dict(manifest["architecture"]),
        label_map={int(k): v for k, v in manifest["label_map"].items()},
        fingerprint=Fingerprint.from_dict(manifest["fingerprint"]),
        metadata=manifest.get("metadata", {}),
    )


def checkpoint_digest(path: str | Path) -> str:
    """SHA-256 of weights.bin; identical runs give identical digests."""
    return hashlib.sha256((Path(path) / "weights.bin").read_bytes()).hexdigest()


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999))
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)


def _train_loop(
    model: ResNet,
    dataset: ImageDataset,
    config: TrainConfig,
    log_path: str | Path | None = None,
    frozen_prefixes: tuple[str, ...] = (),
) -> dict:
    """Shared mini-batch loop. Returns {epochs_completed, final_loss, history}."""
    torch.manual_seed(config.seed)
    images = torch.from_numpy(np.ascontiguousarray(dataset.images, dtype=np.float32))
    labels = torch.from_numpy(np.ascontiguousarray(dataset.labels, dtype=np.int64))

    frozen_modules = []
    for name, param in model.named_parameters():
        if any(name.startswith(p) for p in frozen_prefixes):
            param.requires_grad_(False)
    for name, module in model.named_modules():
        # Frozen batch-norm layers must not update running statistics.
        if isinstance(module, nn.BatchNorm2d) and any(
            (name + ".").startswith(p) for p in frozen_prefixes
        ):
            frozen_modules.append(module)

    weight = None
    if config.class_weights is not None:
        weight = torch.tensor(config.class_weights, dtype=torch.float32)
    loss_fn = nn.CrossEntropyLoss(weight=weight)
    optimizer = _make_optimizer(
        config, [p for p in model.parameters() if p.requires_grad]
    )
    generator = torch.Generator().manual_seed(config.seed)

    log_file = open(log_path, "a") if log_path is not None else None
    history = []
    final_loss = math.nan
    last_good_state = None
    try:
        for epoch in range(config.epochs):
            model.train()
            for m in frozen_modules:
                m.eval()
            order = torch.randperm(len(images), generator=generator)
            total_loss, total_correct = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                logits = model(images[idx])
                loss = loss_fn(logits, labels[idx])
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch + 1}",
                        last_good_checkpoint=last_good_state,
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(idx)
                total_correct += (logits.argmax(1) == labels[idx]).sum().item()
            final_loss = total_loss / len(images)
            epoch_acc = total_correct / len(images)
            history.append({"epoch": epoch + 1, "loss": final_loss, "accuracy": epoch_acc})
            last_good_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
            if log_file is not None:
                log_file.write(
                    json.dumps(
                        {
                            "epoch": epoch + 1,
                            "split": "train",
                            "loss": final_loss,
                            "accuracy": epoch_acc,
                        }
                    )
                    + "\n"
                )
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    # Exact batch-norm calibration: the running-stat EMA only averages the
    # last ~1/momentum batches and is noisy at batch 64, which costs real
    # eval-mode accuracy. Replace it with population statistics over the
    # training set (momentum=None -> cumulative average). Frozen layers
    # keep their stats untouched.
    frozen_ids = {id(m) for m in frozen_modules}
    calibrate = [
        m for m in model.modules()
        if isinstance(m, nn.BatchNorm2d) and id(m) not in frozen_ids
    ]
    if calibrate:
        for m in calibrate:
            m.reset_running_stats()
            m.momentum = None
        model.train()
        for m in frozen_modules:
            m.eval()
        with torch.no_grad():
            for start in range(0, len(images), 256):
                model(images[start : start + 256])
        for m in calibrate:
            m.momentum = 0.1

    return {
        "epochs_completed": config.epochs,
        "final_loss": final_loss,
        "history": history,
    }


def pretrain(
    dataset: ImageDataset,
    config: TrainConfig,
    variant: int = 18,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Train a fresh classifier on the beat dataset (Adam + cross-entropy)."""
    if len(dataset) == 0:
        raise DataError("pretraining dataset is empty")
    classes = np.unique(dataset.labels)
    if len(classes) < 2:
        raise DataError("pretraining needs at least 2 classes")
    num_classes = int(dataset.labels.max()) + 1
    fp = dataset.fingerprint
    model = build_resnet(
        ResNetConfig(variant, fp.channels, num_classes), seed=config.seed
    )
    info = _train_loop(model, dataset, config, log_path=log_path)
    label_map = {
        i: (dataset.label_names[i] if i < len(dataset.label_names) else str(i))
        for i in range(num_classes)
    }
    return Checkpoint(
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=model.config,
        label_map=label_map,
        fingerprint=fp,
        metadata={
            "seed": config.seed,
            "epochs_completed": info["epochs_completed"],
            "final_loss": info["final_loss"],
            "history": info["history"],
        },
    )


def finetune(
    checkpoint: Checkpoint,
    dataset: ImageDataset,
    config: TrainConfig,
    label_names: tuple[str, str] = ("non_responder", "responder"),
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Transfer: replace the head with a binary classifier, apply the
    freeze policy, and train on the cohort dataset."""
    if checkpoint.fingerprint != dataset.fingerprint:
        raise IncompatibilityError(
            "checkpoint fingerprint does not match the dataset: "
            f"{checkpoint.fingerprint} vs {dataset.fingerprint}"
        )
    if len(np.unique(dataset.labels)) < 2:
        raise DataError("fine-tuning dataset must contain both classes")
    model = checkpoint.build_model()
    replace_head(model, 2, seed=config.seed)

    cfg = config
    if cfg.class_weights is None:
        counts = np.bincount(dataset.labels, minlength=2).astype(np.float64)
        weights = (len(dataset.labels) / (2.0 * counts)).tolist()
        cfg = TrainConfig(
            cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.optimizer,
            cfg.seed, cfg.freeze_policy, weights,
        )

    info = _train_loop(
        model, dataset, cfg, log_path=log_path,
        frozen_prefixes=FREEZE_POLICIES[cfg.freeze_policy],
    )
    return Checkpoint(
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=model.config,
        label_map={0: label_names[0], 1: label_names[1]},
        fingerprint=dataset.fingerprint,
        metadata={
            "seed": cfg.seed,
            "epochs_completed": info["epochs_completed"],
            "final_loss": info["final_loss"],
            "pretrained": checkpoint.metadata.get("seed") is not None,
            "freeze_policy": cfg.freeze_policy,
        },
    )


def predict_patient(model: ResNet, segments: np.ndarray) -> tuple[float, int]:
    """Patient-level decision: mean per-segment responder probability,
    responder iff it exceeds 0.5 (exact ties go to non-responder)."""
    if len(segments) == 0:
        raise DataError("patient has no segments")
    from .model import forward

    logits = forward(model, torch.from_numpy(np.ascontiguousarray(segments)))
    probs = torch.softmax(logits, dim=1)[:, 1]
    p = float(probs.mean())
    return p, int(p > 0.5)


def make_folds(
    labels: dict[str, int], k: int = 5, seed: int = 0
) -> FoldPlan:
    """Patient-grouped stratified folds, deterministic per seed.

    Positives and negatives are shuffled independently and dealt
    round-robin, so per-fold class counts never differ by more than one.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    patients = sorted(labels)
    if k > len(patients):
        raise ConfigError(f"k={k} exceeds the number of patients ({len(patients)})")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    fold_order = rng.permutation(k)
    for cls in (1, 0):
        members = list(rng.permutation([p for p in patients if labels[p] == cls]))
        for i, p in enumerate(members):
            assignment[p] = int(fold_order[i % k])
    return FoldPlan(k=k, assignment=assignment)


@dataclass
class CohortDataset:
    """Per-patient segment images for the binary response task."""

    patient_ids: list[str]
    patient_labels: dict[str, int]  # 1 = responder
    segments: dict[str, np.ndarray]  # patient -> [n x C x H x W]
    fingerprint: Fingerprint

    def flatten(self, patients: list[str]) -> ImageDataset:
        images = np.concatenate([self.segments[p] for p in patients], axis=0)
        labels = np.concatenate(
            [np.full(len(self.segments[p]), self.patient_labels[p], dtype=np.int64)
             for p in patients]
        )
        groups = [p for p in patients for _ in range(len(self.segments[p]))]
        return ImageDataset(
            images=images.astype(np.float32),
            labels=labels,
            fingerprint=self.fingerprint,
            groups=groups,
            label_names=["non_responder", "responder"],
        )


def crossval(
    cohort: CohortDataset,
    config: TrainConfig,
    checkpoint: Checkpoint | None = None,
    k: int = 5,
    seed: int = 0,
    variant: int = 18,
) -> MetricsReport:
    """k-fold patient-grouped cross-validation of the fine-tuned model.

    With ``checkpoint`` the body starts from pretrained weights;
    without it each fold trains from random initialization.
    """
    plan = make_folds(cohort.patient_labels, k=k, seed=seed)
    fp = cohort.fingerprint
    fold_cms = []
    for fold in range(k):
        holdout = set(plan.fold_members(fold))
        train_patients = [p for p in cohort.patient_ids if p not in holdout]
        assert not holdout.intersection(train_patients)  # leakage guard
        train_set = cohort.flatten(train_patients)

        if checkpoint is not None:
            base = checkpoint
        else:
            model0 = build_resnet(
                ResNetConfig(variant, fp.channels, 2), seed=config.seed + fold
            )
            base = Checkpoint(
                state=model0.state_dict(),
                config=model0.config,
                label_map={0: "non_responder", 1: "responder"},
                fingerprint=fp,
            )
        tuned = finetune(base, train_set, config)
        model = tuned.build_model()

        preds, truths = [], []
        for p in sorted(holdout):
            _, cls = predict_patient(model, cohort.segments[p])
            preds.append(cls)
            truths.append(cohort.patient_labels[p])
        fold_cms.append(confusion(preds, truths))

    return MetricsReport.from_folds(fold_cms)
