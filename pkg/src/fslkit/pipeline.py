"""Three-stage training protocol, episodic evaluation, and run logging.

Stage 1 trains the backbone with a classification head on the train
split, resizing inputs with plain bilinear. Stage 2 puts a freshly
initialized learnable resizer in front of the pretrained backbone and
continues the same classification objective. Stage 3 drops the head and
fine-tunes backbone, resizer, and the similarity-fusion weights
episodically with prototype scoring. Every stage selects its checkpoint
by episodic validation accuracy and appends one JSON record per epoch to
the run log.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, bilinear_resize, cross_entropy_loss
from .backbone import (
    BackboneParams,
    HeadParams,
    backbone_forward,
    head_forward,
    init_backbone,
    init_head,
)
from .checkpoint import Checkpoint
from .data import DatasetIndex, derive_episode_seed, sample_episode
from .errors import CapacityError, ConfigError, FormatError
from .metric import MetricParams, compute_prototypes, score_matrix
from .optim import SGD, Adam
from .resizer import ResizerConfig, ResizerParams, init_resizer, resizer_forward

STAGES = ("backbone", "joint", "finetune")

_DEFAULT_LR = {"adam": 1e-3, "sgd": 5e-3}
_DEFAULT_LR_DECAY = {"adam": 0.1, "sgd": 0.5}

# sub-stream tags for deriving independent RNG streams from the run seed
_TAG_INIT_BACKBONE = 1
_TAG_INIT_HEAD = 2
_TAG_INIT_RESIZER = 3
_TAG_BATCH = 4
_TAG_VAL = 5
_TAG_TRAIN_EPISODES = 6


def _substream(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence((seed, *tags)).generate_state(1)[0])


@dataclass
class TrainConfig:
    """Settings for one training stage.

    ``way``/``shot``/``query`` describe the training episodes and are
    required exactly when ``stage == "finetune"``; the ``val_*`` protocol
    applies to every stage. ``mar_input_size`` pre-scales images with
    bilinear before they enter the learnable resizer; ``no_mar`` bypasses
    the resizer entirely (plain bilinear straight to the backbone input).
    """

    stage: str
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float | None = None
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_decay_factor: float | None = None
    lr_decay_every: int = 20
    episodes_per_epoch: int = 100
    way: int | None = None
    shot: int | None = None
    query: int | None = None
    val_episodes: int = 200
    val_way: int = 5
    val_shot: int = 1
    val_query: int = 15
    input_size: int = 16
    mar_input_size: int | None = None
    mar_channels: int = 16
    mar_blocks: int = 4
    mar_reduction: int = 4
    no_mar: bool = False
    frozen_metric: bool = False
    metric_euclid_init: float = 1.24
    metric_cosine_init: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.optimizer not in _DEFAULT_LR:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        episode_fields = (self.way, self.shot, self.query)
        if self.stage == "finetune":
            if any(v is None for v in episode_fields):
                raise ConfigError("finetune requires way, shot, and query")
        elif any(v is not None for v in episode_fields):
            raise ConfigError("way/shot/query are only valid for the finetune stage")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("batch_size and episodes_per_epoch must be positive")
        if self.val_episodes < 1 or self.val_way < 1 or self.val_shot < 1 or self.val_query < 1:
            raise ConfigError("validation protocol fields must be positive")
        if self.input_size < 16:
            raise ConfigError("input_size must be at least 16 (four pooling stages)")
        if self.mar_input_size is not None and self.mar_input_size < 7:
            raise ConfigError("mar_input_size must be at least 7")
        if self.mar_channels % self.mar_reduction != 0:
            raise ConfigError("mar_channels must be divisible by mar_reduction")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be positive")

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "TrainConfig":
        """Build a config from a JSON-style dict; ``overrides`` with value
        ``None`` are ignored. Unknown keys are rejected."""
        merged = dict(data)
        for key, value in overrides.items():
            if value is not None:
                merged[key] = value
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(merged) - valid)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**merged)

    @property
    def effective_lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else _DEFAULT_LR[self.optimizer]

    @property
    def effective_lr_decay(self) -> float:
        if self.lr_decay_factor is not None:
            return self.lr_decay_factor
        return _DEFAULT_LR_DECAY[self.optimizer]


@dataclass
class EpochRecord:
    """One run-log line; epoch 0 records the state before any update."""

    stage: str
    epoch: int
    train_loss: float
    val_accuracy: float
    euclid_weight: float
    cosine_weight: float
    learning_rate: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage": self.stage,
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy,
                "euclid_weight": self.euclid_weight,
                "cosine_weight": self.cosine_weight,
                "learning_rate": self.learning_rate,
            }
        )


@dataclass
class EpisodeResult:
    """Raw scores for one evaluation episode."""

    logits: np.ndarray
    query_labels: np.ndarray
    accuracy: float


@dataclass
class Model:
    """Everything needed to embed images and score episodes."""

    backbone: BackboneParams
    metric: MetricParams
    input_hw: tuple[int, int]
    head: HeadParams | None = None
    resizer: ResizerParams | None = None
    resizer_config: ResizerConfig | None = None
    prescale_hw: tuple[int, int] | None = None

    def embed(self, images: np.ndarray) -> Tensor:
        """Resize a raw image batch to the backbone input size (through the
        learnable resizer when present) and embed it."""
        x = Tensor(images)
        if self.resizer is not None:
            if self.prescale_hw is not None and self.prescale_hw != images.shape[2:]:
                x = bilinear_resize(x, *self.prescale_hw)
            x = resizer_forward(x, self.resizer, self.resizer_config)
        else:
            x = bilinear_resize(x, *self.input_hw)
        return backbone_forward(x, self.backbone)


# ----------------------------------------------------------------------
# checkpoint conversion
# ----------------------------------------------------------------------


def model_to_checkpoint(
    model: Model, stage: str, seed: int, epoch: int, val_accuracy: float
) -> Checkpoint:
    blocks: dict[str, np.ndarray] = {}
    for name, t in model.backbone.named_parameters().items():
        blocks[f"backbone.{name}"] = t.data.copy()
    if model.head is not None:
        for name, t in model.head.named_parameters().items():
            blocks[f"head.{name}"] = t.data.copy()
    if model.resizer is not None:
        for name, t in model.resizer.named_parameters().items():
            blocks[f"resizer.{name}"] = t.data.copy()
    for name, t in model.metric.named_parameters().items():
        blocks[f"metric.{name}"] = t.data.copy()
    blocks["config.input_h"] = np.float64(model.input_hw[0])
    blocks["config.input_w"] = np.float64(model.input_hw[1])
    if model.prescale_hw is not None:
        blocks["config.prescale_h"] = np.float64(model.prescale_hw[0])
        blocks["config.prescale_w"] = np.float64(model.prescale_hw[1])
    return Checkpoint(stage=stage, blocks=blocks, seed=seed, epoch=epoch,
                      val_accuracy=val_accuracy)


def checkpoint_to_model(ckpt: Checkpoint, trainable: bool = False) -> Model:
    """Rebuild a model from checkpoint blocks.

    ``trainable`` controls whether backbone/head/resizer tensors take part
    in gradient accumulation; the metric weights always come back frozen
    (training stages install their own metric parameters).
    """
    blocks = ckpt.blocks

    def block(name: str) -> np.ndarray:
        if name not in blocks:
            raise FormatError(f"checkpoint is missing block {name!r}")
        return blocks[name]

    def tensor(name: str) -> Tensor:
        return Tensor(block(name).copy(), requires_grad=trainable)

    kernels, biases = [], []
    i = 0
    while f"backbone.stage{i}.kernel" in blocks:
        kernels.append(tensor(f"backbone.stage{i}.kernel"))
        biases.append(tensor(f"backbone.stage{i}.bias"))
        i += 1
    if not kernels:
        raise FormatError("checkpoint has no backbone blocks")
    backbone = BackboneParams(kernels, biases)

    head = None
    if "head.weight" in blocks:
        head = HeadParams(tensor("head.weight"), tensor("head.bias"))

    input_hw = (int(block("config.input_h")), int(block("config.input_w")))
    prescale_hw = None
    if "config.prescale_h" in blocks:
        prescale_hw = (int(block("config.prescale_h")), int(block("config.prescale_w")))

    resizer = None
    resizer_config = None
    if "resizer.conv7.kernel" in blocks:
        conv7 = block("resizer.conv7.kernel")
        feature_channels, in_channels = conv7.shape[0], conv7.shape[1]
        num_blocks = 0
        while f"resizer.block{num_blocks}.conv_a.kernel" in blocks:
            num_blocks += 1
        squeeze_rows = block("resizer.block0.attn.squeeze_weight").shape[0]
        resizer_config = ResizerConfig(
            out_h=input_hw[0],
            out_w=input_hw[1],
            in_channels=in_channels,
            feature_channels=feature_channels,
            num_blocks=num_blocks,
            reduction=feature_channels // squeeze_rows,
        )
        resizer = init_resizer(resizer_config, seed=0)
        for name, t in resizer.named_parameters().items():
            stored = block(f"resizer.{name}")
            if stored.shape != t.data.shape:
                raise FormatError(
                    f"resizer block {name!r} has shape {stored.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = stored.copy()
            t.requires_grad = trainable
            t.grad = np.zeros_like(t.data) if trainable else None

    metric = MetricParams(
        euclid_weight=Tensor(block("metric.euclid_weight").copy()),
        cosine_weight=Tensor(block("metric.cosine_weight").copy()),
        frozen=True,
    )
    return Model(
        backbone=backbone,
        metric=metric,
        input_hw=input_hw,
        head=head,
        resizer=resizer,
        resizer_config=resizer_config,
        prescale_hw=prescale_hw,
    )


# ----------------------------------------------------------------------
# shared training machinery
# ----------------------------------------------------------------------


def _make_optimizer(params: list[Tensor], config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, lr=config.effective_lr, weight_decay=config.weight_decay)
    return SGD(params, lr=config.effective_lr, momentum=config.momentum,
               weight_decay=config.weight_decay)


def _append_log(log_path: Path | str | None, record: EpochRecord) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json())
        fh.write("\n")


def _load_split_arrays(data: DatasetIndex, split: str) -> tuple[np.ndarray, np.ndarray]:
    classes = data.split_classes(split)
    if not classes:
        raise CapacityError(f"split {split!r} has no classes")
    images, labels = [], []
    for label, cls in enumerate(classes):
        for rec in data.samples[cls]:
            images.append(data.load(rec))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def _episode_logits(model: Model, episode) -> tuple[np.ndarray, np.ndarray]:
    emb = model.embed(np.concatenate([episode.support_images, episode.query_images]))
    s = episode.support_images.shape[0]
    protos = compute_prototypes(emb[:s], episode.support_labels, num_classes=episode.way)
    logits = score_matrix(emb[s:], protos, model.metric)
    return logits.data, episode.query_labels


def _validate(model: Model, data: DatasetIndex, config: TrainConfig) -> float:
    """Episodic accuracy (percent) on the validation split under fixed
    per-run episode seeds, so every epoch sees the same episodes."""
    val_seed = _substream(config.seed, _TAG_VAL)
    accs = []
    for e in range(config.val_episodes):
        episode = sample_episode(
            data, "val", config.val_way, config.val_shot, config.val_query,
            derive_episode_seed(val_seed, e),
        )
        logits, labels = _episode_logits(model, episode)
        accs.append(float((logits.argmax(axis=1) == labels).mean()))
    return float(np.mean(accs)) * 100.0


def _classification_loss(model: Model, images: np.ndarray, labels: np.ndarray) -> Tensor:
    logits = head_forward(model.embed(images), model.head)
    return cross_entropy_loss(logits, labels)


def _run_classification_stage(
    config: TrainConfig,
    data: DatasetIndex,
    model: Model,
    params: list[Tensor],
    log_path: Path | str | None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    images, labels = _load_split_arrays(data, "train")
    n = images.shape[0]
    opt = _make_optimizer(params, config)
    batch_rng = np.random.default_rng(_substream(config.seed, _TAG_BATCH))
    records: list[EpochRecord] = []

    # pre-update probe: loss on the first samples, validation at init
    probe = slice(0, min(config.batch_size, n))
    loss0 = _classification_loss(model, images[probe], labels[probe]).item()
    val0 = _validate(model, data, config)
    record = EpochRecord(config.stage, 0, loss0, val0, *model.metric.values(), opt.lr)
    records.append(record)
    _append_log(log_path, record)
    best_val = val0
    best = model_to_checkpoint(model, config.stage, config.seed, 0, val0)

    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = _classification_loss(model, images[idx], labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = _validate(model, data, config)
        record = EpochRecord(config.stage, epoch, float(np.mean(losses)), val,
                             *model.metric.values(), opt.lr)
        records.append(record)
        _append_log(log_path, record)
        if val > best_val:
            best_val = val
            best = model_to_checkpoint(model, config.stage, config.seed, epoch, val)
        if epoch % config.lr_decay_every == 0:
            opt.lr *= config.effective_lr_decay
    return best, records


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------


def train_backbone_stage(
    config: TrainConfig, data: DatasetIndex, log_path: Path | str | None = None
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Stage 1: classification pretraining of the backbone over plain
    bilinear-resized inputs; keeps the best-validation checkpoint."""
    if config.stage != "backbone":
        raise ConfigError(f"expected stage 'backbone', got {config.stage!r}")
    train_classes = data.split_classes("train")
    if not train_classes:
        raise CapacityError("train split has no classes")
    in_channels = data.image_shape[0]
    backbone = init_backbone(_substream(config.seed, _TAG_INIT_BACKBONE), in_channels)
    head = init_head(_substream(config.seed, _TAG_INIT_HEAD), len(train_classes),
                     backbone.embed_dim)
    model = Model(
        backbone=backbone,
        metric=MetricParams.create(1.0, 0.0, frozen=True),
        input_hw=(config.input_size, config.input_size),
        head=head,
    )
    params = backbone.parameters() + head.parameters()
    return _run_classification_stage(config, data, model, params, log_path)


def train_joint_stage(
    config: TrainConfig,
    data: DatasetIndex,
    base: Checkpoint,
    log_path: Path | str | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Stage 2: attach a freshly initialized resizer (unless ``no_mar``)
    in front of the pretrained backbone and continue classification."""
    if config.stage != "joint":
        raise ConfigError(f"expected stage 'joint', got {config.stage!r}")
    if base.stage != "backbone":
        raise ConfigError(f"joint training needs a backbone-stage base, got {base.stage!r}")
    loaded = checkpoint_to_model(base, trainable=True)
    if loaded.head is None:
        raise ConfigError("base checkpoint lacks a classification head")
    model = Model(
        backbone=loaded.backbone,
        metric=MetricParams.create(1.0, 0.0, frozen=True),
        input_hw=(config.input_size, config.input_size),
        head=loaded.head,
    )
    params = model.backbone.parameters() + model.head.parameters()
    if not config.no_mar:
        resizer_config = ResizerConfig(
            out_h=config.input_size,
            out_w=config.input_size,
            in_channels=data.image_shape[0],
            feature_channels=config.mar_channels,
            num_blocks=config.mar_blocks,
            reduction=config.mar_reduction,
        )
        model.resizer = init_resizer(resizer_config,
                                     _substream(config.seed, _TAG_INIT_RESIZER))
        model.resizer_config = resizer_config
        if config.mar_input_size is not None:
            model.prescale_hw = (config.mar_input_size, config.mar_input_size)
        params = params + model.resizer.parameters()
    return _run_classification_stage(config, data, model, params, log_path)


def finetune_stage(
    config: TrainConfig,
    data: DatasetIndex,
    base: Checkpoint,
    log_path: Path | str | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Stage 3: episodic fine-tuning of backbone, resizer, and the
    similarity-fusion weights; the classification head is dropped."""
    if config.stage != "finetune":
        raise ConfigError(f"expected stage 'finetune', got {config.stage!r}")
    if base.stage != "joint":
        raise ConfigError(f"fine-tuning needs a joint-stage base, got {base.stage!r}")
    loaded = checkpoint_to_model(base, trainable=True)
    if config.no_mar and loaded.resizer is not None:
        raise ConfigError("no_mar is set but the base checkpoint contains a resizer")
    metric = MetricParams.create(
        config.metric_euclid_init, config.metric_cosine_init, frozen=config.frozen_metric
    )
    model = Model(
        backbone=loaded.backbone,
        metric=metric,
        input_hw=loaded.input_hw,
        resizer=loaded.resizer,
        resizer_config=loaded.resizer_config,
        prescale_hw=loaded.prescale_hw,
    )
    params = model.backbone.parameters() + metric.parameters()
    if model.resizer is not None:
        params = params + model.resizer.parameters()
    opt = _make_optimizer(params, config)
    records: list[EpochRecord] = []

    def train_episode_loss(epoch: int, e: int, update: bool) -> float:
        episode = sample_episode(
            data, "train", config.way, config.shot, config.query,
            _substream(config.seed, _TAG_TRAIN_EPISODES, epoch, e),
        )
        emb = model.embed(
            np.concatenate([episode.support_images, episode.query_images])
        )
        s = episode.support_images.shape[0]
        protos = compute_prototypes(emb[:s], episode.support_labels,
                                    num_classes=episode.way)
        logits = score_matrix(emb[s:], protos, model.metric)
        loss = cross_entropy_loss(logits, episode.query_labels)
        if update:
            opt.zero_grad()
            loss.backward()
            opt.step()
        return loss.item()

    probe_losses = [train_episode_loss(0, e, update=False)
                    for e in range(min(10, config.episodes_per_epoch))]
    val0 = _validate(model, data, config)
    record = EpochRecord(config.stage, 0, float(np.mean(probe_losses)), val0,
                         *metric.values(), opt.lr)
    records.append(record)
    _append_log(log_path, record)
    best_val = val0
    best = model_to_checkpoint(model, config.stage, config.seed, 0, val0)

    for epoch in range(1, config.epochs + 1):
        losses = [train_episode_loss(epoch, e, update=True)
                  for e in range(config.episodes_per_epoch)]
        val = _validate(model, data, config)
        record = EpochRecord(config.stage, epoch, float(np.mean(losses)), val,
                             *metric.values(), opt.lr)
        records.append(record)
        _append_log(log_path, record)
        if val > best_val:
            best_val = val
            best = model_to_checkpoint(model, config.stage, config.seed, epoch, val)
        if epoch % config.lr_decay_every == 0:
            opt.lr *= config.effective_lr_decay
    return best, records


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


def evaluate_detailed(
    ckpt: Checkpoint,
    data: DatasetIndex,
    split: str,
    way: int,
    shot: int,
    query: int,
    num_episodes: int,
    seed: int,
) -> list[EpisodeResult]:
    """Score ``num_episodes`` independent episodes; episode ``e`` is fully
    determined by ``(seed, e)`` regardless of evaluation order."""
    if num_episodes < 1:
        raise ValueError("num_episodes must be positive")
    model = checkpoint_to_model(ckpt, trainable=False)
    results = []
    for e in range(num_episodes):
        episode = sample_episode(data, split, way, shot, query,
                                 derive_episode_seed(seed, e))
        logits, labels = _episode_logits(model, episode)
        acc = float((logits.argmax(axis=1) == labels).mean())
        results.append(EpisodeResult(logits=logits, query_labels=labels, accuracy=acc))
    return results


def evaluate(
    ckpt: Checkpoint,
    data: DatasetIndex,
    split: str,
    way: int,
    shot: int,
    query: int,
    num_episodes: int,
    seed: int,
) -> tuple[float, float]:
    """Mean episode accuracy (x100) and its 95% confidence half-width."""
    results = evaluate_detailed(ckpt, data, split, way, shot, query, num_episodes, seed)
    accs = np.array([r.accuracy for r in results])
    mean = float(accs.mean()) * 100.0
    if accs.size > 1:
        half = 1.96 * float(accs.std(ddof=1)) / float(np.sqrt(accs.size)) * 100.0
    else:
        half = 0.0
    return mean, half
