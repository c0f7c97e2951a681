"""
学習モジュール

ベースモデル学習（全パラメータ、CE）と LoRA 微調整（ベース凍結、
共変量: AugMix 型一貫性 / 意味: 外れ値露出）の決定的な学習ループ。

- 最適化: モメンタム付き SGD（重み減衰・勾配クリップなし）
- 学習率: コサインスケジュール lr(t) = lr_init · ½(1 + cos(π t / T))
- シャッフル: エポックごとの並べ替え（設定シードから）
- エポックごとに key=value 形式のログを 1 行出力
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from error_handler import ConfigError, ContractError
from lora_model import (BaseModel, LoraAdapter, forward, trainable_parameters)
from models.config_models import (ModelConfig, ObjectiveConfig, ObjectiveKind, TrainConfig,
                                  TrainMode)
from models.data_models import LabeledSet
from objectives import Augmenter, augmix_objective, base_objective, oe_objective
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

Array = np.ndarray


def cosine_lr(lr_init: float, step: int, total_steps: int) -> float:
    """コサイン学習率（total_steps = 0 なら lr_init）"""
    if total_steps <= 0:
        return float(lr_init)
    return float(lr_init) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochRecord:
    """エポック単位の学習記録"""
    phase: str
    epoch: int
    loss: float
    accuracy: float
    lr: float

    def to_log(self) -> str:
        return (f"phase={self.phase} epoch={self.epoch} loss={self.loss:.6f} "
                f"acc={self.accuracy:.4f} lr={self.lr:.6g}")


@dataclass
class TrainingHistory:
    phase: str
    records: List[EpochRecord] = field(default_factory=list)
    steps: int = 0

    @property
    def initial_loss(self) -> Optional[float]:
        return self.records[0].loss if self.records else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.records[-1].loss if self.records else None


EpochCallback = Callable[[EpochRecord, object], None]


class MomentumSGD:
    """モメンタム付き SGD（配列をその場で更新）

    v ← μ v + g,  θ ← θ − lr · v
    """

    def __init__(self, parameters: Sequence[Tuple[str, Array]], momentum: float):
        self.parameters = list(parameters)
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(array) for name, array in self.parameters}

    def step(self, grads: Dict[str, Array], lr: float) -> None:
        for name, array in self.parameters:
            g = grads[name].reshape(array.shape)
            v = self.velocity[name]
            v *= self.momentum
            v += g
            array -= lr * v


def _bind(parameters: Sequence[Tuple[str, Array]]) -> Tuple[Dict[int, ad.Node], Dict[str, ad.Node]]:
    """配列 ID -> パラメータノード（ノード値は配列のビュー）"""
    by_id: Dict[int, ad.Node] = {}
    by_name: Dict[str, ad.Node] = {}
    for name, array in parameters:
        view = array.reshape(1, -1) if array.ndim == 1 else array
        node = ad.parameter(view, name=name)
        by_id[id(array)] = node
        by_name[name] = node
    return by_id, by_name


def _check_data(data: LabeledSet, phase: str) -> None:
    if data is None or len(data) == 0:
        raise ContractError(f"{phase}: training set is empty")


class Trainer:
    """ミニバッチ学習ループ

    Args:
        config: 学習設定
        phase: ログ用フェーズ名（base / cov / sem など）
        callback: エポック終了ごとに (EpochRecord, 学習対象) で呼ばれる
    """

    def __init__(self, config: TrainConfig, phase: str,
                 callback: Optional[EpochCallback] = None):
        errors = config.validate(f"train.{phase}")
        if errors:
            raise ConfigError(f"Training configuration invalid: {errors}")
        self.config = config
        self.phase = phase
        self.callback = callback
        self.logger = logging.getLogger(__name__ + '.Trainer')

    def run(self, data: LabeledSet,
            parameters: Sequence[Tuple[str, Array]],
            build_loss: Callable[[Array, Optional[Array], Dict[int, ad.Node]], ad.Node],
            predict: Callable[[Array], Array],
            target: object,
            aux_size: int = 0) -> TrainingHistory:
        """学習ループ本体

        Args:
            build_loss: (バッチ index, 補助バッチ index, 束縛) -> 損失ノード
            predict: 入力 -> 予測クラス（エポック精度用）
            target: コールバックに渡す学習対象
            aux_size: 補助集合のサイズ（0 なら補助バッチなし）
        """
        config = self.config
        n = len(data)
        batch = min(config.batch_size, n)
        batches_per_epoch = math.ceil(n / batch)
        total_steps = config.epochs * batches_per_epoch
        aux_batch = config.aux_batch_size or config.batch_size

        rng = make_rng(config.rng_seed if config.rng_seed is not None else 0)
        optimizer = MomentumSGD(parameters, config.momentum)
        bind, nodes = _bind(parameters)
        history = TrainingHistory(phase=self.phase)

        step = 0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            aux_order = rng.permutation(aux_size) if aux_size else None
            losses = []
            lr = cosine_lr(config.lr_init, step, total_steps)
            for b in range(batches_per_epoch):
                index = order[b * batch:(b + 1) * batch]
                aux_index = None
                if aux_order is not None:
                    aux_index = np.take(aux_order, np.arange(b * aux_batch, (b + 1) * aux_batch),
                                        mode='wrap')
                loss = build_loss(index, aux_index, bind)
                ad.backward(loss, nodes.values())
                lr = cosine_lr(config.lr_init, step, total_steps)
                optimizer.step({name: node.grad for name, node in nodes.items()}, lr)
                losses.append(loss.item())
                step += 1

            accuracy = float(np.mean(predict(data.inputs) == data.labels))
            record = EpochRecord(phase=self.phase, epoch=epoch,
                                 loss=float(math.fsum(losses) / len(losses)),
                                 accuracy=accuracy, lr=lr)
            history.records.append(record)
            self.logger.info(record.to_log())
            if self.callback is not None:
                self.callback(record, target)

        history.steps = step
        return history


def train_base(config: TrainConfig, data: LabeledSet, model_config: ModelConfig,
               seed: Optional[int] = None,
               callback: Optional[EpochCallback] = None) -> Tuple[BaseModel, TrainingHistory]:
    """ベースモデル学習（全パラメータを CE で学習）

    Raises:
        ContractError: 学習データが空
    """
    _check_data(data, 'base')
    if seed is None:
        seed = model_config.init_seed if model_config.init_seed is not None else 0
    model = BaseModel.initialize(model_config, seed)
    if data.input_dim != model.input_dim:
        raise ContractError(f"base: data has {data.input_dim} columns, model expects "
                            f"{model.input_dim}")
    params = trainable_parameters(model, None, TrainMode.AB)
    logger.info(f"Base training: {params.count} parameters, {len(data)} samples, "
                f"{config.epochs} epochs")

    def build_loss(index, _aux, bind):
        return base_objective(model, data.inputs[index], data.labels[index], bind)

    history = Trainer(config, 'base', callback).run(
        data, params.arrays, build_loss, lambda x: np.argmax(forward(model, None, x), axis=1),
        model)
    return model, history


def train_lora(base: BaseModel, config: TrainConfig, data: LabeledSet,
               objective: ObjectiveKind, objective_config: ObjectiveConfig,
               model_config: ModelConfig,
               aux: Optional[LabeledSet] = None,
               augmenter: Optional[Augmenter] = None,
               adapter_seed: Optional[int] = None,
               callback: Optional[EpochCallback] = None) -> Tuple[LoraAdapter, TrainingHistory]:
    """LoRA 微調整（ベースは凍結、B のみまたは A と B を学習）

    Raises:
        ConfigError: 目的関数に必要な補助データ・オーグメンターがない
        ContractError: 学習データが空、またはベースが変更された
    """
    objective = ObjectiveKind(objective)
    phase = {ObjectiveKind.COV_AUGMIX: 'cov', ObjectiveKind.SEM_OE: 'sem'}.get(objective)
    if phase is None:
        raise ConfigError(f"train_lora: objective must be cov-augmix or sem-oe, got "
                          f"{objective.value}")
    _check_data(data, phase)
    if objective is ObjectiveKind.SEM_OE and (aux is None or len(aux) == 0):
        raise ConfigError("sem-oe training requires an auxiliary outlier set")
    if objective is ObjectiveKind.COV_AUGMIX and augmenter is None:
        raise ConfigError("cov-augmix training requires an augmenter")

    base.freeze()
    fingerprint = base.fingerprint()
    if adapter_seed is None:
        adapter_seed = model_config.lora_seed if model_config.lora_seed is not None else 0
    adapter = LoraAdapter.create(base, model_config.lora_rank, adapter_seed,
                                 model_config.resolved_adapt_layers(), config.train_mode)
    adapter.objective = objective.value
    params = trainable_parameters(base, adapter, config.train_mode)
    logger.info(f"LoRA training ({objective.value}, {config.train_mode.value}): "
                f"{params.count} trainable / {params.base_count} base parameters "
                f"(ratio {params.ratio:.4f})")

    if objective is ObjectiveKind.COV_AUGMIX:
        def build_loss(index, _aux, bind):
            return augmix_objective(base, adapter, data.inputs[index], data.labels[index],
                                    augmenter, objective_config.lambda_cov, bind)
        aux_size = 0
    else:
        def build_loss(index, aux_index, bind):
            return oe_objective(base, adapter, data.inputs[index], data.labels[index],
                                aux.inputs[aux_index], objective_config.lambda_sem,
                                base.num_classes, bind)
        aux_size = len(aux)

    history = Trainer(config, phase, callback).run(
        data, params.arrays, build_loss,
        lambda x: np.argmax(forward(base, adapter, x), axis=1), adapter, aux_size=aux_size)

    if base.fingerprint() != fingerprint:
        raise ContractError("Frozen base weights changed during LoRA training")
    return adapter, history
