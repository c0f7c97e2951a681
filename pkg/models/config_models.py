"""
信頼性算術ツールキット - 実験設定データモデル

ワイルドベンチ生成・モデル構造・学習・目的関数・マージ・評価の各設定を
データクラスとして定義する。各クラスは to_dict / from_dict / validate を持つ。

Classes:
    WildBenchConfig: 合成ベンチマーク設定
    ModelConfig: MLP + LoRA 構造設定
    TrainConfig: 学習ループ設定
    ObjectiveConfig: 目的関数の重み
    MergeConfig: LoRA ベクトル合成設定
    EvalConfig: 評価プロトコル設定
    ExperimentConfig: 上記を束ねた実験全体の設定
"""

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from utils.seeding import derive_seed

logger = logging.getLogger(__name__)


class TrainMode(Enum):
    """LoRA 学習モード"""
    B_ONLY = "b-only"   # A は乱数射影として固定
    AB = "ab"


class ObjectiveKind(Enum):
    """学習目的関数"""
    BASE_CE = "base-ce"
    COV_AUGMIX = "cov-augmix"
    SEM_OE = "sem-oe"


class ScoreName(Enum):
    """信頼度スコア"""
    MSP = "msp"
    MAXLOGIT = "maxlogit"
    ENERGY = "energy"


class CorruptionFamily(Enum):
    """共変量シフトの破損ファミリー"""
    ADDITIVE_GAUSSIAN = "additive-gaussian"
    ROTATION = "rotation"
    SCALE = "scale"
    MASK = "mask"


class AuxSource(Enum):
    """補助外れ値の生成元"""
    UNIFORM_BOX = "uniform-box"
    DISJOINT_BLOBS = "disjoint-blobs"


ALL_FAMILIES = [family.value for family in CorruptionFamily]
MAX_SEVERITY = 5


def _to_plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _build(cls, data: Optional[Dict[str, Any]], enum_fields: Dict[str, type], section: str):
    """辞書からデータクラスを構築（未知キーは警告のみ）"""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        logger.warning(f"Unknown configuration keys in [{section}]: {unknown}")
    kwargs = {}
    for key in known & set(data):
        value = data[key]
        if key in enum_fields and value is not None and not isinstance(value, Enum):
            value = enum_fields[key](value)
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class WildBenchConfig:
    """合成ワイルドベンチ設定"""
    num_classes: int = 4
    input_dim: int = 2
    train_per_class: int = 300
    test_per_class: int = 200
    sem_classes: int = 2
    sem_per_class: int = 300
    aux_samples: int = 1200
    cluster_std: float = 1.0

    # ジオメトリ
    center_box: float = 5.0
    min_center_separation: float = 3.5
    sem_min_distance: float = 4.0      # 意味シフト中心と ID 中心の最小距離
    sem_margin: float = 4.0            # 意味シフト中心を置く箱の拡張幅
    aux_source: AuxSource = AuxSource.UNIFORM_BOX
    aux_blobs: int = 4
    aux_exclusion_radius: float = 2.5  # uniform-box: 全中心からの除外半径
    aux_sem_min_distance: float = 3.0  # disjoint-blobs: 補助中心と意味シフト中心の最小距離
    max_placement_attempts: int = 10000

    # 破損
    families: List[str] = field(default_factory=lambda: list(ALL_FAMILIES))
    severities: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    augment_severities: List[int] = field(default_factory=lambda: [1, 2])

    rng_seed: Optional[int] = None
    augment_seed: Optional[int] = None

    def validate(self) -> List[str]:
        errors = []
        if self.num_classes < 2:
            errors.append("wildbench.num_classes must be >= 2")
        if self.input_dim < 1:
            errors.append("wildbench.input_dim must be >= 1")
        for name in ('train_per_class', 'test_per_class', 'sem_classes', 'sem_per_class',
                     'aux_samples', 'aux_blobs', 'max_placement_attempts'):
            if getattr(self, name) < 1:
                errors.append(f"wildbench.{name} must be >= 1")
        for name in ('cluster_std', 'center_box', 'min_center_separation', 'sem_min_distance',
                     'aux_exclusion_radius', 'aux_sem_min_distance'):
            if not getattr(self, name) > 0:
                errors.append(f"wildbench.{name} must be > 0")
        if self.sem_margin < 0:
            errors.append("wildbench.sem_margin must be >= 0")
        unknown = [f for f in self.families if f not in ALL_FAMILIES]
        if unknown:
            errors.append(f"wildbench.families has unknown entries: {unknown}")
        if CorruptionFamily.ROTATION.value in self.families and self.input_dim < 2:
            errors.append("rotation family requires wildbench.input_dim >= 2")
        for name in ('severities', 'augment_severities'):
            bad = [s for s in getattr(self, name) if not 0 <= int(s) <= MAX_SEVERITY]
            if bad:
                errors.append(f"wildbench.{name} must lie in 0..{MAX_SEVERITY}: {bad}")
        return errors

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'WildBenchConfig':
        return _build(cls, data, {'aux_source': AuxSource}, 'wildbench')


@dataclass
class ModelConfig:
    """MLP 分類器 + LoRA 構造設定"""
    input_dim: int = 2
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    num_classes: int = 4
    lora_rank: int = 4
    lora_seed: Optional[int] = None
    init_seed: Optional[int] = None
    adapt_layers: Optional[List[int]] = None
    train_mode: TrainMode = TrainMode.B_ONLY

    def layer_dims(self) -> List[int]:
        return [self.input_dim] + list(self.hidden_dims) + [self.num_classes]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """各全結合層の (u, v) = (出力次元, 入力次元)"""
        dims = self.layer_dims()
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def resolved_adapt_layers(self) -> List[int]:
        """適応対象層の決定

        未指定時は隠れ層同士を結ぶ層。該当がなければランク条件を満たす層。
        """
        if self.adapt_layers is not None:
            return sorted(int(i) for i in self.adapt_layers)
        shapes = self.layer_shapes()
        hidden_to_hidden = list(range(1, len(shapes) - 1))
        if hidden_to_hidden:
            return hidden_to_hidden
        return [i for i, (u, v) in enumerate(shapes) if self.lora_rank < min(u, v)]

    def validate(self) -> List[str]:
        errors = []
        if self.input_dim < 1 or self.num_classes < 2:
            errors.append("model.input_dim must be >= 1 and model.num_classes >= 2")
        if any(h < 1 for h in self.hidden_dims):
            errors.append("model.hidden_dims entries must be >= 1")
        if self.lora_rank < 1:
            errors.append("model.lora_rank must be >= 1")
        shapes = self.layer_shapes()
        layers = self.resolved_adapt_layers()
        if not layers:
            errors.append("model.adapt_layers resolves to no layer")
        for index in layers:
            if not 0 <= index < len(shapes):
                errors.append(f"model.adapt_layers index {index} out of range 0..{len(shapes) - 1}")
                continue
            u, v = shapes[index]
            if not self.lora_rank < min(u, v):
                errors.append(
                    f"model.lora_rank {self.lora_rank} must be < min(u, v) = {min(u, v)} "
                    f"on layer {index}"
                )
        return errors

    @property
    def adapter_config(self) -> Dict[str, Any]:
        return {'rank': self.lora_rank, 'layers': self.resolved_adapt_layers(),
                'train_mode': self.train_mode.value}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'ModelConfig':
        return _build(cls, data, {'train_mode': TrainMode}, 'model')


@dataclass
class TrainConfig:
    """学習ループ設定"""
    epochs: int = 10
    lr_init: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    aux_batch_size: Optional[int] = None
    rng_seed: Optional[int] = None
    objective: ObjectiveKind = ObjectiveKind.COV_AUGMIX
    train_mode: TrainMode = TrainMode.B_ONLY

    def validate(self, section: str = 'train') -> List[str]:
        errors = []
        if self.epochs < 0:
            errors.append(f"{section}.epochs must be >= 0")
        if not self.lr_init > 0:
            errors.append(f"{section}.lr_init must be > 0")
        if not 0 <= self.momentum < 1:
            errors.append(f"{section}.momentum must lie in [0, 1)")
        if self.batch_size < 1:
            errors.append(f"{section}.batch_size must be >= 1")
        if self.aux_batch_size is not None and self.aux_batch_size < 1:
            errors.append(f"{section}.aux_batch_size must be >= 1")
        return errors

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], section: str = 'train') -> 'TrainConfig':
        return _build(cls, data, {'objective': ObjectiveKind, 'train_mode': TrainMode}, section)


@dataclass
class ObjectiveConfig:
    """目的関数の重み"""
    lambda_cov: float = 12.0
    lambda_sem: float = 0.5
    num_classes: int = 4

    def validate(self) -> List[str]:
        errors = []
        if not self.lambda_cov > 0:
            errors.append("objective.lambda_cov must be > 0")
        if not self.lambda_sem > 0:
            errors.append("objective.lambda_sem must be > 0")
        return errors

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'ObjectiveConfig':
        return _build(cls, data, {}, 'objective')


@dataclass
class MergeConfig:
    """LoRA ベクトル合成設定"""
    alpha: float = 0.5
    alpha_sweep: List[float] = field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])

    def validate(self) -> List[str]:
        errors = []
        for a in [self.alpha] + list(self.alpha_sweep):
            if not 0.0 <= a <= 1.0:
                errors.append(f"merge alpha {a} must lie in [0, 1]")
        return errors

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'MergeConfig':
        return _build(cls, data, {}, 'merge')


@dataclass
class EvalConfig:
    """評価プロトコル設定"""
    score: ScoreName = ScoreName.MSP
    families: List[str] = field(default_factory=lambda: list(ALL_FAMILIES))
    severities: List[int] = field(default_factory=lambda: [1, 2, 3])
    equal_counts: bool = True
    include_clean: bool = False
    workers: int = 4
    mixture_seed: Optional[int] = None

    def validate(self) -> List[str]:
        errors = []
        unknown = [f for f in self.families if f not in ALL_FAMILIES]
        if unknown:
            errors.append(f"eval.families has unknown entries: {unknown}")
        bad = [s for s in self.severities if not 0 <= int(s) <= MAX_SEVERITY]
        if bad:
            errors.append(f"eval.severities must lie in 0..{MAX_SEVERITY}: {bad}")
        if self.workers < 1:
            errors.append("eval.workers must be >= 1")
        return errors

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'EvalConfig':
        return _build(cls, data, {'score': ScoreName}, 'eval')


def _default_base_train() -> TrainConfig:
    return TrainConfig(epochs=40, lr_init=0.05, batch_size=64, objective=ObjectiveKind.BASE_CE)


def _default_cov_train() -> TrainConfig:
    return TrainConfig(objective=ObjectiveKind.COV_AUGMIX)


def _default_sem_train() -> TrainConfig:
    return TrainConfig(objective=ObjectiveKind.SEM_OE)


@dataclass
class ExperimentConfig:
    """実験全体の設定

    単一のマスターシードから全てのサブシードを導出する。
    """
    name: str = "trustlora-reference"
    master_seed: int = 0
    output_dir: str = "./output"
    log_level: str = "INFO"
    wildbench: WildBenchConfig = field(default_factory=WildBenchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_base: TrainConfig = field(default_factory=_default_base_train)
    train_cov: TrainConfig = field(default_factory=_default_cov_train)
    train_sem: TrainConfig = field(default_factory=_default_sem_train)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> List[str]:
        errors = []
        if self.log_level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
            errors.append(f"logging.level {self.log_level!r} is not a known level")
        errors.extend(self.wildbench.validate())
        errors.extend(self.model.validate())
        errors.extend(self.train_base.validate('train.base'))
        errors.extend(self.train_cov.validate('train.cov'))
        errors.extend(self.train_sem.validate('train.sem'))
        errors.extend(self.objective.validate())
        errors.extend(self.merge.validate())
        errors.extend(self.eval.validate())

        # 論理的整合性チェック
        if self.model.input_dim != self.wildbench.input_dim:
            errors.append("model.input_dim must equal wildbench.input_dim")
        if not (self.model.num_classes == self.wildbench.num_classes == self.objective.num_classes):
            errors.append("num_classes must agree across model, wildbench and objective")
        if self.train_base.objective is not ObjectiveKind.BASE_CE:
            errors.append("train.base.objective must be base-ce")
        if self.train_cov.objective is not ObjectiveKind.COV_AUGMIX:
            errors.append("train.cov.objective must be cov-augmix")
        if self.train_sem.objective is not ObjectiveKind.SEM_OE:
            errors.append("train.sem.objective must be sem-oe")
        return errors

    def with_resolved_seeds(self) -> 'ExperimentConfig':
        """未指定のサブシードをマスターシードから導出した複製を返す"""
        cfg = copy.deepcopy(self)
        master = int(cfg.master_seed)

        def pick(value: Optional[int], name: str) -> int:
            return int(value) if value is not None else derive_seed(master, name)

        cfg.wildbench.rng_seed = pick(cfg.wildbench.rng_seed, "wildbench/generate")
        cfg.wildbench.augment_seed = pick(cfg.wildbench.augment_seed, "wildbench/augment")
        cfg.model.init_seed = pick(cfg.model.init_seed, "model/base-init")
        cfg.model.lora_seed = pick(cfg.model.lora_seed, "model/lora")
        cfg.train_base.rng_seed = pick(cfg.train_base.rng_seed, "train/base")
        cfg.train_cov.rng_seed = pick(cfg.train_cov.rng_seed, "train/cov")
        cfg.train_sem.rng_seed = pick(cfg.train_sem.rng_seed, "train/sem")
        cfg.eval.mixture_seed = pick(cfg.eval.mixture_seed, "eval/mixture")
        return cfg

    def with_train_mode(self, mode: TrainMode) -> 'ExperimentConfig':
        cfg = copy.deepcopy(self)
        cfg.model.train_mode = mode
        cfg.train_cov = replace(cfg.train_cov, train_mode=mode)
        cfg.train_sem = replace(cfg.train_sem, train_mode=mode)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment': {
                'name': self.name,
                'master_seed': self.master_seed,
                'output_dir': self.output_dir,
            },
            'logging': {'level': self.log_level},
            'wildbench': _to_plain(asdict(self.wildbench)),
            'model': _to_plain(asdict(self.model)),
            'train': {
                'base': _to_plain(asdict(self.train_base)),
                'cov': _to_plain(asdict(self.train_cov)),
                'sem': _to_plain(asdict(self.train_sem)),
            },
            'objective': _to_plain(asdict(self.objective)),
            'merge': _to_plain(asdict(self.merge)),
            'eval': _to_plain(asdict(self.eval)),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """既定値の上に辞書を重ねて構築"""
        merged = deep_merge(cls().to_dict(), data or {})
        experiment = merged.get('experiment', {})
        train = merged.get('train', {})
        return cls(
            name=experiment.get('name', cls.name),
            master_seed=int(experiment.get('master_seed', 0)),
            output_dir=experiment.get('output_dir', cls.output_dir),
            log_level=merged.get('logging', {}).get('level', 'INFO'),
            wildbench=WildBenchConfig.from_dict(merged.get('wildbench')),
            model=ModelConfig.from_dict(merged.get('model')),
            train_base=TrainConfig.from_dict(train.get('base'), 'train.base'),
            train_cov=TrainConfig.from_dict(train.get('cov'), 'train.cov'),
            train_sem=TrainConfig.from_dict(train.get('sem'), 'train.sem'),
            objective=ObjectiveConfig.from_dict(merged.get('objective')),
            merge=MergeConfig.from_dict(merged.get('merge')),
            eval=EvalConfig.from_dict(merged.get('eval')),
        )


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """ネストした辞書の再帰マージ（override 優先）"""
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result
