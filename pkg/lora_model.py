"""
LoRA 付き MLP 分類器モジュール

全結合層ごとに任意の LoRA 分岐 z = W x̂ + B A x̂ + b を持つ小型 MLP。
- ベースモデル（W, b）の初期化と凍結
- 乱数射影初期化のアダプター（A: シード付き標準正規、B: ゼロ）
- 数値フォワードとテープ付きフォワード
- 学習対象パラメータの列挙
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from error_handler import ConfigError, DimensionError
from models.config_models import ModelConfig, TrainMode
from utils.seeding import PRNG_NAME, make_rng

Array = np.ndarray

logger = logging.getLogger(__name__)


@dataclass
class BaseModel:
    """ベースモデル（θ_pre）

    Attributes:
        config: 構造設定
        weights: 層ごとの W (u×v)
        biases: 層ごとの b (長さ u)
        frozen: LoRA 学習中は True
    """
    config: ModelConfig
    weights: List[Array]
    biases: List[Array]
    frozen: bool = False

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> 'BaseModel':
        """He 正規分布で W を、ゼロで b を初期化"""
        weights, biases = [], []
        for index, (u, v) in enumerate(config.layer_shapes()):
            rng = make_rng([seed, index])
            weights.append(rng.standard_normal((u, v)) * np.sqrt(2.0 / v))
            biases.append(np.zeros(u))
        return cls(config=config, weights=weights, biases=biases)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return int(self.weights[-1].shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def architecture(self) -> Dict[str, Any]:
        return {
            'input_dim': self.input_dim,
            'hidden_dims': [int(w.shape[0]) for w in self.weights[:-1]],
            'num_classes': self.num_classes,
        }

    def parameter_count(self) -> int:
        """Σ (u·v + u)"""
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def freeze(self) -> 'BaseModel':
        self.frozen = True
        return self

    def copy(self) -> 'BaseModel':
        return BaseModel(config=self.config,
                         weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases],
                         frozen=self.frozen)

    def fingerprint(self) -> str:
        """全重みの SHA-256"""
        digest = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            digest.update(np.ascontiguousarray(w, dtype='<f8').tobytes())
            digest.update(np.ascontiguousarray(b, dtype='<f8').tobytes())
        return digest.hexdigest()


def generate_projection(seed: int, layer_index: int, rank: int, v: int) -> Array:
    """A (r×v) を (seed, layer) から決定的に生成"""
    return make_rng([seed, layer_index]).standard_normal((rank, v))


@dataclass
class LoraLayer:
    """1 層分の LoRA 因子"""
    index: int
    A: Array
    B: Array


@dataclass
class LoraAdapter:
    """層ごとの LoRA 分岐の集合

    A は生成シードから再現でき、B-only モードでは学習中も不変。
    """
    rank: int
    seed: int
    train_mode: TrainMode
    layers: Dict[int, LoraLayer]
    objective: Optional[str] = None
    prng: str = PRNG_NAME

    @classmethod
    def create(cls, base: BaseModel, rank: int, seed: int,
               layer_indices: Sequence[int],
               train_mode: TrainMode = TrainMode.B_ONLY) -> 'LoraAdapter':
        """B = 0、A = 乱数射影で新規アダプターを作成"""
        layers = {}
        for index in sorted(int(i) for i in layer_indices):
            if not 0 <= index < base.num_layers:
                raise ConfigError(
                    f"Adapter layer index {index} out of range 0..{base.num_layers - 1}")
            u, v = base.weights[index].shape
            if not 1 <= rank < min(u, v):
                raise ConfigError(f"LoRA rank {rank} must satisfy 1 <= r < min(u, v) = "
                                  f"{min(u, v)} on layer {index}")
            layers[index] = LoraLayer(index=index,
                                      A=generate_projection(seed, index, rank, v),
                                      B=np.zeros((u, rank)))
        logger.debug(f"Created LoRA adapter rank={rank} seed={seed} layers={sorted(layers)} "
                     f"mode={TrainMode(train_mode).value}")
        return cls(rank=rank, seed=seed, train_mode=train_mode, layers=layers)

    @classmethod
    def from_config(cls, base: BaseModel, config: ModelConfig, seed: int) -> 'LoraAdapter':
        return cls.create(base, config.lora_rank, seed,
                          config.resolved_adapt_layers(), config.train_mode)

    def layer_indices(self) -> List[int]:
        return sorted(self.layers)

    def factors(self, index: int) -> Optional[Tuple[Array, Array]]:
        layer = self.layers.get(index)
        return None if layer is None else (layer.B, layer.A)

    def copy(self) -> 'LoraAdapter':
        return LoraAdapter(
            rank=self.rank, seed=self.seed, train_mode=self.train_mode,
            layers={i: LoraLayer(i, l.A.copy(), l.B.copy()) for i, l in self.layers.items()},
            objective=self.objective, prng=self.prng)

    def fresh(self) -> 'LoraAdapter':
        """同じシード・形状で B = 0 の初期状態"""
        return LoraAdapter(
            rank=self.rank, seed=self.seed, train_mode=self.train_mode,
            layers={i: LoraLayer(i, generate_projection(self.seed, i, self.rank, l.A.shape[1]),
                                 np.zeros_like(l.B))
                    for i, l in self.layers.items()},
            objective=None, prng=self.prng)


BranchSet = Union[None, LoraAdapter, Sequence[Any]]


def _as_branches(adapters: BranchSet) -> Tuple[Any, ...]:
    if adapters is None:
        return ()
    if hasattr(adapters, 'factors'):
        return (adapters,)
    return tuple(adapters)


def _validate_branches(model: BaseModel, branches: Tuple[Any, ...]) -> None:
    for branch in branches:
        for index in branch.layer_indices():
            if not 0 <= index < model.num_layers:
                raise ConfigError(
                    f"Adapter layer index {index} out of range 0..{model.num_layers - 1}")
            B, A = branch.factors(index)
            u, v = model.weights[index].shape
            if B.shape[0] != u or A.shape[1] != v or B.shape[1] != A.shape[0]:
                raise DimensionError(
                    f"Adapter factors B{B.shape} A{A.shape} incompatible with layer "
                    f"{index} W{(u, v)}")


def forward_graph(model: BaseModel, adapters: BranchSet, x,
                  bind: Optional[Dict[int, ad.Node]] = None) -> Tuple[ad.Node, List[ad.Node]]:
    """テープ付きフォワード

    Args:
        bind: id(配列) -> パラメータノード。未束縛の配列は定数扱い。

    Returns:
        (ロジット, 各層の非線形前出力)
    """
    bind = bind or {}
    branches = _as_branches(adapters)
    x = ad.as_matrix(x)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"Input has {x.shape[1]} columns, model expects {model.input_dim}")
    _validate_branches(model, branches)

    def leaf(array: Array) -> ad.Node:
        node = bind.get(id(array))
        return node if node is not None else ad.constant(array)

    h = ad.constant(x)
    pre_activations = []
    last = model.num_layers - 1
    for index, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = ad.matmul(h, ad.transpose(leaf(W)))
        for branch in branches:
            pair = branch.factors(index)
            if pair is None:
                continue
            B, A = pair
            z = ad.add(z, ad.matmul(ad.matmul(h, ad.transpose(leaf(A))), ad.transpose(leaf(B))))
        bias_node = bind.get(id(b))
        if bias_node is None:
            bias_node = ad.constant(b.reshape(1, -1))
        z = ad.add_row_bias(z, bias_node)
        pre_activations.append(z)
        h = z if index == last else ad.relu(z)
    return h, pre_activations


def forward(model: BaseModel, adapters: BranchSet, x) -> Array:
    """LoRA 付きフォワード。アダプターなしなら z = W x̂ + b"""
    logits, _ = forward_graph(model, adapters, x)
    return logits.value


def pre_activations(model: BaseModel, adapters: BranchSet, x) -> List[Array]:
    """各層の非線形前出力"""
    _, layers = forward_graph(model, adapters, x)
    return [z.value for z in layers]


@dataclass
class AdaptedModel:
    """ベースモデル + 分岐（アダプターまたはスケール済みベクトル）"""
    base: BaseModel
    branches: Tuple[Any, ...] = ()
    provenance: Dict[str, Any] = field(default_factory=dict)

    def logits(self, x) -> Array:
        return forward(self.base, self.branches, x)

    def predict(self, x) -> Array:
        return np.argmax(self.logits(x), axis=1)

    @property
    def num_classes(self) -> int:
        return self.base.num_classes


@dataclass
class TrainableParameters:
    """学習対象パラメータと件数"""
    arrays: List[Tuple[str, Array]]
    count: int
    base_count: int

    @property
    def ratio(self) -> float:
        return self.count / self.base_count


def trainable_parameters(model: BaseModel, adapters: Optional[LoraAdapter],
                         train_mode: TrainMode) -> TrainableParameters:
    """学習対象パラメータの列挙

    アダプターありならベースは常に凍結。B-only は B のみ、A-and-B は B と A。
    アダプターなしはベースの全パラメータ。
    """
    base_count = model.parameter_count()
    arrays: List[Tuple[str, Array]] = []
    if adapters is None:
        for index, (W, b) in enumerate(zip(model.weights, model.biases)):
            arrays.append((f"W{index}", W))
            arrays.append((f"b{index}", b))
    else:
        for index in adapters.layer_indices():
            layer = adapters.layers[index]
            arrays.append((f"B{index}", layer.B))
            if train_mode is TrainMode.AB:
                arrays.append((f"A{index}", layer.A))
    count = int(sum(a.size for _, a in arrays))
    return TrainableParameters(arrays=arrays, count=count, base_count=base_count)
