"""
信頼性算術モジュール

LoRA ベクトル（学習前後のアダプター差分が誘導する重み差分 ΔW = B·A）を抽出し、
スケール付き加算・否定でベースモデルに合成する。

- ベクトルは因子 (B, A) のまま保持し、スケールは B にのみ掛ける
- 係数は有理数（fractions.Fraction）で管理し、同一ベクトルの項は係数を合算する
- 係数 0 の項は除去するので、加算→同係数の否定はベースと完全一致する
- 合成結果は常に新しい AdaptedModel（元のモデルは変更しない）
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from error_handler import ContractError
from lora_model import AdaptedModel, BaseModel, LoraAdapter
from models.config_models import TrainMode
from utils.container import content_hash

logger = logging.getLogger(__name__)

Array = np.ndarray
Coefficient = Union[Fraction, int, float, str]

VECTOR_FORMAT = "trustlora-vec-1"


def as_fraction(value: Coefficient) -> Fraction:
    """係数を有理数化（float は repr 経由で往復一致する値に）"""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ContractError(f"Coefficient must be numeric, got {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, Real):
        number = float(value)
        if not np.isfinite(number):
            raise ContractError(f"Coefficient must be finite, got {value!r}")
        return Fraction(repr(number))
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError) as e:
        raise ContractError(f"Invalid coefficient {value!r}: {e}") from e


def format_fraction(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


@dataclass(eq=False)
class LoraVector:
    """層ごとの因子化された重み差分 ΔW = B·A

    Attributes:
        layers: 層インデックス -> (B: u×r, A: r×v)
        provenance: 目的関数タグ・元チェックポイント ID など（ID 計算には含めない）
    """
    layers: Dict[int, Tuple[Array, Array]]
    provenance: Dict[str, Any] = field(default_factory=dict)
    _vector_id: Optional[str] = field(default=None, init=False, repr=False)

    def layer_indices(self) -> List[int]:
        return sorted(self.layers)

    def factors(self, index: int) -> Optional[Tuple[Array, Array]]:
        return self.layers.get(index)

    def named_arrays(self) -> List[Tuple[str, Array]]:
        arrays = []
        for index in self.layer_indices():
            B, A = self.layers[index]
            arrays.append((f"layer{index}/B", B))
            arrays.append((f"layer{index}/A", A))
        return arrays

    @property
    def vector_id(self) -> str:
        """因子の内容ハッシュ"""
        if self._vector_id is None:
            body = {'layers': self.layer_indices()}
            self._vector_id = content_hash(VECTOR_FORMAT, body, self.named_arrays())
        return self._vector_id

    @property
    def element_count(self) -> int:
        """m = Σ (|B| + |A|)"""
        return int(sum(B.size + A.size for B, A in self.layers.values()))

    def dense(self, index: int) -> Array:
        B, A = self.layers[index]
        return B @ A

    def dense_deltas(self) -> Dict[int, Array]:
        return {index: self.dense(index) for index in self.layer_indices()}

    def is_zero(self) -> bool:
        return all(not np.any(B) for B, _ in self.layers.values())


@dataclass(eq=False)
class VectorTerm:
    """係数付きベクトル（フォワードの分岐として振る舞う）"""
    vector: LoraVector
    coefficient: Fraction
    _scaled: Dict[int, Tuple[Array, Array]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.coefficient = as_fraction(self.coefficient)
        scale = float(self.coefficient)
        # スケールは B のみ
        self._scaled = {index: (scale * B, A) for index, (B, A) in self.vector.layers.items()}

    @property
    def vector_id(self) -> str:
        return self.vector.vector_id

    def layer_indices(self) -> List[int]:
        return self.vector.layer_indices()

    def factors(self, index: int) -> Optional[Tuple[Array, Array]]:
        return self._scaled.get(index)

    def describe(self) -> Dict[str, Any]:
        return {'vector_id': self.vector_id,
                'coefficient': format_fraction(self.coefficient),
                'provenance': self.vector.provenance}


def _adapter_provenance(adapter: LoraAdapter) -> Dict[str, Any]:
    return {
        'objective': adapter.objective,
        'rank': adapter.rank,
        'seed': adapter.seed,
        'train_mode': adapter.train_mode.value,
    }


def extract_vector(before: LoraAdapter, after: LoraAdapter,
                   provenance: Optional[Dict[str, Any]] = None) -> LoraVector:
    """学習前後のアダプターから ΔW = B_after·A_after − B_before·A_before を因子形で抽出

    Raises:
        ContractError: 層構成・形状の不一致、B-only での A の不一致
    """
    if before.layer_indices() != after.layer_indices():
        raise ContractError(f"Adapter layer sets differ: {before.layer_indices()} vs "
                            f"{after.layer_indices()}")
    b_only = TrainMode.B_ONLY in (before.train_mode, after.train_mode)

    layers: Dict[int, Tuple[Array, Array]] = {}
    for index in after.layer_indices():
        B_b, A_b = before.factors(index)
        B_a, A_a = after.factors(index)
        if B_b.shape != B_a.shape or A_b.shape != A_a.shape:
            raise ContractError(
                f"Layer {index}: factor shapes differ, before B{B_b.shape} A{A_b.shape}, "
                f"after B{B_a.shape} A{A_a.shape}")
        same_projection = np.array_equal(A_a, A_b)
        if b_only and not same_projection:
            raise ContractError(f"Layer {index}: projection A differs in B-only mode")

        if not np.any(B_b):
            layers[index] = (B_a.copy(), A_a.copy())
        elif same_projection:
            layers[index] = (B_a - B_b, A_a.copy())
        else:
            layers[index] = (np.hstack([B_a, -B_b]), np.vstack([A_a, A_b]))

    meta = _adapter_provenance(after)
    meta.update(provenance or {})
    vector = LoraVector(layers=layers, provenance=meta)
    logger.debug(f"Extracted vector {vector.vector_id[:12]} "
                 f"(objective={meta.get('objective')}, m={vector.element_count})")
    return vector


def vector_summary(vector: LoraVector, base: BaseModel) -> Dict[str, Any]:
    """m（ベクトル要素数）と M（ベース要素数）の報告"""
    m = vector.element_count
    M = base.parameter_count()
    return {'vector_id': vector.vector_id, 'm': m, 'M': M, 'ratio': m / M}


def _check_compatible(base: BaseModel, vector: LoraVector) -> None:
    for index in vector.layer_indices():
        if not 0 <= index < base.num_layers:
            raise ContractError(
                f"Vector layer {index} out of range 0..{base.num_layers - 1}")
        B, A = vector.layers[index]
        u, v = base.weights[index].shape
        if B.shape[0] != u or A.shape[1] != v or B.shape[1] != A.shape[0]:
            raise ContractError(
                f"Vector factors B{B.shape} A{A.shape} incompatible with layer {index} "
                f"W{(u, v)}")


def _check_alpha(alpha: Coefficient) -> Fraction:
    value = as_fraction(alpha)
    if not 0 <= value <= 1:
        raise ContractError(f"alpha must lie in [0, 1], got {float(value)}")
    return value


def _decompose(model: Union[BaseModel, AdaptedModel]) -> Tuple[BaseModel, Dict[str, Any]]:
    """モデルを（ベース, ベクトル ID -> VectorTerm）に分解

    アダプター分岐は初期状態からの差分ベクトル（係数 1）に置き換える。
    """
    if isinstance(model, BaseModel):
        return model, {}
    terms: Dict[str, VectorTerm] = {}
    for branch in model.branches:
        if isinstance(branch, VectorTerm):
            term = branch
        elif isinstance(branch, LoraAdapter):
            term = VectorTerm(extract_vector(branch.fresh(), branch), Fraction(1))
        else:
            raise ContractError(f"Unsupported branch type {type(branch).__name__}")
        _accumulate(terms, term.vector, term.coefficient)
    return model.base, terms


def _accumulate(terms: Dict[str, VectorTerm], vector: LoraVector, coefficient: Fraction) -> None:
    key = vector.vector_id
    if key in terms:
        terms[key] = VectorTerm(terms[key].vector, terms[key].coefficient + coefficient)
    else:
        terms[key] = VectorTerm(vector, coefficient)


def compose(model: Union[BaseModel, AdaptedModel],
            additions: Iterable[Tuple[LoraVector, Coefficient]],
            operation: str = "compose",
            extra: Optional[Dict[str, Any]] = None) -> AdaptedModel:
    """W' = W_current + Σ c_t ΔW_t（係数自由の一般形）

    Raises:
        ContractError: 形状不一致
    """
    base, terms = _decompose(model)
    additions = [(vector, as_fraction(c)) for vector, c in additions]
    for vector, _ in additions:
        _check_compatible(base, vector)
    for vector, coefficient in additions:
        _accumulate(terms, vector, coefficient)

    kept = sorted((t for t in terms.values() if t.coefficient != 0), key=lambda t: t.vector_id)
    provenance = {
        'operation': operation,
        'base_id': base.fingerprint(),
        'vectors': [t.describe() for t in kept],
    }
    if isinstance(model, AdaptedModel) and model.provenance:
        provenance['parent'] = model.provenance
    provenance.update(extra or {})
    logger.info(f"{operation}: {len(kept)} active vector term(s) "
                f"[{', '.join(f'{t.vector_id[:8]}x{format_fraction(t.coefficient)}' for t in kept)}]")
    return AdaptedModel(base=base, branches=tuple(kept), provenance=provenance)


def merge_add(base: Union[BaseModel, AdaptedModel], tau_cov: LoraVector, tau_sem: LoraVector,
              alpha: Coefficient) -> AdaptedModel:
    """W' = W + (1−α)ΔW_cov + αΔW_sem

    Raises:
        ContractError: alpha が [0, 1] 外、または形状不一致
    """
    a = _check_alpha(alpha)
    return compose(base, [(tau_cov, Fraction(1) - a), (tau_sem, a)],
                   operation="merge_add", extra={'alpha': format_fraction(a)})


def merge_negate(model: Union[BaseModel, AdaptedModel], tau: LoraVector,
                 alpha: Coefficient) -> AdaptedModel:
    """W' = W_current − α·ΔW

    Raises:
        ContractError: alpha が [0, 1] 外、または形状不一致
    """
    a = _check_alpha(alpha)
    return compose(model, [(tau, -a)], operation="merge_negate",
                   extra={'alpha': format_fraction(a)})


def merge_sequential(model: Union[BaseModel, AdaptedModel], tau: LoraVector,
                     beta: Coefficient) -> AdaptedModel:
    """W' = W + (1−β)·(現在の差分) + β·ΔW_τ

    merge_add の結果に 3 本目のベクトルを凸結合で加える。
    α = 1/2, β = 1/3 なら 3 本が等しく 1/3 ずつになる。

    Raises:
        ContractError: beta が [0, 1] 外、または形状不一致
    """
    b = _check_alpha(beta)
    _, terms = _decompose(model)
    additions = [(t.vector, (Fraction(1) - b) * t.coefficient - t.coefficient)
                 for t in terms.values()]
    additions.append((tau, b))
    return compose(model, additions, operation="merge_sequential",
                   extra={'beta': format_fraction(b)})


def net_vector_terms(model: AdaptedModel) -> List[Tuple[LoraVector, Fraction]]:
    """モデルが保持する正味の（ベクトル, 係数）"""
    _, terms = _decompose(model)
    return [(t.vector, t.coefficient) for t in sorted(terms.values(), key=lambda t: t.vector_id)
            if t.coefficient != 0]


def restore_base(model: AdaptedModel) -> AdaptedModel:
    """正味ベクトルの否定を適用してベースに戻す"""
    negated = [(vector, -coefficient) for vector, coefficient in net_vector_terms(model)]
    return compose(model, negated, operation="restore")


def dense_sum(base: BaseModel, weighted: Sequence[Tuple[LoraVector, Coefficient]]) -> BaseModel:
    """W + Σ c_t (B_t A_t) を明示的に計算したモデル"""
    dense = base.copy()
    for vector, coefficient in weighted:
        _check_compatible(base, vector)
        scale = float(as_fraction(coefficient))
        for index, delta in vector.dense_deltas().items():
            dense.weights[index] = dense.weights[index] + scale * delta
    return dense
