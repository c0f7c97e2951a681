"""
チェックポイント管理モジュール

モデル・LoRA ベクトルの保存／読み込みと成果物レジストリを扱う。
- チェックポイント（trustlora-ckpt-1）: ベース重み + 分岐（アダプター／係数付きベクトル）
- B-only アダプターは {seed, B} のみ保存し、A は読み込み時に再生成
- LoRA ベクトル（trustlora-vec-1）: 因子 (B, A) + 由来情報
- 成果物 ID は実効的な重みの内容ハッシュ（由来情報・保存方式は含めない）
- レジストリ（registry.json）: 別名 -> 成果物
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from error_handler import (ArtifactResolutionError, CheckpointLoadError,
                           CheckpointManifestError)
from lora_model import AdaptedModel, BaseModel, LoraAdapter, LoraLayer, generate_projection
from models.config_models import ModelConfig, TrainMode
from reliability_arithmetic import (VECTOR_FORMAT, LoraVector, VectorTerm, as_fraction,
                                    format_fraction)
from utils.container import (MANIFEST_NAME, atomic_write_text, content_hash,
                             read_container, read_manifest, write_container)
from utils.seeding import PRNG_NAME

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trustlora-ckpt-1"
LAYER_ORDER = "input-to-output"
REGISTRY_NAME = "registry.json"

ModelLike = Union[BaseModel, AdaptedModel]


def _as_adapted(model: ModelLike) -> AdaptedModel:
    return model if isinstance(model, AdaptedModel) else AdaptedModel(base=model)


def checkpoint_id(model: ModelLike) -> str:
    """実効モデルの内容ハッシュ

    構造・ベース重み・分岐ごとの（層, 実効 B, A）のみを対象とするので、
    係数 1 のベクトル項はそのアダプターと、分岐なしはベースと同じ ID になる。
    """
    adapted = _as_adapted(model)
    base = adapted.base
    arrays: List[Tuple[str, np.ndarray]] = []
    for index, (W, b) in enumerate(zip(base.weights, base.biases)):
        arrays.append((f"base/W{index}", W))
        arrays.append((f"base/b{index}", b))
    branch_layers = []
    for position, branch in enumerate(adapted.branches):
        layers = branch.layer_indices()
        branch_layers.append(layers)
        for index in layers:
            B, A = branch.factors(index)
            arrays.append((f"branch{position}/layer{index}/B", B))
            arrays.append((f"branch{position}/layer{index}/A", A))
    body = {'architecture': base.architecture, 'branches': branch_layers}
    return content_hash(CHECKPOINT_FORMAT, body, arrays)


def _adapter_entry(adapter: LoraAdapter, position: int,
                   arrays: List[Tuple[str, np.ndarray]]) -> Dict[str, Any]:
    storage = "seed+B" if adapter.train_mode is TrainMode.B_ONLY else "B+A"
    for index in adapter.layer_indices():
        layer = adapter.layers[index]
        arrays.append((f"branch{position}/layer{index}/B", layer.B))
        if storage == "B+A":
            arrays.append((f"branch{position}/layer{index}/A", layer.A))
    return {
        'kind': 'adapter',
        'layers': adapter.layer_indices(),
        'rank': adapter.rank,
        'seed': adapter.seed,
        'prng': adapter.prng,
        'train_mode': adapter.train_mode.value,
        'storage': storage,
        'objective': adapter.objective,
    }


def _term_entry(term: VectorTerm, position: int,
                arrays: List[Tuple[str, np.ndarray]]) -> Dict[str, Any]:
    # 係数を掛ける前の因子を保存（ベクトル ID を保つ）
    for index in term.layer_indices():
        B, A = term.vector.layers[index]
        arrays.append((f"branch{position}/layer{index}/B", B))
        arrays.append((f"branch{position}/layer{index}/A", A))
    return {
        'kind': 'vector-term',
        'layers': term.layer_indices(),
        'storage': "B+A",
        'coefficient': format_fraction(term.coefficient),
        'vector_id': term.vector_id,
        'provenance': term.vector.provenance,
    }


def save_checkpoint(path: Union[str, Path], model: ModelLike,
                    provenance: Optional[Dict[str, Any]] = None,
                    config_hash: Optional[str] = None) -> str:
    """チェックポイント保存（原子的）

    Returns:
        str: チェックポイント ID
    """
    adapted = _as_adapted(model)
    base = adapted.base
    arrays: List[Tuple[str, np.ndarray]] = []
    for index, (W, b) in enumerate(zip(base.weights, base.biases)):
        arrays.append((f"base/W{index}", W))
        arrays.append((f"base/b{index}", b))

    branches = []
    for position, branch in enumerate(adapted.branches):
        if isinstance(branch, LoraAdapter):
            branches.append(_adapter_entry(branch, position, arrays))
        elif isinstance(branch, VectorTerm):
            branches.append(_term_entry(branch, position, arrays))
        else:
            raise CheckpointLoadError(f"Cannot serialize branch type {type(branch).__name__}")

    identifier = checkpoint_id(adapted)
    merged_provenance = dict(adapted.provenance)
    merged_provenance.update(provenance or {})
    body = {
        'checkpoint_id': identifier,
        'architecture': base.architecture,
        'layer_order': LAYER_ORDER,
        'prng': PRNG_NAME,
        'branches': branches,
        'provenance': merged_provenance,
        'config_hash': config_hash,
    }
    write_container(path, CHECKPOINT_FORMAT, body, arrays)
    logger.info(f"Checkpoint saved: {path} (id={identifier[:12]}, branches={len(branches)})")
    return identifier


def _architecture_from_body(body: Dict[str, Any]) -> ModelConfig:
    arch = body.get('architecture')
    if not isinstance(arch, dict):
        raise CheckpointManifestError('architecture', "missing architecture block")
    for key in ('input_dim', 'hidden_dims', 'num_classes'):
        if key not in arch:
            raise CheckpointManifestError(key, "missing")
    if body.get('layer_order') != LAYER_ORDER:
        raise CheckpointManifestError('layer_order', f"expected {LAYER_ORDER!r}, found "
                                                     f"{body.get('layer_order')!r}")
    return ModelConfig(input_dim=int(arch['input_dim']),
                       hidden_dims=[int(h) for h in arch['hidden_dims']],
                       num_classes=int(arch['num_classes']))


def _shape_field(layer: int, num_layers: int, axis: str) -> str:
    """形状不一致の原因となるマニフェスト項目名"""
    if axis == 'out':
        return 'num_classes' if layer == num_layers - 1 else f"hidden_dims[{layer}]"
    return 'input_dim' if layer == 0 else f"hidden_dims[{layer - 1}]"


def _take(arrays: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in arrays:
        raise CheckpointManifestError('arrays', f"missing array {name!r}")
    return arrays[name]


def _load_base(config: ModelConfig, arrays: Dict[str, np.ndarray]) -> BaseModel:
    shapes = config.layer_shapes()
    present = sum(1 for name in arrays if name.startswith('base/W'))
    if present != len(shapes):
        raise CheckpointManifestError('hidden_dims', f"declares {len(shapes)} layers, payload "
                                                     f"holds {present}")
    weights, biases = [], []
    for index, (u, v) in enumerate(shapes):
        W = _take(arrays, f"base/W{index}")
        b = _take(arrays, f"base/b{index}")
        if W.ndim != 2 or W.shape[0] != u:
            raise CheckpointManifestError(_shape_field(index, len(shapes), 'out'),
                                          f"layer {index} expects {u} outputs, weights are "
                                          f"{W.shape}")
        if W.shape[1] != v:
            raise CheckpointManifestError(_shape_field(index, len(shapes), 'in'),
                                          f"layer {index} expects {v} inputs, weights are "
                                          f"{W.shape}")
        if b.shape != (u,):
            raise CheckpointManifestError(_shape_field(index, len(shapes), 'out'),
                                          f"layer {index} bias shape {b.shape}")
        weights.append(W)
        biases.append(b)
    return BaseModel(config=config, weights=weights, biases=biases)


def _load_branch(entry: Dict[str, Any], position: int, base: BaseModel,
                 arrays: Dict[str, np.ndarray]):
    kind = entry.get('kind')
    layers = [int(i) for i in entry.get('layers', [])]
    for index in layers:
        if not 0 <= index < base.num_layers:
            raise CheckpointManifestError(f"branches[{position}].layers",
                                          f"layer {index} out of range")

    if kind == 'adapter':
        try:
            train_mode = TrainMode(entry.get('train_mode'))
        except ValueError as e:
            raise CheckpointManifestError(f"branches[{position}].train_mode", str(e)) from e
        if entry.get('prng', PRNG_NAME) != PRNG_NAME:
            raise CheckpointManifestError(f"branches[{position}].prng",
                                          f"unsupported generator {entry.get('prng')!r}")
        rank, seed = int(entry['rank']), int(entry['seed'])
        built = {}
        for index in layers:
            B = _take(arrays, f"branch{position}/layer{index}/B")
            u, v = base.weights[index].shape
            if B.shape != (u, rank):
                raise CheckpointManifestError(f"branches[{position}].rank",
                                              f"B{B.shape} does not match (u={u}, r={rank})")
            if entry.get('storage') == "seed+B":
                A = generate_projection(seed, index, rank, v)
            else:
                A = _take(arrays, f"branch{position}/layer{index}/A")
                if A.shape != (rank, v):
                    raise CheckpointManifestError(f"branches[{position}].rank",
                                                  f"A{A.shape} does not match (r={rank}, v={v})")
            built[index] = LoraLayer(index=index, A=A, B=B)
        return LoraAdapter(rank=rank, seed=seed, train_mode=train_mode, layers=built,
                           objective=entry.get('objective'))

    if kind == 'vector-term':
        factors = {index: (_take(arrays, f"branch{position}/layer{index}/B"),
                           _take(arrays, f"branch{position}/layer{index}/A"))
                   for index in layers}
        vector = LoraVector(layers=factors, provenance=entry.get('provenance') or {})
        if entry.get('vector_id') and entry['vector_id'] != vector.vector_id:
            raise CheckpointLoadError(f"Vector term {position}: stored id does not match content")
        return VectorTerm(vector, as_fraction(entry.get('coefficient', '1/1')))

    raise CheckpointManifestError(f"branches[{position}].kind", f"unknown kind {kind!r}")


def load_checkpoint(path: Union[str, Path],
                    expected: Optional[ModelConfig] = None) -> AdaptedModel:
    """チェックポイント読み込み（マニフェストを先に検証）

    Raises:
        CheckpointLoadError 系: 形式不一致・ペイロード欠損・マニフェスト不整合
    """
    body, arrays = read_container(path, CHECKPOINT_FORMAT)
    config = _architecture_from_body(body)
    if expected is not None:
        for key in ('input_dim', 'num_classes'):
            if getattr(expected, key) != getattr(config, key):
                raise CheckpointManifestError(key, f"expected {getattr(expected, key)}, "
                                                   f"found {getattr(config, key)}")
        if list(expected.hidden_dims) != list(config.hidden_dims):
            raise CheckpointManifestError('hidden_dims', f"expected {expected.hidden_dims}, "
                                                         f"found {config.hidden_dims}")
        config = expected
    base = _load_base(config, arrays)
    base.frozen = True

    branches = tuple(_load_branch(entry, position, base, arrays)
                     for position, entry in enumerate(body.get('branches', [])))
    model = AdaptedModel(base=base, branches=branches, provenance=body.get('provenance') or {})

    stored = body.get('checkpoint_id')
    if stored and stored != checkpoint_id(model):
        raise CheckpointLoadError(f"Checkpoint {path}: content does not match stored id")
    logger.debug(f"Checkpoint loaded: {path} (branches={len(branches)})")
    return model


def save_vector(path: Union[str, Path], vector: LoraVector,
                config_hash: Optional[str] = None) -> str:
    body = {
        'vector_id': vector.vector_id,
        'layers': vector.layer_indices(),
        'element_count': vector.element_count,
        'config_hash': config_hash,
        'provenance': vector.provenance,
    }
    write_container(path, VECTOR_FORMAT, body, vector.named_arrays())
    logger.info(f"Vector saved: {path} (id={vector.vector_id[:12]}, m={vector.element_count})")
    return vector.vector_id


def load_vector(path: Union[str, Path]) -> LoraVector:
    body, arrays = read_container(path, VECTOR_FORMAT)
    layers = {}
    for index in body.get('layers', []):
        index = int(index)
        B = _take(arrays, f"layer{index}/B")
        A = _take(arrays, f"layer{index}/A")
        if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
            raise CheckpointManifestError(f"layers[{index}]",
                                          f"factor shapes B{B.shape} A{A.shape} disagree")
        layers[index] = (B, A)
    vector = LoraVector(layers=layers, provenance=body.get('provenance') or {})
    if body.get('vector_id') != vector.vector_id:
        raise CheckpointLoadError(f"Vector {path}: content does not match stored id")
    return vector


@dataclass
class ArtifactEntry:
    """レジストリの 1 項目"""
    artifact_id: str
    kind: str
    path: str
    config_hash: Optional[str] = None
    provenance: Dict[str, Any] = field(default_factory=dict)


class ArtifactRegistry:
    """出力ディレクトリ内の別名 -> 成果物 対応表"""

    def __init__(self, root: Union[str, Path]):
        self.logger = logging.getLogger(__name__ + '.ArtifactRegistry')
        self.root = Path(root)
        self.registry_file = self.root / REGISTRY_NAME
        self.entries: Dict[str, ArtifactEntry] = self._load_registry()

    def _load_registry(self) -> Dict[str, ArtifactEntry]:
        if not self.registry_file.exists():
            return {}
        try:
            with open(self.registry_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointLoadError(f"Corrupt registry {self.registry_file}: {e}") from e
        return {alias: ArtifactEntry(**entry) for alias, entry in data.get('artifacts', {}).items()}

    def _save_registry(self) -> None:
        data = {'artifacts': {alias: asdict(entry)
                              for alias, entry in sorted(self.entries.items())}}
        atomic_write_text(self.registry_file,
                          json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    def register(self, alias: str, path: Union[str, Path], kind: str, artifact_id: str,
                 config_hash: Optional[str] = None,
                 provenance: Optional[Dict[str, Any]] = None) -> ArtifactEntry:
        target = Path(path)
        try:
            relative = target.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            relative = target.resolve().as_posix()
        entry = ArtifactEntry(artifact_id=artifact_id, kind=kind, path=relative,
                              config_hash=config_hash, provenance=provenance or {})
        self.entries[alias] = entry
        self._save_registry()
        self.logger.info(f"Registered {alias} -> {relative} ({kind}, {artifact_id[:12]})")
        return entry

    def resolve(self, reference: Union[str, Path]) -> Path:
        """別名・成果物 ID・パスのいずれかから成果物パスを解決

        Raises:
            ArtifactResolutionError: 解決できない参照
        """
        reference = str(reference)
        entry = self.entries.get(reference)
        if entry is None:
            matches = [e for e in self.entries.values() if e.artifact_id == reference]
            entry = matches[0] if len(matches) == 1 else None
        if entry is not None:
            path = Path(entry.path)
            path = path if path.is_absolute() else self.root / path
            if (path / MANIFEST_NAME).exists() or path.is_file():
                return path
            raise ArtifactResolutionError(reference, self.registry_file)
        candidate = Path(reference)
        if (candidate / MANIFEST_NAME).exists() or candidate.is_file():
            return candidate
        raise ArtifactResolutionError(reference, self.registry_file)

    def entry(self, alias: str) -> ArtifactEntry:
        if alias not in self.entries:
            raise ArtifactResolutionError(alias, self.registry_file)
        return self.entries[alias]

    def summary(self) -> Dict[str, Dict[str, Any]]:
        return {alias: asdict(entry) for alias, entry in sorted(self.entries.items())}


def describe_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """マニフェストの要約（ペイロードは読まない）"""
    manifest = read_manifest(path)
    body = manifest.get('body', {})
    return {
        'format': manifest.get('format'),
        'checkpoint_id': body.get('checkpoint_id'),
        'architecture': body.get('architecture'),
        'branches': [{k: v for k, v in entry.items() if k != 'provenance'}
                     for entry in body.get('branches', [])],
        'payload_bytes': manifest.get('payload_bytes'),
    }
