"""
信頼性算術ツールキット - データセットモデル

Classes:
    LabeledSet: ラベル付きサンプル集合（入力・ラベル・由来）
    WildBenchSplit: 生成された全分割
    WildMixture: 受理/棄却ターゲットを持つ評価用ワイルド混合
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

# 意味シフト / 補助外れ値のラベル（既知クラス外）
OOD_LABEL = -1

ID_TRAIN = "id-train"
ID_TEST = "id-test"
SEM_TEST = "sem-test"
AUX = "aux"
COV_PREFIX = "cov-test"


def cov_origin(family: str, severity: int) -> str:
    """共変量シフト分割の由来タグ（例: cov-test:rotation:3）"""
    return f"{COV_PREFIX}:{family}:{int(severity)}"


def parse_cov_origin(origin: str) -> Tuple[str, int]:
    prefix, family, severity = origin.split(":")
    if prefix != COV_PREFIX:
        raise ValueError(f"Not a covariate origin: {origin}")
    return family, int(severity)


@dataclass
class LabeledSet:
    """ラベル付きサンプル集合

    Attributes:
        inputs: n×d 行列
        labels: クラス番号（意味シフト・補助は OOD_LABEL）
        origin: 由来タグ
        sample_ids: 全分割で一意なサンプル番号
        source_ids: 共変量シフトの場合の元 id-test サンプル番号
    """
    inputs: np.ndarray
    labels: np.ndarray
    origin: str
    sample_ids: np.ndarray
    source_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.source_ids is not None:
            self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise ValueError(f"labels/sample_ids must have length {n}")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, index: np.ndarray) -> 'LabeledSet':
        return LabeledSet(
            inputs=self.inputs[index],
            labels=self.labels[index],
            origin=self.origin,
            sample_ids=self.sample_ids[index],
            source_ids=None if self.source_ids is None else self.source_ids[index],
        )


@dataclass
class WildBenchSplit:
    """合成ベンチマークの全分割"""
    id_train: LabeledSet
    id_test: LabeledSet
    cov_test: Dict[Tuple[str, int], LabeledSet]
    sem_test: LabeledSet
    aux: LabeledSet
    id_centers: np.ndarray
    sem_centers: np.ndarray
    aux_centers: Optional[np.ndarray] = None
    num_classes: int = 0

    def all_sets(self) -> List[LabeledSet]:
        """固定順の全集合（保存・ハッシュ順序）"""
        ordered = [self.id_train, self.id_test]
        ordered += [self.cov_test[key] for key in sorted(self.cov_test)]
        ordered += [self.sem_test, self.aux]
        return ordered

    def cov_cell(self, family: str, severity: int) -> LabeledSet:
        return self.cov_test[(family, int(severity))]


@dataclass
class WildMixture:
    """評価用ワイルド混合

    accept は受理ターゲット: y = h(x) かつ 由来が ID / 共変量シフト。
    """
    inputs: np.ndarray
    accept: np.ndarray
    predicted: np.ndarray
    true_labels: np.ndarray
    sources: np.ndarray          # 'id' / 'cov' / 'sem'
    origins: List[str]
    num_classes: int
    spec: str = ""
    counts: Dict[str, int] = field(default_factory=dict)
    cov_accuracy: float = float('nan')

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def accept_set(self) -> np.ndarray:
        return np.flatnonzero(self.accept)

    @property
    def reject_set(self) -> np.ndarray:
        return np.flatnonzero(~self.accept)
