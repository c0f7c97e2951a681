"""
信頼性算術ツールキット - データ検証ユーティリティ

行列・確率分布・ラベル・生成分割の検証機能を提供します。

Classes:
    DataValidationRules: データ検証ルール定義クラス
    DataValidator: データ検証実行クラス
"""

import logging
from typing import Any, List, Optional

import numpy as np

from error_handler import ContractError, DataError, NumericError


class DataValidationRules:
    """データ検証ルール定義クラス"""

    # 確率単体の許容誤差
    SIMPLEX_TOLERANCE = 1e-12

    # 分割間で共有してはならない組
    DISJOINT_SPLITS = (
        ('id-train', 'id-test'),
        ('id-train', 'sem-test'),
        ('id-train', 'aux'),
        ('sem-test', 'aux'),
    )


class DataValidator:
    """データ検証実行クラス"""

    def __init__(self, rules: Optional[DataValidationRules] = None):
        self.rules = rules or DataValidationRules()
        self.logger = logging.getLogger(__name__ + '.DataValidator')

    def check_finite(self, array: np.ndarray, name: str) -> np.ndarray:
        array = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            bad = int(np.count_nonzero(~np.isfinite(array)))
            raise NumericError(f"{name} contains {bad} non-finite entries")
        return array

    def check_simplex(self, probabilities: np.ndarray, name: str = "probabilities") -> None:
        """各行が非負で和が 1 ± 許容誤差"""
        probs = self.check_finite(probabilities, name)
        tol = self.rules.SIMPLEX_TOLERANCE
        if np.any(probs < 0):
            raise ContractError(f"{name} has negative entries")
        sums = probs.sum(axis=1)
        worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        if worst > tol * max(1, probs.shape[1]):
            raise ContractError(f"{name} rows do not sum to 1 (max deviation {worst:.3e})")

    def check_labels(self, labels: np.ndarray, num_classes: int, name: str = "labels") -> None:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError(
                f"{name} must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")

    def validate_labeled_set(self, labeled: Any, num_classes: Optional[int] = None) -> List[str]:
        """LabeledSet の検証（エラーメッセージのリスト）"""
        errors = []
        if not np.all(np.isfinite(labeled.inputs)):
            errors.append(f"{labeled.origin}: non-finite inputs")
        if len(np.unique(labeled.sample_ids)) != len(labeled):
            errors.append(f"{labeled.origin}: duplicate sample ids")
        known_classes = (labeled.origin in ('id-train', 'id-test')
                         or labeled.origin.startswith('cov-test'))
        if known_classes:
            if num_classes is not None and labeled.labels.size and \
                    (labeled.labels.min() < 0 or labeled.labels.max() >= num_classes):
                errors.append(f"{labeled.origin}: labels outside [0, {num_classes})")
        elif np.any(labeled.labels >= 0):
            errors.append(f"{labeled.origin}: out-of-distribution samples carry an ID label")
        return errors

    def validate_split(self, split: Any) -> None:
        """分割全体の検証

        Raises:
            DataError: 検証失敗時
        """
        errors: List[str] = []
        for labeled in split.all_sets():
            errors.extend(self.validate_labeled_set(labeled, split.num_classes))

        by_origin = {s.origin: set(s.sample_ids.tolist()) for s in split.all_sets()}
        for left, right in self.rules.DISJOINT_SPLITS:
            if left in by_origin and right in by_origin and by_origin[left] & by_origin[right]:
                errors.append(f"sample ids shared between {left} and {right}")
        train_ids = by_origin.get('id-train', set())
        for key, cell in split.cov_test.items():
            if train_ids & set(cell.sample_ids.tolist()):
                errors.append(f"sample ids shared between id-train and {cell.origin}")
            if cell.source_ids is not None and train_ids & set(cell.source_ids.tolist()):
                errors.append(f"{cell.origin} derived from training samples")
            if not np.array_equal(cell.labels, split.id_test.labels):
                errors.append(f"{cell.origin} does not retain id-test labels")

        if errors:
            for error in errors:
                self.logger.error(error)
            raise DataError(f"Dataset validation failed: {errors}")
        self.logger.debug("Dataset validation passed")
