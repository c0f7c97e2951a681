"""
ワイルドベンチ生成モジュール

合成ガウスブロブによる分布内タスク、深刻度付き共変量シフト、
意味シフト OOD クラス、補助外れ値、および等数ワイルド混合を生成する。
- クラス中心の配置（最小距離制約付き）
- 4 種の破損ファミリー × 深刻度 0..5
- AugMix 型学習用の低深刻度オーグメンター
- CSV / バイナリコンテナでの入出力
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from error_handler import ConfigError, DataError, ProtocolError
from lora_model import forward
from models.config_models import AuxSource, CorruptionFamily, MAX_SEVERITY, WildBenchConfig
from models.data_models import (AUX, ID_TEST, ID_TRAIN, OOD_LABEL, SEM_TEST, LabeledSet,
                                WildBenchSplit, WildMixture, cov_origin, parse_cov_origin)
from utils.container import content_hash, read_container, write_container
from utils.data_validator import DataValidator
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

DATA_FORMAT = "trustlora-data-1"

# 深刻度 0..5 の強度スケジュール（各ファミリーで単調増加）
SEVERITY_SCHEDULES: Dict[str, Tuple[float, ...]] = {
    CorruptionFamily.ADDITIVE_GAUSSIAN.value: (0.0, 0.1, 0.2, 0.35, 0.5, 0.7),   # σ
    CorruptionFamily.ROTATION.value: (0.0, 10.0, 20.0, 35.0, 50.0, 70.0),        # 度
    CorruptionFamily.SCALE.value: (1.0, 0.9, 0.8, 0.65, 0.5, 0.35),              # 倍率
    CorruptionFamily.MASK.value: (0.0, 0.05, 0.1, 0.2, 0.3, 0.45),               # 確率
}


def corruption_magnitude(family: str, severity: int) -> float:
    if family not in SEVERITY_SCHEDULES:
        raise ConfigError(f"Unknown corruption family: {family!r} "
                          f"(known: {sorted(SEVERITY_SCHEDULES)})")
    if not 0 <= int(severity) <= MAX_SEVERITY:
        raise ConfigError(f"Severity {severity} outside 0..{MAX_SEVERITY}")
    return SEVERITY_SCHEDULES[family][int(severity)]


def corrupt(x, family: str, severity: int,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """入力行列に破損を適用（深刻度 0 は恒等）"""
    magnitude = corruption_magnitude(family, severity)
    x = np.asarray(x, dtype=np.float64)
    if int(severity) == 0:
        return x.copy()
    rng = rng if rng is not None else make_rng(0)

    if family == CorruptionFamily.ADDITIVE_GAUSSIAN.value:
        return x + magnitude * rng.standard_normal(x.shape)
    if family == CorruptionFamily.ROTATION.value:
        if x.shape[1] < 2:
            raise ConfigError("rotation family requires at least 2 input dimensions")
        theta = math.radians(magnitude)
        c, s = math.cos(theta), math.sin(theta)
        out = x.copy()
        out[:, 0] = c * x[:, 0] - s * x[:, 1]
        out[:, 1] = s * x[:, 0] + c * x[:, 1]
        return out
    if family == CorruptionFamily.SCALE.value:
        return x * magnitude
    # mask
    keep = rng.random(x.shape) >= magnitude
    return np.where(keep, x, 0.0)


class Augmenter:
    """学習用オーグメンター

    テスト破損と同じファミリーを低深刻度で、別シードから行ごとに抽選する。
    """

    def __init__(self, families: Sequence[str], severities: Sequence[int], seed: int):
        for family in families:
            corruption_magnitude(family, 0)
        if not families or not severities:
            raise ConfigError("Augmenter needs at least one family and one severity")
        self.families = list(families)
        self.severities = [int(s) for s in severities]
        self.rng = make_rng(seed)

    def _view(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        family_index = self.rng.integers(len(self.families), size=n)
        severity = self.rng.choice(self.severities, size=n)
        out = x.copy()
        for fi, family in enumerate(self.families):
            for sev in self.severities:
                rows = np.flatnonzero((family_index == fi) & (severity == sev))
                if rows.size:
                    out[rows] = corrupt(x[rows], family, sev, self.rng)
        return out

    def __call__(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        return self._view(x), self._view(x)


class IdentityAugmenter:
    """x_aug = x"""

    def __call__(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        return x.copy(), x.copy()


def _pairwise_min_distance(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """各点から最も近い中心までの距離"""
    if centers.size == 0:
        return np.full(points.shape[0], np.inf)
    diff = points[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)


class WildBenchGenerator:
    """合成ワイルドベンチ生成器

    Features:
    - ID クラス中心の配置（最小分離距離）
    - 意味シフト中心を ID 中心から Δ_min 以上離して配置
    - 補助外れ値（一様ボックス / 離れたブロブ）を意味シフト領域から分離
    - id-test の複製に破損を適用して共変量シフト分割を作成
    """

    def __init__(self, config: WildBenchConfig):
        self.logger = logging.getLogger(__name__ + '.WildBenchGenerator')
        errors = config.validate()
        if errors:
            raise ConfigError(f"Wildbench configuration invalid: {errors}")
        if config.rng_seed is None:
            raise ConfigError("wildbench.rng_seed must be resolved before generation")
        self.config = config
        self.seed = int(config.rng_seed)

    def _place_centers(self, rng: np.random.Generator, count: int, half_width: float,
                       min_separation: float,
                       constraints: Iterable[Tuple[np.ndarray, float, str]],
                       what: str) -> np.ndarray:
        """拒否サンプリングで中心を配置"""
        d = self.config.input_dim
        constraints = list(constraints)
        placed: List[np.ndarray] = []
        attempts = 0
        while len(placed) < count:
            attempts += 1
            if attempts > self.config.max_placement_attempts:
                details = ", ".join(f"{label} >= {dist}" for _, dist, label in constraints)
                raise ConfigError(
                    f"Infeasible geometry: placed {len(placed)}/{count} {what} centers in box "
                    f"[-{half_width}, {half_width}]^{d} with separation >= {min_separation}"
                    f"{', ' + details if details else ''} after "
                    f"{self.config.max_placement_attempts} attempts")
            candidate = rng.uniform(-half_width, half_width, size=d)
            if placed and np.min(np.linalg.norm(np.array(placed) - candidate, axis=1)) < min_separation:
                continue
            if any(c.size and np.min(np.linalg.norm(c - candidate, axis=1)) < dist
                   for c, dist, _ in constraints):
                continue
            placed.append(candidate)
        return np.array(placed).reshape(count, d)

    def _blob_samples(self, rng: np.random.Generator, centers: np.ndarray,
                      per_center: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        inputs, labels = [], []
        for index, (center, n) in enumerate(zip(centers, per_center)):
            inputs.append(center + self.config.cluster_std * rng.standard_normal((n, center.size)))
            labels.append(np.full(n, index, dtype=np.int64))
        return np.vstack(inputs), np.concatenate(labels)

    def _uniform_box_aux(self, rng: np.random.Generator, half_width: float,
                         avoid: np.ndarray) -> np.ndarray:
        cfg = self.config
        needed = cfg.aux_samples
        chunks: List[np.ndarray] = []
        for _ in range(cfg.max_placement_attempts):
            draw = rng.uniform(-half_width, half_width, size=(4 * needed, cfg.input_dim))
            keep = draw[_pairwise_min_distance(draw, avoid) >= cfg.aux_exclusion_radius]
            chunks.append(keep[:needed])
            needed -= chunks[-1].shape[0]
            if needed == 0:
                return np.vstack(chunks)
        raise ConfigError(
            f"Infeasible geometry: could not draw {cfg.aux_samples} uniform-box outliers "
            f"at distance >= {cfg.aux_exclusion_radius} from all class centers")

    def generate(self) -> WildBenchSplit:
        """全分割を生成（シードに対して決定的）"""
        cfg = self.config
        k, d = cfg.num_classes, cfg.input_dim
        geometry_rng = make_rng([self.seed, 0])

        id_centers = self._place_centers(geometry_rng, k, cfg.center_box,
                                         cfg.min_center_separation, [], "ID")
        outer = cfg.center_box + cfg.sem_margin
        sem_centers = self._place_centers(
            geometry_rng, cfg.sem_classes, outer, cfg.min_center_separation,
            [(id_centers, cfg.sem_min_distance, "distance to ID centers")], "semantic-OOD")

        id_rng = make_rng([self.seed, 1])
        train_x, train_y = self._blob_samples(id_rng, id_centers, [cfg.train_per_class] * k)
        test_x, test_y = self._blob_samples(id_rng, id_centers, [cfg.test_per_class] * k)

        sem_x, _ = self._blob_samples(make_rng([self.seed, 2]), sem_centers,
                                      [cfg.sem_per_class] * cfg.sem_classes)

        aux_rng = make_rng([self.seed, 3])
        aux_centers = None
        if cfg.aux_source is AuxSource.UNIFORM_BOX:
            aux_x = self._uniform_box_aux(aux_rng, outer, np.vstack([id_centers, sem_centers]))
        else:
            aux_centers = self._place_centers(
                aux_rng, cfg.aux_blobs, outer, cfg.min_center_separation,
                [(id_centers, cfg.sem_min_distance, "distance to ID centers"),
                 (sem_centers, cfg.aux_sem_min_distance, "distance to semantic-OOD centers")],
                "auxiliary")
            base, extra = divmod(cfg.aux_samples, cfg.aux_blobs)
            per_blob = [base + (1 if i < extra else 0) for i in range(cfg.aux_blobs)]
            aux_x, _ = self._blob_samples(aux_rng, aux_centers, per_blob)

        next_id = 0

        def take(n: int) -> np.ndarray:
            nonlocal next_id
            ids = np.arange(next_id, next_id + n, dtype=np.int64)
            next_id += n
            return ids

        id_train = LabeledSet(train_x, train_y, ID_TRAIN, take(len(train_y)))
        id_test = LabeledSet(test_x, test_y, ID_TEST, take(len(test_y)))
        sem_test = LabeledSet(sem_x, np.full(len(sem_x), OOD_LABEL), SEM_TEST, take(len(sem_x)))
        aux = LabeledSet(aux_x, np.full(len(aux_x), OOD_LABEL), AUX, take(len(aux_x)))

        cov_test: Dict[Tuple[str, int], LabeledSet] = {}
        for fi, family in enumerate(cfg.families):
            for severity in sorted(set(int(s) for s in cfg.severities)):
                rng = make_rng([self.seed, 100 + fi, severity])
                cov_test[(family, severity)] = LabeledSet(
                    inputs=corrupt(id_test.inputs, family, severity, rng),
                    labels=id_test.labels.copy(),
                    origin=cov_origin(family, severity),
                    sample_ids=take(len(id_test)),
                    source_ids=id_test.sample_ids.copy(),
                )

        split = WildBenchSplit(id_train=id_train, id_test=id_test, cov_test=cov_test,
                               sem_test=sem_test, aux=aux, id_centers=id_centers,
                               sem_centers=sem_centers, aux_centers=aux_centers,
                               num_classes=k)
        DataValidator().validate_split(split)
        self.logger.info(
            f"Generated wildbench: train={len(id_train)} test={len(id_test)} "
            f"cov_cells={len(cov_test)} sem={len(sem_test)} aux={len(aux)} "
            f"aux_source={cfg.aux_source.value}")
        return split


def generate(config: WildBenchConfig) -> WildBenchSplit:
    return WildBenchGenerator(config).generate()


def make_augmenter(config: WildBenchConfig) -> Augmenter:
    if config.augment_seed is None:
        raise ConfigError("wildbench.augment_seed must be resolved before training")
    return Augmenter(config.families, config.augment_severities, config.augment_seed)


def aux_sem_separation(split: WildBenchSplit) -> float:
    """補助外れ値と意味シフト中心の最小距離"""
    return float(_pairwise_min_distance(split.aux.inputs, split.sem_centers).min())


def concat_sets(sets: Sequence[LabeledSet], origin: str) -> LabeledSet:
    """複数の共変量セルを 1 集合に連結"""
    if not sets:
        raise DataError("No labeled sets to concatenate")
    sources = [s.source_ids for s in sets]
    return LabeledSet(
        inputs=np.vstack([s.inputs for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        origin=origin,
        sample_ids=np.concatenate([s.sample_ids for s in sets]),
        source_ids=None if any(s is None for s in sources) else np.concatenate(sources),
    )


def _model_logits(model: Any, x: np.ndarray) -> np.ndarray:
    if hasattr(model, "logits"):
        return model.logits(x)
    return forward(model, None, x)


def build_wild_mixture(model: Any, cov_test: LabeledSet, sem_test: LabeledSet,
                       equal_counts: bool = True, include_clean: Optional[LabeledSet] = None,
                       seed: int = 0, spec: str = "") -> WildMixture:
    """受理ラベル付きワイルド混合を構築

    共変量シフト分割を h の正誤で分け、equal_counts のとき
    誤分類共変量と意味シフトの多い方をシード付きで少ない方に揃える。
    """
    cov_logits = _model_logits(model, cov_test.inputs)
    num_classes = int(cov_logits.shape[1])
    cov_pred = np.argmax(cov_logits, axis=1)
    correct = cov_pred == cov_test.labels
    cov_accuracy = float(correct.mean()) if len(cov_test) else float('nan')

    correct_idx = np.flatnonzero(correct)
    mis_idx = np.flatnonzero(~correct)
    sem_idx = np.arange(len(sem_test))

    if equal_counts:
        if mis_idx.size == 0:
            raise ProtocolError(
                f"No misclassified covariate-shifted samples in {cov_test.origin}; "
                f"raise the severity or generate more test data")
        target = min(mis_idx.size, sem_idx.size)
        rng = make_rng(seed)
        if mis_idx.size > target:
            mis_idx = np.sort(rng.choice(mis_idx, size=target, replace=False))
        if sem_idx.size > target:
            sem_idx = np.sort(rng.choice(sem_idx, size=target, replace=False))

    inputs, accept, predicted, truth, sources, origins = [], [], [], [], [], []

    if include_clean is not None:
        id_pred = np.argmax(_model_logits(model, include_clean.inputs), axis=1)
        inputs.append(include_clean.inputs)
        accept.append(id_pred == include_clean.labels)
        predicted.append(id_pred)
        truth.append(include_clean.labels)
        sources += ['id'] * len(include_clean)
        origins += [include_clean.origin] * len(include_clean)

    cov_keep = np.sort(np.concatenate([correct_idx, mis_idx]))
    inputs.append(cov_test.inputs[cov_keep])
    accept.append(correct[cov_keep])
    predicted.append(cov_pred[cov_keep])
    truth.append(cov_test.labels[cov_keep])
    sources += ['cov'] * cov_keep.size
    origins += [cov_test.origin] * cov_keep.size

    sem_pred = np.argmax(_model_logits(model, sem_test.inputs[sem_idx]), axis=1) \
        if sem_idx.size else np.zeros(0, dtype=np.int64)
    inputs.append(sem_test.inputs[sem_idx])
    accept.append(np.zeros(sem_idx.size, dtype=bool))
    predicted.append(sem_pred)
    truth.append(np.full(sem_idx.size, OOD_LABEL))
    sources += ['sem'] * sem_idx.size
    origins += [sem_test.origin] * sem_idx.size

    counts = {
        'cov_total': int(len(cov_test)),
        'cov_correct': int(correct_idx.size),
        'cov_misclassified': int(mis_idx.size),
        'sem': int(sem_idx.size),
    }
    if include_clean is not None:
        counts['id'] = int(len(include_clean))
        counts['id_correct'] = int(np.count_nonzero(accept[0]))

    mixture = WildMixture(
        inputs=np.vstack(inputs),
        accept=np.concatenate(accept).astype(bool),
        predicted=np.concatenate(predicted).astype(np.int64),
        true_labels=np.concatenate(truth).astype(np.int64),
        sources=np.array(sources),
        origins=origins,
        num_classes=num_classes,
        spec=spec or cov_test.origin,
        counts=counts,
        cov_accuracy=cov_accuracy,
    )
    logger.debug(f"Built wild mixture {mixture.spec}: {counts}")
    return mixture


# ---------------------------------------------------------------------------
# 入出力
# ---------------------------------------------------------------------------

def _set_frame(labeled: LabeledSet) -> pd.DataFrame:
    frame = pd.DataFrame(labeled.inputs,
                         columns=[f"x{i}" for i in range(labeled.input_dim)])
    frame['label'] = labeled.labels
    frame['origin'] = labeled.origin
    frame['sample_id'] = labeled.sample_ids
    frame['source_id'] = pd.array(labeled.source_ids if labeled.source_ids is not None
                                  else [pd.NA] * len(labeled), dtype='Int64')
    return frame


def export_csv(split_or_sets: Union[WildBenchSplit, Sequence[LabeledSet]],
               path: Union[str, Path], config_hash: Optional[str] = None) -> Path:
    """ヘッダ x0..x{d-1},label,origin,sample_id,source_id の CSV（有効数字 17 桁）

    config_hash を渡すと先頭に ``# config_hash=...`` のコメント行を付ける。
    """
    sets = split_or_sets.all_sets() if isinstance(split_or_sets, WildBenchSplit) \
        else list(split_or_sets)
    frame = pd.concat([_set_frame(s) for s in sets], ignore_index=True)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.tmp")
    with open(tmp, 'w', encoding='utf-8', newline='') as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        frame.to_csv(f, index=False, float_format='%.17g', lineterminator="\n")
    tmp.replace(target)
    return target


def import_csv(path: Union[str, Path]) -> WildBenchSplit:
    """CSV から分割を復元（中心情報は空）

    sample_id / source_id 列が無い CSV は行番号を sample_id とみなす。
    """
    frame = pd.read_csv(path, float_precision='round_trip', comment='#')
    columns = [c for c in frame.columns if c.startswith('x')]
    if not columns or 'label' not in frame or 'origin' not in frame:
        raise DataError(f"CSV {path} lacks x*/label/origin columns")
    sets: Dict[str, LabeledSet] = {}
    for origin, group in frame.groupby('origin', sort=False):
        if 'sample_id' in group:
            sample_ids = group['sample_id'].to_numpy(dtype=np.int64)
        else:
            sample_ids = group.index.to_numpy(dtype=np.int64)
        source_ids = None
        if 'source_id' in group and group['source_id'].notna().all():
            source_ids = group['source_id'].to_numpy(dtype=np.int64)
        sets[origin] = LabeledSet(
            inputs=group[columns].to_numpy(dtype=np.float64),
            labels=group['label'].to_numpy(dtype=np.int64),
            origin=origin,
            sample_ids=sample_ids,
            source_ids=source_ids,
        )
    return _split_from_sets(sets, len(columns))


def _split_from_sets(sets: Dict[str, LabeledSet], input_dim: int,
                     centers: Optional[Dict[str, np.ndarray]] = None) -> WildBenchSplit:
    missing = [o for o in (ID_TRAIN, ID_TEST, SEM_TEST, AUX) if o not in sets]
    if missing:
        raise DataError(f"Dataset is missing splits: {missing}")
    cov_test = {}
    for origin, labeled in sets.items():
        if origin.startswith('cov-test'):
            cov_test[parse_cov_origin(origin)] = labeled
    id_train = sets[ID_TRAIN]
    centers = centers or {}
    empty = np.zeros((0, input_dim))
    return WildBenchSplit(
        id_train=id_train, id_test=sets[ID_TEST], cov_test=cov_test,
        sem_test=sets[SEM_TEST], aux=sets[AUX],
        id_centers=centers.get('id_centers', empty),
        sem_centers=centers.get('sem_centers', empty),
        aux_centers=centers.get('aux_centers'),
        num_classes=int(id_train.labels.max()) + 1,
    )


def _split_payload(split: WildBenchSplit) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    arrays: List[Tuple[str, np.ndarray]] = []
    set_entries = []
    for labeled in split.all_sets():
        set_entries.append({'origin': labeled.origin, 'rows': len(labeled),
                            'has_source_ids': labeled.source_ids is not None})
        arrays.append((f"{labeled.origin}/inputs", labeled.inputs))
        arrays.append((f"{labeled.origin}/labels", labeled.labels))
        arrays.append((f"{labeled.origin}/sample_ids", labeled.sample_ids))
        if labeled.source_ids is not None:
            arrays.append((f"{labeled.origin}/source_ids", labeled.source_ids))
    arrays.append(("centers/id", split.id_centers))
    arrays.append(("centers/sem", split.sem_centers))
    if split.aux_centers is not None:
        arrays.append(("centers/aux", split.aux_centers))
    body = {
        'num_classes': split.num_classes,
        'input_dim': split.id_train.input_dim,
        'sets': set_entries,
    }
    return body, arrays


def split_id(split: WildBenchSplit) -> str:
    """データセットの内容ハッシュ（来歴は含めない）"""
    body, arrays = _split_payload(split)
    return content_hash(DATA_FORMAT, body, arrays)


def save_split(split: WildBenchSplit, path: Union[str, Path],
               provenance: Optional[Dict[str, Any]] = None) -> Path:
    """"trustlora-data-1" コンテナとして保存"""
    body, arrays = _split_payload(split)
    body['provenance'] = provenance or {}
    return write_container(path, DATA_FORMAT, body, arrays)


def load_split(path: Union[str, Path]) -> Tuple[WildBenchSplit, Dict[str, Any]]:
    body, arrays = read_container(path, DATA_FORMAT)
    sets: Dict[str, LabeledSet] = {}
    for entry in body['sets']:
        origin = entry['origin']
        try:
            sets[origin] = LabeledSet(
                inputs=arrays[f"{origin}/inputs"],
                labels=arrays[f"{origin}/labels"],
                origin=origin,
                sample_ids=arrays[f"{origin}/sample_ids"],
                source_ids=arrays.get(f"{origin}/source_ids"),
            )
        except KeyError as e:
            raise DataError(f"Dataset container {path} lacks array {e}") from e
    split = _split_from_sets(sets, int(body['input_dim']), {
        'id_centers': arrays.get('centers/id'),
        'sem_centers': arrays.get('centers/sem'),
        'aux_centers': arrays.get('centers/aux'),
    })
    split.num_classes = int(body['num_classes'])
    return split, body.get('provenance', {})
