"""
信頼性算術ツールキット - マニフェスト + バイナリ コンテナ

チェックポイント・LoRA ベクトル・データセットの共通保存形式。
ディレクトリに manifest.json（UTF-8、キー順固定）と weights.bin
（リトルエンディアン 64bit 配列をマニフェスト順に連結）を置く。

Functions:
    write_container: 原子的書き込み
    read_container: マニフェスト検証後にペイロード読み込み
    content_hash: 内容ハッシュ（成果物 ID）
    canonical_json: ハッシュ用の正規 JSON
    atomic_write_text: テキストファイルの原子的書き込み
"""

import hashlib
import json
import logging
import os
import shutil
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

from error_handler import (CheckpointLoadError, CheckpointManifestError,
                           CheckpointTruncatedError, CheckpointVersionError)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "weights.bin"
ALLOWED_DTYPES = ('<f8', '<i8')

PathLike = Union[str, Path]
NamedArrays = Sequence[Tuple[str, np.ndarray]]


def canonical_json(value: Any) -> str:
    """キー順ソート・区切り最小の JSON"""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _le_array(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    dtype = '<i8' if np.issubdtype(array.dtype, np.integer) else '<f8'
    return np.ascontiguousarray(array, dtype=dtype)


def content_hash(kind: str, body: Dict[str, Any], arrays: NamedArrays) -> str:
    """kind + 正規 JSON + 配列バイト列の SHA-256"""
    digest = hashlib.sha256()
    digest.update(kind.encode('utf-8'))
    digest.update(canonical_json(body).encode('utf-8'))
    for name, array in arrays:
        le = _le_array(array)
        digest.update(canonical_json([name, le.dtype.str, list(le.shape)]).encode('utf-8'))
        digest.update(le.tobytes())
    return digest.hexdigest()


def _replace_dir(tmp: Path, target: Path) -> None:
    if target.exists():
        old = target.with_name(f".{target.name}.old-{os.getpid()}")
        os.replace(target, old)
        os.replace(tmp, target)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, target)


def write_container(path: PathLike, kind: str, body: Dict[str, Any],
                    arrays: NamedArrays) -> Path:
    """一時ディレクトリに書いてから名前変更で置き換える"""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Cannot create output directory {target.parent}: {e}") from e

    entries = []
    offset = 0
    buffers = []
    for name, array in arrays:
        le = _le_array(array)
        entries.append(OrderedDict([
            ('name', name),
            ('dtype', le.dtype.str),
            ('shape', [int(s) for s in le.shape]),
            ('offset', offset),
            ('nbytes', int(le.nbytes)),
        ]))
        buffers.append(le.tobytes())
        offset += le.nbytes

    manifest = OrderedDict([
        ('format', kind),
        ('byte_order', 'little'),
        ('body', body),
        ('arrays', entries),
        ('payload_bytes', offset),
    ])

    tmp = target.with_name(f".{target.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    with open(tmp / MANIFEST_NAME, 'w', encoding='utf-8') as f:
        f.write(json.dumps(manifest, indent=2, ensure_ascii=False))
        f.write("\n")
    with open(tmp / PAYLOAD_NAME, 'wb') as f:
        for buffer in buffers:
            f.write(buffer)
    _replace_dir(tmp, target)
    logger.debug(f"Wrote {kind} container: {target} ({offset} bytes)")
    return target


def read_manifest(path: PathLike) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointLoadError(f"Missing manifest: {manifest_path}")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            return json.load(f, object_pairs_hook=OrderedDict)
    except json.JSONDecodeError as e:
        raise CheckpointManifestError('manifest', f"invalid JSON in {manifest_path}: {e}") from e


def read_container(path: PathLike, kind: str) -> Tuple[Dict[str, Any], 'OrderedDict[str, np.ndarray]']:
    """マニフェストを検証してから配列を読み込む

    Raises:
        CheckpointVersionError: format 不一致
        CheckpointTruncatedError: ペイロード長不足
        CheckpointManifestError: マニフェストと配列記述の不整合
    """
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.get('format') != kind:
        raise CheckpointVersionError(kind, manifest.get('format'))
    if manifest.get('byte_order') != 'little':
        raise CheckpointManifestError('byte_order', f"expected 'little', found "
                                                    f"{manifest.get('byte_order')!r}")

    entries = manifest.get('arrays')
    if not isinstance(entries, list):
        raise CheckpointManifestError('arrays', "missing array table")
    expected_offset = 0
    for entry in entries:
        name = entry.get('name')
        dtype = entry.get('dtype')
        if dtype not in ALLOWED_DTYPES:
            raise CheckpointManifestError(f"arrays[{name}].dtype", f"unsupported {dtype!r}")
        count = int(np.prod(entry.get('shape', []), dtype=np.int64))
        if entry.get('nbytes') != count * 8:
            raise CheckpointManifestError(f"arrays[{name}].shape",
                                          f"shape {entry.get('shape')} disagrees with nbytes "
                                          f"{entry.get('nbytes')}")
        if entry.get('offset') != expected_offset:
            raise CheckpointManifestError(f"arrays[{name}].offset",
                                          f"expected {expected_offset}, found {entry.get('offset')}")
        expected_offset += entry['nbytes']
    if manifest.get('payload_bytes') != expected_offset:
        raise CheckpointManifestError('payload_bytes',
                                      f"expected {expected_offset}, found "
                                      f"{manifest.get('payload_bytes')}")

    payload_path = root / PAYLOAD_NAME
    if not payload_path.exists():
        raise CheckpointTruncatedError(payload_path, expected_offset, 0)
    payload = payload_path.read_bytes()
    if len(payload) < expected_offset:
        raise CheckpointTruncatedError(payload_path, expected_offset, len(payload))
    if len(payload) > expected_offset:
        raise CheckpointManifestError('payload_bytes',
                                      f"payload has {len(payload)} bytes, manifest declares "
                                      f"{expected_offset}")

    arrays: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for entry in entries:
        count = entry['nbytes'] // 8
        data = np.frombuffer(payload, dtype=entry['dtype'], count=count, offset=entry['offset'])
        native = np.float64 if entry['dtype'] == '<f8' else np.int64
        arrays[entry['name']] = data.reshape(entry['shape']).astype(native)
    return manifest['body'], arrays


def atomic_write_text(path: PathLike, text: str) -> Path:
    """一時ファイルに書いてから rename で置き換える"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.tmp-{os.getpid()}")
    with open(tmp, 'w', encoding='utf-8') as f:
        f.write(text)
    os.replace(tmp, target)
    return target
