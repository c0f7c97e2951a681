"""
信頼性算術ツールキット - シード導出ユーティリティ

マスターシードと名前から 64bit サブシードを導出し、
名前付き PRNG（numpy PCG64）を生成する。
"""

import hashlib
from typing import Sequence, Union

import numpy as np

PRNG_NAME = "numpy.PCG64"


def derive_seed(master: int, *names: Union[str, int]) -> int:
    """SHA-256(f"{master}:{name/...}") の先頭 8 バイト（リトルエンディアン）"""
    label = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{int(master)}:{label}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def make_rng(seed: Union[int, Sequence[int]]) -> np.random.Generator:
    """シード（またはシード列）から PCG64 ジェネレーターを生成"""
    if isinstance(seed, (list, tuple)):
        sequence = np.random.SeedSequence([int(s) for s in seed])
    else:
        sequence = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.PCG64(sequence))
