"""
目的関数モジュール

共変量信頼性（AugMix 型の一貫性損失）と意味信頼性（外れ値露出）の目的関数、
およびその構成要素（交差エントロピー・KL・JS）を提供する。
入力は確率行列（行ごとに単体上の点）で、出力はテープ上のノード。
"""

import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from error_handler import ConfigError, ContractError, DataError, DimensionError
from lora_model import BaseModel, BranchSet, forward_graph
from models.config_models import ObjectiveConfig

logger = logging.getLogger(__name__)

Array = np.ndarray
Augmenter = Callable[[Array], Tuple[Array, Array]]


def cross_entropy(probabilities, labels: Sequence[int]) -> ad.Node:
    """バッチ平均の −log p_y（log の引数は 1e-12 でクランプ）"""
    probs = probabilities if isinstance(probabilities, ad.Node) else ad.constant(probabilities)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = probs.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross_entropy: labels must lie in [0, {k}), got "
                            f"{labels.min()}..{labels.max()}")
    picked = ad.pick_columns(probs, labels)
    return ad.scale(ad.mean_all(ad.log_clamped(picked)), -1.0)


def kl_div(p, q) -> ad.Node:
    """行ごとの KL(p ∥ q) = Σ p_i log(p_i / q_i)（n×1、0·log 0 = 0）"""
    p = p if isinstance(p, ad.Node) else ad.constant(p)
    q = q if isinstance(q, ad.Node) else ad.constant(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    log_ratio = ad.sub(ad.log_clamped(p), ad.log_clamped(q))
    return ad.row_sum(ad.mul(p, log_ratio))


def js_consistency(p0, p1, p2) -> ad.Node:
    """行ごとの JS(p0; p1; p2) = (1/3) Σ KL(p_i ∥ p̄)、p̄ = (p0+p1+p2)/3"""
    nodes = [p if isinstance(p, ad.Node) else ad.constant(p) for p in (p0, p1, p2)]
    if not nodes[0].shape == nodes[1].shape == nodes[2].shape:
        raise DimensionError(
            f"js_consistency: shape mismatch {[n.shape for n in nodes]}")
    mixture = ad.scale(ad.add(ad.add(nodes[0], nodes[1]), nodes[2]), 1.0 / 3.0)
    total = ad.add(ad.add(kl_div(nodes[0], mixture), kl_div(nodes[1], mixture)),
                   kl_div(nodes[2], mixture))
    return ad.scale(total, 1.0 / 3.0)


def _posterior(model: BaseModel, adapters: BranchSet, x: Array,
               bind: Optional[Dict[int, ad.Node]]) -> ad.Node:
    logits, _ = forward_graph(model, adapters, x, bind)
    return ad.softmax_rows(logits)


def augmix_objective(model: BaseModel, adapters: BranchSet, x: Array, y: Sequence[int],
                     augmenter: Augmenter, lambda_cov: float,
                     bind: Optional[Dict[int, ad.Node]] = None) -> ad.Node:
    """CE(f(x), y) + λ · mean JS(f(x); f(x_aug1); f(x_aug2))

    CE はクリーンビューのみに適用する。
    """
    try:
        x_aug1, x_aug2 = augmenter(x)
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"Augmenter failed: {e}") from e

    p_clean = _posterior(model, adapters, x, bind)
    loss = cross_entropy(p_clean, y)
    if lambda_cov == 0:
        return loss
    p_aug1 = _posterior(model, adapters, x_aug1, bind)
    p_aug2 = _posterior(model, adapters, x_aug2, bind)
    consistency = ad.mean_all(js_consistency(p_clean, p_aug1, p_aug2))
    return ad.add(loss, ad.scale(consistency, float(lambda_cov)))


def uniform_target(batch: int, num_classes: int) -> Array:
    """訓練ラベル空間上の一様分布（各クラス 1/K）"""
    return np.full((batch, num_classes), 1.0 / num_classes)


def oe_objective(model: BaseModel, adapters: BranchSet, x: Array, y: Sequence[int],
                 x_aux: Array, lambda_sem: float, num_classes: int,
                 bind: Optional[Dict[int, ad.Node]] = None) -> ad.Node:
    """CE(f(x), y) + λ · mean KL(f(x_aux) ∥ U([K]))"""
    x_aux = np.asarray(x_aux, dtype=np.float64)
    if x_aux.ndim != 2 or x_aux.shape[0] == 0:
        raise ContractError("oe_objective: auxiliary batch must be non-empty")
    loss = cross_entropy(_posterior(model, adapters, x, bind), y)
    if lambda_sem == 0:
        return loss
    p_aux = _posterior(model, adapters, x_aux, bind)
    if p_aux.shape[1] != num_classes:
        raise DimensionError(f"oe_objective: model has {p_aux.shape[1]} classes, K={num_classes}")
    aux_term = ad.mean_all(kl_div(p_aux, uniform_target(x_aux.shape[0], num_classes)))
    return ad.add(loss, ad.scale(aux_term, float(lambda_sem)))


def base_objective(model: BaseModel, x: Array, y: Sequence[int],
                   bind: Optional[Dict[int, ad.Node]] = None) -> ad.Node:
    """ベース学習の CE"""
    return cross_entropy(_posterior(model, None, x, bind), y)


def validate_objective_config(config: ObjectiveConfig) -> None:
    errors = config.validate()
    if errors:
        raise ConfigError(f"Objective configuration invalid: {errors}")
