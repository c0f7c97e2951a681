"""
テンソル自動微分モジュール

float64 の 2 次元 numpy 配列を唯一の数値キャリアとし、
フォワードごとにテープ（計算グラフ）を構築する逆伝播型自動微分を提供する。
- 行列積・加減算・行バイアス・ReLU・行方向 softmax
- クランプ付き対数・要素積・集約
- 逆伝播（トポロジカル順）と中心差分による勾配検査
"""

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from error_handler import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

Array = np.ndarray
Operand = Union['Node', Array, float]

FD_STEP = 1e-6
LOG_CLAMP = 1e-12


def as_matrix(value) -> Array:
    """値を float64 の 2 次元配列に変換"""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise DimensionError(f"Matrix must be 2-D, got shape {array.shape}")
    return array


def _check_finite(value: Array, op: str) -> Array:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"Non-finite value produced by {op}")
    return value


class Node:
    """計算グラフのノード

    Attributes:
        value: 値（2 次元 float64）
        grad: 勾配（逆伝播時に遅延確保）
        parents: 被演算ノード
        op: 逆伝播規則タグ
        requires_grad: パラメータなら True
    """

    __slots__ = ('value', 'grad', 'parents', 'op', 'requires_grad', 'name', '_backward')

    def __init__(self, value, parents: Tuple['Node', ...] = (), op: str = '',
                 requires_grad: bool = False, name: str = ''):
        self.value = _check_finite(as_matrix(value), op or 'leaf')
        self.grad: Optional[Array] = None
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[Array], None] = lambda g: None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() requires a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        label = self.name or self.op or 'leaf'
        return f"Node({label}, shape={self.value.shape})"

    # 演算子
    def __add__(self, other: Operand) -> 'Node':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Node':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Node':
        return sub(self, other)

    def __mul__(self, other: Operand) -> 'Node':
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Node':
        return self.__mul__(other)

    def __matmul__(self, other: Operand) -> 'Node':
        return matmul(self, other)

    def __neg__(self) -> 'Node':
        return scale(self, -1.0)


def parameter(value, name: str = '') -> Node:
    """学習対象パラメータのノード"""
    return Node(value, requires_grad=True, name=name)


def constant(value, name: str = '') -> Node:
    return Node(value, name=name)


def _node(value: Operand) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _needs_grad(*nodes: Node) -> bool:
    return any(n.requires_grad or n.parents for n in nodes)


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# 演算
# ---------------------------------------------------------------------------

def matmul(a: Operand, b: Operand):
    """行列積。どちらもノードでなければ配列を返す"""
    if not isinstance(a, Node) and not isinstance(b, Node):
        left, right = as_matrix(a), as_matrix(b)
        if left.shape[1] != right.shape[0]:
            raise DimensionError(f"matmul: shape mismatch {left.shape} x {right.shape}")
        return _check_finite(left @ right, 'matmul')

    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    out = Node(a.value @ b.value, (a, b), 'matmul')

    def backward(g: Array) -> None:
        if _needs_grad(a):
            a._accumulate(g @ b.value.T)
        if _needs_grad(b):
            b._accumulate(a.value.T @ g)
    out._backward = backward
    return out


def transpose(a: Operand) -> Node:
    a = _node(a)
    out = Node(a.value.T, (a,), 'transpose')

    def backward(g: Array) -> None:
        a._accumulate(g.T)
    out._backward = backward
    return out


def add(a: Operand, b: Operand) -> Node:
    a, b = _node(a), _node(b)
    _same_shape(a, b, 'add')
    out = Node(a.value + b.value, (a, b), 'add')

    def backward(g: Array) -> None:
        a._accumulate(g)
        b._accumulate(g)
    out._backward = backward
    return out


def sub(a: Operand, b: Operand) -> Node:
    a, b = _node(a), _node(b)
    _same_shape(a, b, 'sub')
    out = Node(a.value - b.value, (a, b), 'sub')

    def backward(g: Array) -> None:
        a._accumulate(g)
        b._accumulate(-g)
    out._backward = backward
    return out


def mul(a: Operand, b: Operand) -> Node:
    """要素積"""
    a, b = _node(a), _node(b)
    _same_shape(a, b, 'mul')
    out = Node(a.value * b.value, (a, b), 'mul')

    def backward(g: Array) -> None:
        a._accumulate(g * b.value)
        b._accumulate(g * a.value)
    out._backward = backward
    return out


def scale(a: Operand, c: float) -> Node:
    a = _node(a)
    out = Node(a.value * c, (a,), 'scale')

    def backward(g: Array) -> None:
        a._accumulate(g * c)
    out._backward = backward
    return out


def add_row_bias(a: Operand, bias: Operand) -> Node:
    """各行にバイアス行ベクトル (1×u) を加算（唯一のブロードキャスト）"""
    a, bias = _node(a), _node(bias)
    if bias.shape != (1, a.shape[1]):
        raise DimensionError(f"add_row_bias: bias shape {bias.shape} vs rows {a.shape}")
    out = Node(a.value + bias.value, (a, bias), 'add_row_bias')

    def backward(g: Array) -> None:
        a._accumulate(g)
        bias._accumulate(g.sum(axis=0, keepdims=True))
    out._backward = backward
    return out


def relu(a: Operand) -> Node:
    a = _node(a)
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,), 'relu')

    def backward(g: Array) -> None:
        a._accumulate(g * mask)
    out._backward = backward
    return out


def softmax_rows(a: Operand) -> Node:
    """行方向 softmax（最大値減算で安定化）"""
    a = _node(a)
    if a.shape[1] == 0:
        raise DimensionError("softmax: empty row")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    out = Node(probs, (a,), 'softmax')

    def backward(g: Array) -> None:
        inner = (g * probs).sum(axis=1, keepdims=True)
        a._accumulate(probs * (g - inner))
    out._backward = backward
    return out


def log_clamped(a: Operand, eps: float = LOG_CLAMP) -> Node:
    """log(max(a, eps))。クランプ域の勾配は 0"""
    a = _node(a)
    clamped = np.maximum(a.value, eps)
    active = a.value > eps
    out = Node(np.log(clamped), (a,), 'log_clamped')

    def backward(g: Array) -> None:
        a._accumulate(np.where(active, g / clamped, 0.0))
    out._backward = backward
    return out


def row_sum(a: Operand) -> Node:
    """行ごとの和（n×1）"""
    a = _node(a)
    out = Node(a.value.sum(axis=1, keepdims=True), (a,), 'row_sum')

    def backward(g: Array) -> None:
        a._accumulate(np.broadcast_to(g, a.shape).copy())
    out._backward = backward
    return out


def sum_all(a: Operand) -> Node:
    a = _node(a)
    out = Node(np.array([[a.value.sum()]]), (a,), 'sum')

    def backward(g: Array) -> None:
        a._accumulate(np.full(a.shape, g[0, 0]))
    out._backward = backward
    return out


def mean_all(a: Operand) -> Node:
    a = _node(a)
    count = a.value.size
    if count == 0:
        raise DimensionError("mean of an empty matrix")
    out = Node(np.array([[a.value.sum() / count]]), (a,), 'mean')

    def backward(g: Array) -> None:
        a._accumulate(np.full(a.shape, g[0, 0] / count))
    out._backward = backward
    return out


def pick_columns(a: Operand, columns: Sequence[int]) -> Node:
    """各行から指定列を取り出す（n×1）"""
    a = _node(a)
    columns = np.asarray(columns, dtype=np.int64)
    if columns.shape != (a.shape[0],):
        raise DimensionError(f"pick_columns: {columns.shape[0]} indices for {a.shape[0]} rows")
    rows = np.arange(a.shape[0])
    out = Node(a.value[rows, columns].reshape(-1, 1), (a,), 'pick')

    def backward(g: Array) -> None:
        grad = np.zeros_like(a.value)
        np.add.at(grad, (rows, columns), g[:, 0])
        a._accumulate(grad)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# 数値ヘルパー
# ---------------------------------------------------------------------------

def softmax_logsumexp(logits) -> Tuple[Array, float]:
    """1 行のロジットから (確率, log Σ exp) を返す"""
    row = np.asarray(logits, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise DimensionError("softmax: empty row")
    _check_finite(row, 'softmax input')
    peak = row.max()
    exp = np.exp(row - peak)
    total = exp.sum()
    return exp / total, float(peak + math.log(total))


# ---------------------------------------------------------------------------
# 逆伝播
# ---------------------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node, parameters: Optional[Iterable[Node]] = None) -> Dict[Node, Array]:
    """スカラー損失から逆伝播し、パラメータごとの勾配を返す

    経路上にないパラメータの勾配はゼロ行列。
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is not None and node.parents:
            node._backward(node.grad)

    reached = [n for n in order if n.requires_grad]
    grads: Dict[Node, Array] = {}
    for node in reached:
        grads[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
    for node in parameters or ():
        if node not in grads:
            node.grad = np.zeros_like(node.value)
            grads[node] = node.grad
    return grads


def numerical_gradient(fn: Callable[[], Node], array: Array, h: float = FD_STEP) -> Array:
    """中心差分による勾配（array をその場で摂動）"""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=['multi_index'])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + h
        plus = fn().item()
        array[index] = original - h
        minus = fn().item()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: Array, numeric: Array, floor: float = 1e-3) -> float:
    """要素ごとの相対誤差の最大値（分母に下限 floor）"""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(build_loss: Callable[[Dict[int, Node]], Node],
                   arrays: Sequence[Array],
                   h: float = FD_STEP) -> float:
    """解析勾配と中心差分の最大相対誤差

    Args:
        build_loss: id(array) -> Node の束縛を受け取り損失ノードを返す関数
        arrays: 検査対象の配列（その場で摂動される）
    """
    bound = {id(a): parameter(a) for a in arrays}
    loss = build_loss(bound)
    grads = backward(loss, bound.values())
    worst = 0.0
    for array in arrays:
        analytic = grads[bound[id(array)]]

        def evaluate() -> Node:
            return build_loss({id(a): constant(a) for a in arrays})
        numeric = numerical_gradient(evaluate, array, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
