"""
自動微分核心 (Autodiff Core)
小型全連接網路的確定性反向傳播引擎

功能：
1. Tape 記錄前向計算，反向模式求梯度
2. 梯度反轉層 (GRL)
3. MLP 前向傳播（BatchNorm / Dropout / LeakyReLU）
4. Adam 優化器
5. 截斷常態分佈初始化
6. 自適應梯度裁剪

所有數值一律 float64；任何運算產生 NaN/Inf 立即報錯。
"""

import numpy as np
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
from scipy.stats import truncnorm

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ACTIVATIONS = ('leaky_relu', 'linear', 'sigmoid')

ArrayTree = Union[np.ndarray, Mapping[str, np.ndarray]]


class ShapeMismatchError(ValueError):
    """張量形狀不相容"""


class NonFiniteError(FloatingPointError):
    """運算結果出現 NaN 或 Inf"""


class TraceConsumedError(RuntimeError):
    """同一條 Tape 被反向傳播兩次"""


class TrainingDivergedError(RuntimeError):
    """訓練損失發散"""


def seed_sequence(seed) -> np.random.SeedSequence:
    """int / None / SeedSequence → SeedSequence"""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    """確認陣列全為有限值，否則丟出 NonFiniteError"""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{where}: 出現非有限值 (NaN/Inf)")
    return array


# ========== 計算圖 ==========

class Var:
    """Tape 上的一個節點（葉節點或運算結果）"""

    __slots__ = ('value', 'parents', 'backward_fn', 'tape', 'index', 'requires_grad', 'op')

    def __init__(self, value: np.ndarray, tape: 'Tape', index: int,
                 parents: Tuple['Var', ...] = (), backward_fn: Optional[Callable] = None,
                 requires_grad: bool = False, op: str = 'leaf'):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.value.shape})"


class Tape:
    """
    前向計算記錄

    每個 Var 依建立順序存放於 nodes；反向傳播依相反順序走訪，
    因此記錄順序本身就是拓撲順序。
    """

    def __init__(self):
        self.nodes: List[Var] = []
        self.consumed = False
        self._bindings: Dict[Tuple[int, bool], Dict[str, Var]] = {}

    def leaf(self, value, requires_grad: bool = True) -> Var:
        """建立葉節點（參數或需要梯度的輸入）"""
        array = check_finite(np.asarray(value, dtype=np.float64), 'leaf')
        node = Var(array, self, len(self.nodes), requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Var:
        """建立不需梯度的常數節點"""
        return self.leaf(value, requires_grad=False)

    def record(self, value: np.ndarray, parents: Sequence[Var],
               backward_fn: Callable, op: str) -> Var:
        for parent in parents:
            if parent.tape is not self:
                raise ValueError(f"{op}: 輸入節點屬於不同的 Tape")
        check_finite(value, op)
        requires_grad = any(p.requires_grad for p in parents)
        node = Var(value, self, len(self.nodes), tuple(parents),
                   backward_fn if requires_grad else None, requires_grad, op)
        self.nodes.append(node)
        return node

    def bind(self, params: 'MlpParams', trainable: bool = True) -> Dict[str, Var]:
        """
        將 MLP 參數綁定為葉節點

        同一組參數在同一條 Tape 上只綁定一次，多次使用時梯度自動累加。
        """
        key = (id(params), trainable)
        if key not in self._bindings:
            self._bindings[key] = {
                name: self.leaf(params.arrays[name], requires_grad=trainable)
                for name in params.trainable_names()
            }
        return self._bindings[key]


class Gradients:
    """反向傳播結果：依節點查詢梯度，未觸及的節點回傳零"""

    def __init__(self, grads: Dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, var: Var) -> np.ndarray:
        grad = self._grads.get(var.index)
        return np.zeros_like(var.value) if grad is None else grad

    def __contains__(self, var: Var) -> bool:
        return var.index in self._grads

    def for_params(self, params: 'MlpParams', trainable: bool = True) -> Dict[str, np.ndarray]:
        """取出某組 MLP 參數的梯度（名稱對應 params.arrays）"""
        bound = self._tape.bind(params, trainable)
        return {name: self[var] for name, var in bound.items()}


def backward(tape: Tape, loss: Var, loss_grad=None, retain: bool = False) -> Gradients:
    """
    反向模式求梯度

    參數:
        tape: 前向記錄
        loss: 起點節點（通常為純量損失）
        loss_grad: 上游梯度，預設為全 1
        retain: True 時保留 Tape，可再做一次反向傳播

    返回:
        Gradients: 每個參數與輸入節點的梯度
    """
    if tape.consumed:
        raise TraceConsumedError("Tape 已經做過反向傳播")
    if loss.tape is not tape:
        raise ValueError("loss 不在此 Tape 上")

    seed = np.ones_like(loss.value) if loss_grad is None else np.asarray(loss_grad, dtype=np.float64)
    if seed.ndim == 0 and loss.value.ndim > 0:
        seed = np.full_like(loss.value, float(seed))
    if seed.shape != loss.value.shape:
        raise ShapeMismatchError(f"loss_grad 形狀 {seed.shape} 與 loss {loss.value.shape} 不符")
    check_finite(seed, 'loss_grad')

    grads: Dict[int, np.ndarray] = {loss.index: seed}
    for node in reversed(tape.nodes[:loss.index + 1]):
        grad = grads.get(node.index)
        if grad is None or node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            check_finite(parent_grad, f'backward/{node.op}')
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + parent_grad
            else:
                grads[parent.index] = parent_grad

    if not retain:
        tape.consumed = True
    return Gradients(grads, tape)


# ========== 基本運算 ==========

def _same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}")


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, 'add')
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g), 'add')


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, 'sub')
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g), 'sub')


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, 'mul')
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av), 'mul')


def scale(a: Var, factor: float) -> Var:
    return a.tape.record(a.value * factor, (a,), lambda g: (g * factor,), 'scale')


def matmul(x: Var, w: Var) -> Var:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"matmul: {x.shape} @ {w.shape}")
    xv, wv = x.value, w.value

    def backward_fn(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if w.requires_grad else None
        return gx, gw

    return x.tape.record(xv @ wv, (x, w), backward_fn, 'matmul')


def add_bias(x: Var, b: Var) -> Var:
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeMismatchError(f"add_bias: {x.shape} + {b.shape}")
    return x.tape.record(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), 'add_bias')


def leaky_relu(x: Var, slope: float = LEAKY_SLOPE) -> Var:
    local = np.where(x.value > 0, 1.0, slope)
    return x.tape.record(x.value * local, (x,), lambda g: (g * local,), 'leaky_relu')


def sigmoid(x: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape.record(out, (x,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.tape.record(out, (x,), lambda g: (g * out,), 'exp')


def grad_reverse(x: Var, constant: float = 1.0) -> Var:
    """
    梯度反轉層 (Gradient Reversal Layer)

    前向為恆等映射；反向將上游梯度乘以 -constant。
    """
    return x.tape.record(x.value.copy(), (x,), lambda g: (-constant * g,), 'grad_reverse')


def dropout(x: Var, rate: float, rng: np.random.Generator) -> Var:
    """訓練模式的 inverted dropout：保留的單元放大 1/(1-rate)"""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape.record(x.value * keep, (x,), lambda g: (g * keep,), 'dropout')


def concat(parts: Sequence[Var], axis: int = 1) -> Var:
    if not parts:
        raise ValueError("concat: 沒有輸入")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatchError(f"concat: 批次大小不一致 {sorted(rows)}")
    widths = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, widths, axis=axis))

    return parts[0].tape.record(np.concatenate([p.value for p in parts], axis=axis),
                                tuple(parts), backward_fn, 'concat')


def take_rows(x: Var, index: np.ndarray) -> Var:
    """依索引重排列（批次軸 shuffle 用）"""
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        return (gx,)

    return x.tape.record(x.value[index], (x,), backward_fn, 'take_rows')


def mean(x: Var) -> Var:
    size = x.value.size
    return x.tape.record(np.asarray(x.value.mean()), (x,),
                         lambda g: (np.full_like(x.value, g / size),), 'mean')


def total(x: Var) -> Var:
    return x.tape.record(np.asarray(x.value.sum()), (x,),
                         lambda g: (np.full_like(x.value, g),), 'total')


def mean_squared_norm(x: Var) -> Var:
    """批次平均的列平方範數：mean_b Σ_j x[b, j]²"""
    rows = x.shape[0]
    value = np.asarray((x.value ** 2).sum() / rows)
    return x.tape.record(value, (x,), lambda g: (g * 2.0 * x.value / rows,), 'mean_squared_norm')


def log_mean_exp(x: Var) -> Var:
    """log(mean(exp(x)))，先減去最大值避免溢位"""
    peak = x.value.max()
    shifted = np.exp(x.value - peak)
    denom = shifted.sum()
    value = np.asarray(peak + np.log(denom / x.value.size))
    weights = shifted / denom
    return x.tape.record(value, (x,), lambda g: (g * weights,), 'log_mean_exp')


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """批次平均 softmax 交叉熵"""
    labels = np.asarray(labels, dtype=np.int64)
    rows, classes = logits.shape
    if labels.shape != (rows,):
        raise ShapeMismatchError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"標籤超出範圍 [0, {classes})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = np.asarray(-log_probs[np.arange(rows), labels].mean())

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(rows), labels] -= 1.0
        return (g * probs / rows,)

    return logits.tape.record(value, (logits,), backward_fn, 'softmax_cross_entropy')


def batch_norm_train(x: Var, gamma: Var, beta: Var, eps: float = BN_EPS) -> Tuple[Var, np.ndarray, np.ndarray]:
    """
    訓練模式 BatchNorm：以批次統計量正規化

    返回:
        (輸出節點, 批次平均, 批次變異數)
    """
    rows = x.shape[0]
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.value - mu) * inv_std
    out = gamma.value * x_hat + beta.value

    def backward_fn(g):
        d_hat = g * gamma.value
        gx = inv_std / rows * (rows * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
        return gx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    node = x.tape.record(out, (x, gamma, beta), backward_fn, 'batch_norm_train')
    return node, mu, var


def batch_norm_eval(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray,
                    running_var: np.ndarray, eps: float = BN_EPS) -> Var:
    inv_std = 1.0 / np.sqrt(running_var + eps)
    x_hat = (x.value - running_mean) * inv_std
    out = gamma.value * x_hat + beta.value

    def backward_fn(g):
        return g * gamma.value * inv_std, (g * x_hat).sum(axis=0), g.sum(axis=0)

    return x.tape.record(out, (x, gamma, beta), backward_fn, 'batch_norm_eval')


# ========== MLP ==========

@dataclass(frozen=True)
class LayerSpec:
    """單層全連接設定（對應超參數表的一列）"""
    width: int
    batch_norm: bool = False
    dropout_rate: float = 0.0
    activation: str = 'leaky_relu'

    def __post_init__(self):
        if int(self.width) <= 0:
            raise ValueError(f"width 必須為正整數: {self.width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate 必須在 [0,1): {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"未知的 activation: {self.activation}")

    def as_row(self) -> List[float]:
        return [self.width, float(self.batch_norm), self.dropout_rate, ACTIVATIONS.index(self.activation)]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> 'LayerSpec':
        return cls(int(round(row[0])), bool(round(row[1])), round(float(row[2]), 6),
                   ACTIVATIONS[int(round(row[3]))])


def init_truncated_normal(shape, mu: float = 0.0, sigma: float = 0.001, seed=None) -> np.ndarray:
    """
    截斷常態分佈初始化：Normal(mu, sigma²) 限制在 mu ± 2·sigma

    參數:
        shape: 輸出形狀（正整數序列）
        mu, sigma: 分佈參數，sigma > 0
        seed: int / SeedSequence / Generator，同一 seed 產生相同結果
    """
    shape = tuple(shape) if np.iterable(shape) else (shape,)
    if not shape or any(int(d) != d or d <= 0 for d in shape):
        raise ValueError(f"無效的形狀: {shape}")
    if sigma <= 0:
        raise ValueError(f"sigma 必須 > 0: {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return truncnorm.rvs(-2.0, 2.0, loc=mu, scale=sigma, size=tuple(int(d) for d in shape),
                         random_state=rng)


class MlpParams:
    """
    MLP 參數集合

    arrays 以名稱存放所有陣列：
        W{k}, b{k}                      第 k 層權重、偏差
        bn{k}.gamma, bn{k}.beta         BatchNorm 縮放、平移（可訓練）
        bn{k}.running_mean/.running_var 推論用統計量（不可訓練）
    """

    def __init__(self, in_dim: int, specs: Sequence[LayerSpec], arrays: Dict[str, np.ndarray]):
        self.in_dim = int(in_dim)
        self.specs = list(specs)
        self.arrays = arrays
        self._validate()

    def _validate(self):
        width = self.in_dim
        for k, spec in enumerate(self.specs):
            if self.arrays[f'W{k}'].shape != (width, spec.width):
                raise ShapeMismatchError(f"W{k} 形狀 {self.arrays[f'W{k}'].shape} 應為 {(width, spec.width)}")
            if self.arrays[f'b{k}'].shape != (spec.width,):
                raise ShapeMismatchError(f"b{k} 形狀錯誤")
            if spec.batch_norm:
                for suffix in ('gamma', 'beta', 'running_mean', 'running_var'):
                    if self.arrays[f'bn{k}.{suffix}'].shape != (spec.width,):
                        raise ShapeMismatchError(f"bn{k}.{suffix} 形狀錯誤")
            width = spec.width

    @property
    def out_dim(self) -> int:
        return self.specs[-1].width

    @classmethod
    def initialize(cls, in_dim: int, specs: Sequence[LayerSpec], seed=None,
                   sigma: float = 0.001, mu: float = 0.0, scheme: str = 'truncated_normal') -> 'MlpParams':
        """
        初始化參數

        scheme:
            'truncated_normal': 所有權重 TN(mu, sigma)
            'he'              : TN(0, sqrt(2/fan_in))，用於宿主網路與 MI 估計器
        """
        streams = seed_sequence(seed).spawn(len(specs))
        arrays: Dict[str, np.ndarray] = {}
        width = in_dim
        for k, spec in enumerate(specs):
            layer_sigma = sigma if scheme == 'truncated_normal' else np.sqrt(2.0 / width)
            layer_mu = mu if scheme == 'truncated_normal' else 0.0
            arrays[f'W{k}'] = init_truncated_normal((width, spec.width), layer_mu, layer_sigma, streams[k])
            arrays[f'b{k}'] = np.zeros(spec.width)
            if spec.batch_norm:
                arrays[f'bn{k}.gamma'] = np.ones(spec.width)
                arrays[f'bn{k}.beta'] = np.zeros(spec.width)
                arrays[f'bn{k}.running_mean'] = np.zeros(spec.width)
                arrays[f'bn{k}.running_var'] = np.ones(spec.width)
            width = spec.width
        return cls(in_dim, specs, arrays)

    @classmethod
    def zeros(cls, in_dim: int, specs: Sequence[LayerSpec]) -> 'MlpParams':
        params = cls.initialize(in_dim, specs, seed=0)
        for name in params.arrays:
            if name.startswith(('W', 'b')) and not name.startswith('bn'):
                params.arrays[name] = np.zeros_like(params.arrays[name])
        return params

    def trainable_names(self) -> List[str]:
        return [name for name in self.arrays if 'running' not in name]

    def copy(self) -> 'MlpParams':
        return MlpParams(self.in_dim, self.specs, {k: v.copy() for k, v in self.arrays.items()})

    def spec_table(self) -> np.ndarray:
        return np.array([spec.as_row() for spec in self.specs], dtype=np.float64)


def mlp_forward(params: MlpParams, x: Union[Var, np.ndarray], mode: str = 'eval',
                rng: Optional[np.random.Generator] = None, tape: Optional[Tape] = None,
                slope: float = LEAKY_SLOPE, trainable: bool = True,
                bn_momentum: float = BN_MOMENTUM) -> Tuple[Var, Tape]:
    """
    MLP 前向傳播

    每層順序：dropout(輸入, 僅訓練) → 線性 → BatchNorm → 激活。
    訓練模式下 BatchNorm 使用批次統計量並更新 running 統計量；
    推論模式下 dropout 為恆等、BatchNorm 使用 running 統計量。

    參數:
        params: MLP 參數
        x: 輸入 [batch, in_dim]，ndarray 視為常數
        mode: 'train' 或 'eval'
        rng: 訓練模式 dropout 用的亂數流
        tape: 既有 Tape（串接多個網路時傳入）
        trainable: False 時參數以常數綁定（凍結網路）

    返回:
        (輸出節點, tape)
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"未知的 mode: {mode}")
    if tape is None:
        tape = x.tape if isinstance(x, Var) else Tape()
    h = x if isinstance(x, Var) else tape.constant(x)
    if h.value.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeMismatchError(f"輸入形狀 {h.shape} 與第一層輸入寬度 {params.in_dim} 不符")

    training = mode == 'train'
    bound = tape.bind(params, trainable)
    for k, spec in enumerate(params.specs):
        if training and spec.dropout_rate > 0:
            if rng is None:
                raise ValueError("訓練模式的 dropout 需要 rng")
            h = dropout(h, spec.dropout_rate, rng)
        h = add_bias(matmul(h, bound[f'W{k}']), bound[f'b{k}'])
        if spec.batch_norm:
            gamma, beta = bound[f'bn{k}.gamma'], bound[f'bn{k}.beta']
            if training:
                h, mu, var = batch_norm_train(h, gamma, beta)
                rm, rv = params.arrays[f'bn{k}.running_mean'], params.arrays[f'bn{k}.running_var']
                params.arrays[f'bn{k}.running_mean'] = bn_momentum * rm + (1.0 - bn_momentum) * mu
                params.arrays[f'bn{k}.running_var'] = bn_momentum * rv + (1.0 - bn_momentum) * var
            else:
                h = batch_norm_eval(h, gamma, beta, params.arrays[f'bn{k}.running_mean'],
                                    params.arrays[f'bn{k}.running_var'])
        if spec.activation == 'leaky_relu':
            h = leaky_relu(h, slope)
        elif spec.activation == 'sigmoid':
            h = sigmoid(h)
    return h, tape


def mlp_predict(params: MlpParams, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    """推論模式前向，直接回傳陣列"""
    out, _ = mlp_forward(params, np.asarray(x, dtype=np.float64), 'eval', slope=slope, trainable=False)
    return out.value


# ========== 優化器與梯度裁剪 ==========

@dataclass
class AdamState:
    """Adam 狀態（預設值取自超參數表）"""
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = None
    v: Dict[str, np.ndarray] = None

    def __post_init__(self):
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    偏差校正 Adam 更新（就地修改 params 內的陣列）

    參數:
        params: 名稱 → 參數陣列
        grads: 名稱 → 梯度，形狀需與參數相同；缺少的名稱視為零梯度
        state: AdamState，step 每次加一

    返回:
        (params, state)
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"梯度 {name} 沒有對應的參數")
        if np.shape(grad) != params[name].shape:
            raise ShapeMismatchError(f"{name}: 梯度 {np.shape(grad)} vs 參數 {params[name].shape}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, value in params.items():
        grad = grads.get(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        if grad is not None:
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
        else:
            m *= state.beta1
            v *= state.beta2
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        value -= update
    return params, state


def global_norm(tree: ArrayTree) -> float:
    """所有座標的整體 Euclidean 範數"""
    if isinstance(tree, Mapping):
        return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in tree.values())))
    return float(np.sqrt(np.sum(np.square(tree))))


def clip_adaptive(g_u: ArrayTree, g_m: ArrayTree) -> ArrayTree:
    """
    自適應梯度裁剪：g_a = min(‖g_u‖, ‖g_m‖) · g_m / ‖g_m‖

    g_u, g_m 可為單一陣列或名稱 → 陣列的字典（整體範數）。
    ‖g_m‖ = 0 時原樣回傳 g_m。
    """
    if isinstance(g_u, Mapping) != isinstance(g_m, Mapping):
        raise ShapeMismatchError("g_u 與 g_m 結構不同")
    if isinstance(g_m, Mapping):
        if set(g_u) != set(g_m) or any(np.shape(g_u[k]) != np.shape(g_m[k]) for k in g_m):
            raise ShapeMismatchError("g_u 與 g_m 的參數集合或形狀不同")
    elif np.shape(g_u) != np.shape(g_m):
        raise ShapeMismatchError(f"g_u {np.shape(g_u)} vs g_m {np.shape(g_m)}")

    norm_m = global_norm(g_m)
    if norm_m == 0.0:
        return g_m
    ratio = min(global_norm(g_u), norm_m) / norm_m
    if isinstance(g_m, Mapping):
        return {name: ratio * np.asarray(g) for name, g in g_m.items()}
    return ratio * np.asarray(g_m)
