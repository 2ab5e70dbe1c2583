"""
FDEN 外掛模型 (Factor Decomposer-Entangler Network)
把凍結宿主的潛在表示 z 拆成互相獨立、語意對齊的因子 f_0..f_N

功能：
1. Decomposer / Entangler：z → 因子 → z̃
2. Statisticians Network：以 DV 下界估計因子間的 total correlation
3. Alignment heads：每個監督因子一個分類頭（f_0 無監督）
4. 訓練步驟：梯度反轉層 + 自適應梯度裁剪 + Adam
5. 因子操作：內插、平均因子替換、因子編碼

網路命名：
    decomposer.global, decomposer.local{i}     θ
    entangler.stream{i}, entangler.global      φ
    statnet                                    ξ
    head{i}  (i = 1..N)                        ψ
"""

import numpy as np
import pandas as pd
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
from scipy.special import log_softmax

from autodiff_core import (
    BN_MOMENTUM, LEAKY_SLOPE, AdamState, LayerSpec, MlpParams, NonFiniteError, ShapeMismatchError,
    Tape, TrainingDivergedError, Var, adam_step, add, backward, clip_adaptive, concat, global_norm,
    grad_reverse, log_mean_exp, mean, mean_squared_norm, mlp_forward, mlp_predict, scale,
    seed_sequence, softmax_cross_entropy, sub, take_rows,
)
from host_model import (
    KIND_FDEN, CheckpointError, FrozenModelError, HostModel, LatentDataset, decode, decode_var,
    params_checksum, params_from_entries, params_to_entries,
)
from synthgen import ATTRIBUTES

MARGINAL_MODES = ('one_vs_all', 'full_shuffle')
CURVE_COLUMNS = ['step', 'loss_total', 'loss_r', 'loss_c', 'loss_m', 'grad_norm_u', 'grad_norm_m']
GROUP_PREFIXES = {'theta': 'decomposer.', 'phi': 'entangler.', 'xi': 'statnet', 'psi': 'head'}


# ========== 網路結構 ==========

def _scaled(width: int, width_scale: float) -> int:
    return max(1, int(round(width * width_scale)))


def network_specs(dim: int, class_counts: Sequence[int], dropout: float = 0.2,
                  width_scale: float = 1.0) -> Dict[str, Tuple[int, List[LayerSpec]]]:
    """
    各子網路的 (輸入寬度, 層設定)

    每個子網路第一層有 BatchNorm，所有層 dropout 相同，最後一層線性輸出。
    width_scale 只縮放隱藏層寬度（1.0 即原始寬度）。
    """
    n = len(class_counts)

    def stack(hidden: Sequence[int], out: int) -> List[LayerSpec]:
        layers = [LayerSpec(_scaled(w, width_scale), batch_norm=(k == 0), dropout_rate=dropout)
                  for k, w in enumerate(hidden)]
        layers.append(LayerSpec(out, dropout_rate=dropout, activation='linear'))
        return layers

    nets = {'decomposer.global': (dim, stack((512, 512, 512), 2 * dim))}
    for i in range(n + 1):
        nets[f'decomposer.local{i}'] = (2 * dim, stack((512, 512), dim))
    for i in range(n + 1):
        nets[f'entangler.stream{i}'] = (dim, stack((256, 256), dim))
    nets['entangler.global'] = ((n + 1) * dim, stack((512, 512, 512), dim))
    nets['statnet'] = ((n + 1) * dim, stack((1024, 256, 64), 1))
    for i, classes in enumerate(class_counts, start=1):
        nets[f'head{i}'] = (dim, stack((512, 256, 64), int(classes)))
    return nets


class FdenModel:
    """
    FDEN 參數集合

    dim: 宿主潛在寬度
    class_counts: 每個監督因子的類別數（N = len(class_counts)）
    networks: 子網路名稱 → MlpParams
    """

    def __init__(self, dim: int, class_counts: Sequence[int], networks: Dict[str, MlpParams]):
        self.dim = int(dim)
        self.class_counts = tuple(int(c) for c in class_counts)
        self.networks = dict(networks)
        self._validate()

    def _validate(self):
        if self.dim <= 0:
            raise ValueError(f"dim 必須為正: {self.dim}")
        if not self.class_counts or min(self.class_counts) < 2:
            raise ValueError(f"每個監督因子至少需要 2 類: {self.class_counts}")
        expected = network_specs(self.dim, self.class_counts)
        missing = sorted(set(expected) - set(self.networks))
        extra = sorted(set(self.networks) - set(expected))
        if missing or extra:
            raise ShapeMismatchError(f"子網路不符: 缺少 {missing}，多出 {extra}")
        for name, (in_dim, specs) in expected.items():
            params = self.networks[name]
            if params.in_dim != in_dim or params.out_dim != specs[-1].width:
                raise ShapeMismatchError(
                    f"{name}: {params.in_dim}→{params.out_dim}，應為 {in_dim}→{specs[-1].width}")

    @property
    def n_factors(self) -> int:
        """監督因子數 N（不含 f_0）"""
        return len(self.class_counts)

    @classmethod
    def initialize(cls, dim: int = 32, class_counts: Sequence[int] = (3, 3, 2, 2), seed=None,
                   sigma: float = 0.001, dropout: float = 0.2, width_scale: float = 1.0,
                   mu: float = 0.0) -> 'FdenModel':
        specs = network_specs(dim, class_counts, dropout, width_scale)
        streams = seed_sequence(seed).spawn(len(specs))
        networks = {
            name: MlpParams.initialize(in_dim, layers, stream, sigma=sigma, mu=mu)
            for stream, (name, (in_dim, layers)) in zip(streams, specs.items())
        }
        return cls(dim, class_counts, networks)

    @classmethod
    def zeros(cls, dim: int = 32, class_counts: Sequence[int] = (3, 3, 2, 2),
              width_scale: float = 1.0) -> 'FdenModel':
        specs = network_specs(dim, class_counts, width_scale=width_scale)
        return cls(dim, class_counts, {name: MlpParams.zeros(in_dim, layers)
                                       for name, (in_dim, layers) in specs.items()})

    def group(self, key: str) -> List[str]:
        """參數群組 theta / phi / xi / psi 的子網路名稱"""
        prefix = GROUP_PREFIXES[key]
        return [name for name in self.networks if name.startswith(prefix)]

    def flat_params(self, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        """'{網路}/{陣列}' → 可訓練陣列（與模型共用記憶體）"""
        names = self.networks if names is None else names
        return {f'{net}/{arr}': self.networks[net].arrays[arr]
                for net in names for arr in self.networks[net].trainable_names()}

    def copy(self) -> 'FdenModel':
        return FdenModel(self.dim, self.class_counts,
                         {name: params.copy() for name, params in self.networks.items()})

    def digest(self) -> str:
        return params_checksum(self.networks)

    def to_entries(self) -> Dict[str, np.ndarray]:
        entries = {
            'meta.kind': np.array([KIND_FDEN], dtype=np.float64),
            'meta.dim': np.array([self.dim], dtype=np.float64),
            'meta.class_counts': np.array(self.class_counts, dtype=np.float64),
        }
        for name, params in self.networks.items():
            entries.update(params_to_entries(name, params))
        return entries

    @classmethod
    def from_entries(cls, entries: Dict[str, np.ndarray]) -> 'FdenModel':
        try:
            dim = int(round(float(entries['meta.dim'][0])))
            class_counts = [int(round(float(c))) for c in entries['meta.class_counts']]
        except KeyError as e:
            raise CheckpointError(f"FDEN 檢查點缺少 meta 條目: {e}")
        names = network_specs(dim, class_counts).keys()
        networks = {name: params_from_entries(entries, name) for name in names}
        try:
            return cls(dim, class_counts, networks)
        except (ShapeMismatchError, ValueError) as e:
            raise CheckpointError(f"宣告的 Dim={dim} 與子網路形狀不符: {e}")


# ========== 因子集合 ==========

class FactorSet:
    """有序因子 f_0..f_N，每個 [batch, Dim]"""

    def __init__(self, factors: Sequence[np.ndarray]):
        factors = [np.asarray(f, dtype=np.float64) for f in factors]
        if not factors:
            raise ValueError("FactorSet 不可為空")
        shapes = {f.shape for f in factors}
        if len(shapes) != 1 or factors[0].ndim != 2:
            raise ShapeMismatchError(f"因子形狀不一致: {sorted(shapes)}")
        self.factors = factors

    def __len__(self) -> int:
        return len(self.factors)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.factors[i]

    @property
    def batch(self) -> int:
        return self.factors[0].shape[0]

    @property
    def dim(self) -> int:
        return self.factors[0].shape[1]

    def concat(self) -> np.ndarray:
        return np.concatenate(self.factors, axis=1)

    def rows(self, index) -> 'FactorSet':
        return FactorSet([f[index] for f in self.factors])

    def replace(self, i: int, value: np.ndarray) -> 'FactorSet':
        factors = list(self.factors)
        factors[i] = np.broadcast_to(np.asarray(value, dtype=np.float64), factors[i].shape).copy()
        return FactorSet(factors)


# ========== 前向傳播 ==========

def _run(model: FdenModel, name: str, x: Var, mode: str, rng, slope: float,
         bn_momentum: float = BN_MOMENTUM, trainable: bool = True) -> Var:
    out, _ = mlp_forward(model.networks[name], x, mode, rng=rng, slope=slope,
                         trainable=trainable, bn_momentum=bn_momentum)
    return out


def decompose_var(model: FdenModel, z: Var, mode: str = 'eval', rng=None,
                  slope: float = LEAKY_SLOPE, bn_momentum: float = BN_MOMENTUM,
                  trainable: bool = True) -> List[Var]:
    z_dec = _run(model, 'decomposer.global', z, mode, rng, slope, bn_momentum, trainable)
    return [_run(model, f'decomposer.local{i}', z_dec, mode, rng, slope, bn_momentum, trainable)
            for i in range(model.n_factors + 1)]


def entangle_var(model: FdenModel, factors: Sequence[Var], mode: str = 'eval', rng=None,
                 slope: float = LEAKY_SLOPE, bn_momentum: float = BN_MOMENTUM,
                 trainable: bool = True) -> Var:
    if len(factors) != model.n_factors + 1:
        raise ValueError(f"需要 {model.n_factors + 1} 個因子，收到 {len(factors)}")
    streams = [_run(model, f'entangler.stream{i}', f, mode, rng, slope, bn_momentum, trainable)
               for i, f in enumerate(factors)]
    return _run(model, 'entangler.global', concat(streams), mode, rng, slope, bn_momentum, trainable)


def _check_latent(model: FdenModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ShapeMismatchError(f"z 形狀 {z.shape} 應為 [batch, {model.dim}]")
    return z


def decompose(model: FdenModel, z: np.ndarray, mode: str = 'eval', seed=None,
              slope: float = LEAKY_SLOPE) -> FactorSet:
    """
    z [batch, Dim] → FactorSet（N+1 個 [batch, Dim]）

    參數:
        mode: 'eval'（純函數）或 'train'（dropout 用 seed 產生亂數，並更新 BN 統計量）
    """
    z = _check_latent(model, z)
    rng = np.random.default_rng(seed) if mode == 'train' else None
    tape = Tape()
    factors = decompose_var(model, tape.constant(z), mode, rng, slope, trainable=False)
    return FactorSet([f.value for f in factors])


def entangle(model: FdenModel, fs: FactorSet, mode: str = 'eval', seed=None,
             slope: float = LEAKY_SLOPE) -> np.ndarray:
    """FactorSet → z̃ = E_enc(E_0(f_0) ⊕ … ⊕ E_N(f_N))"""
    if fs.dim != model.dim:
        raise ShapeMismatchError(f"因子寬度 {fs.dim} 與模型 Dim={model.dim} 不符")
    rng = np.random.default_rng(seed) if mode == 'train' else None
    tape = Tape()
    z_tilde = entangle_var(model, [tape.constant(f) for f in fs.factors], mode, rng, slope,
                           trainable=False)
    return z_tilde.value


# ========== Total correlation 批次 ==========

def shuffle_plan(n_factors: int, batch: int, mode: str, rng: np.random.Generator) -> List[Dict[int, np.ndarray]]:
    """
    邊際批次的列排列

    one_vs_all: N 個批次，第 k 個只打亂因子 k（k = 1..N）
    full_shuffle: 1 個批次，因子 1..N 各自獨立打亂
    f_0 永遠保持原順序。
    """
    if batch < 2:
        raise ValueError(f"打亂需要 batch >= 2: {batch}")
    if mode == 'one_vs_all':
        return [{k: rng.permutation(batch)} for k in range(1, n_factors + 1)]
    if mode == 'full_shuffle':
        return [{k: rng.permutation(batch) for k in range(1, n_factors + 1)}]
    raise ValueError(f"未知的 marginal mode: {mode}")


def shuffle_rows(rows: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(len(rows))):
        raise ValueError(f"不是 0..{len(rows) - 1} 的排列: {perm.tolist()}")
    return np.asarray(rows)[perm]


def tc_batches(fs: FactorSet, mode: str = 'one_vs_all', seed=None) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    建立 joint 批次與邊際批次

    返回:
        (joint [batch, (N+1)·Dim], 邊際批次列表)
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    plan = shuffle_plan(len(fs) - 1, fs.batch, mode, rng)
    joint = fs.concat()
    marginals = [np.concatenate([shuffle_rows(f, perms[k]) if k in perms else f
                                 for k, f in enumerate(fs.factors)], axis=1)
                 for perms in plan]
    return joint, marginals


def _tc_batches_var(factors: Sequence[Var], plan: List[Dict[int, np.ndarray]]) -> Tuple[Var, List[Var]]:
    joint = concat(factors)
    marginals = [concat([take_rows(f, perms[k]) if k in perms else f for k, f in enumerate(factors)])
                 for perms in plan]
    return joint, marginals


# ========== 損失函數 ==========

def loss_lm(statnet: Union[MlpParams, Callable[[np.ndarray], np.ndarray]],
            joint: np.ndarray, marginals: Sequence[np.ndarray]) -> float:
    """
    DV total correlation 估計

    L_M = mean(F(joint)) − log(mean over all marginal rows of exp(F(marginal)))
    """
    critic = (lambda b: mlp_predict(statnet, b)) if isinstance(statnet, MlpParams) else statnet
    if not marginals:
        raise ValueError("至少需要一個邊際批次")
    t_joint = np.ravel(critic(np.asarray(joint)))
    t_marg = np.concatenate([np.ravel(critic(np.asarray(m))) for m in marginals])
    peak = t_marg.max()
    return float(t_joint.mean() - (peak + np.log(np.mean(np.exp(t_marg - peak)))))


def loss_lr(z: np.ndarray, z_tilde: np.ndarray, x: Optional[np.ndarray] = None,
            x_tilde: Optional[np.ndarray] = None, lam: float = 0.5) -> float:
    """批次平均 ‖z−z̃‖² + λ·批次平均 ‖x−x̃‖²；缺少 x 時 λ 視為 0"""
    z, z_tilde = np.asarray(z, dtype=np.float64), np.asarray(z_tilde, dtype=np.float64)
    if z.shape != z_tilde.shape:
        raise ShapeMismatchError(f"z {z.shape} vs z̃ {z_tilde.shape}")
    value = float(np.sum((z - z_tilde) ** 2) / z.shape[0])
    if x is None or x_tilde is None or lam == 0:
        return value
    x, x_tilde = np.asarray(x, dtype=np.float64), np.asarray(x_tilde, dtype=np.float64)
    if x.shape != x_tilde.shape:
        raise ShapeMismatchError(f"x {x.shape} vs x̃ {x_tilde.shape}")
    return value + lam * float(np.sum((x - x_tilde) ** 2) / x.shape[0])


def loss_lc(logits: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    """各 alignment head 的 softmax 交叉熵平均"""
    if len(logits) != len(labels) or not logits:
        raise ValueError(f"logits ({len(logits)}) 與標籤 ({len(labels)}) 數量不符")
    total = 0.0
    for out, y in zip(logits, labels):
        out, y = np.atleast_2d(np.asarray(out, dtype=np.float64)), np.asarray(y, dtype=np.int64)
        if y.min() < 0 or y.max() >= out.shape[1]:
            raise ValueError(f"標籤超出範圍 [0, {out.shape[1]})")
        total += float(-log_softmax(out, axis=1)[np.arange(len(y)), y].mean())
    return total / len(logits)


def _loss_lr_var(z: Var, z_tilde: Var, x: Optional[Var], x_tilde: Optional[Var], lam: float) -> Var:
    loss = mean_squared_norm(sub(z_tilde, z))
    if x is not None and x_tilde is not None and lam > 0:
        loss = add(loss, scale(mean_squared_norm(sub(x_tilde, x)), lam))
    return loss


def _loss_lc_var(logits: Sequence[Var], labels: Sequence[np.ndarray]) -> Var:
    terms = [softmax_cross_entropy(out, y) for out, y in zip(logits, labels)]
    loss = terms[0]
    for term in terms[1:]:
        loss = add(loss, term)
    return scale(loss, 1.0 / len(terms))


def _loss_lm_var(model: FdenModel, joint: Var, marginals: Sequence[Var], grl: bool,
                 mode: str, rng, slope: float, bn_momentum: float) -> Var:
    """GRL 位於輸入與 F_ξ 第一層之間"""
    def critic(batch: Var) -> Var:
        return _run(model, 'statnet', grad_reverse(batch) if grl else batch, mode, rng, slope, bn_momentum)

    t_joint = critic(joint)
    t_marg = concat([critic(m) for m in marginals], axis=0)
    return sub(mean(t_joint), log_mean_exp(t_marg))


# ========== 訓練 ==========

@dataclass
class TrainConfig:
    """FDEN 訓練設定（預設值取自超參數表）"""
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    lam: float = 0.5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 16
    steps: int = 30000
    seed: int = 7
    grl: bool = True
    factorizer: bool = True
    marginal_mode: str = 'one_vs_all'
    clip: bool = True
    phase_switch_step: int = 20000
    leaky_slope: float = LEAKY_SLOPE
    bn_momentum: float = BN_MOMENTUM
    log_every: int = 500

    def __post_init__(self):
        for name in ('alpha', 'beta', 'gamma', 'lam'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} 必須 >= 0: {getattr(self, name)}")
        if self.batch < 2:
            raise ValueError(f"batch 必須 >= 2: {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps 必須 >= 0: {self.steps}")
        if self.marginal_mode not in MARGINAL_MODES:
            raise ValueError(f"marginal_mode 必須是 {MARGINAL_MODES}: {self.marginal_mode}")


def train_streams(seed) -> Dict[str, np.random.SeedSequence]:
    """模型初始化與訓練各自獨立的亂數流"""
    init, data, drop, shuffle = seed_sequence(seed).spawn(4)
    return {'init': init, 'data': data, 'dropout': drop, 'shuffle': shuffle}


@dataclass
class TrainState:
    adam: AdamState
    rng_data: np.random.Generator
    rng_dropout: np.random.Generator
    rng_shuffle: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig) -> 'TrainState':
        streams = train_streams(config.seed)
        return cls(AdamState(config.lr, config.beta1, config.beta2),
                   np.random.default_rng(streams['data']),
                   np.random.default_rng(streams['dropout']),
                   np.random.default_rng(streams['shuffle']))


@dataclass
class Batch:
    """訓練批次：z、監督標籤（依因子 1..N 排列）、可選的影像 x"""
    z: np.ndarray
    labels: List[np.ndarray]
    x: Optional[np.ndarray] = None


def lm_weight(config: TrainConfig, step: int) -> float:
    """
    L_M 在總損失中的係數

    有 GRL 時固定 −γ；無 GRL 時前 phase_switch_step 步為 −γ，之後為 +γ。
    """
    if config.grl or step < config.phase_switch_step:
        return -config.gamma
    return config.gamma


def _collect(grads, model: FdenModel, names: Sequence[str]) -> Dict[str, np.ndarray]:
    flat = {}
    for net in names:
        for arr, g in grads.for_params(model.networks[net]).items():
            flat[f'{net}/{arr}'] = g
    return flat


def step_gradients(model: FdenModel, host: Optional[HostModel], batch: Batch, config: TrainConfig,
                   state: TrainState) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """
    計算一步的套用梯度（不更新參數）

    L_R、L_C 各做一次反向傳播；套用梯度為 α∂L_R + β∂L_C，
    裁剪上界 g_u 取未加權的 ∂(L_R + L_C)/∂θ。
    最後一次反向傳播：L_M，種子為 lm_weight → g_m（θ 與 ξ）
    θ 的套用梯度 = α∂L_R + β∂L_C + clip(g_u, g_m)；ξ 的梯度不裁剪。

    返回:
        (名稱 → 梯度, 指標字典)
    """
    if host is not None and not host.frozen:
        raise FrozenModelError("宿主必須先凍結")
    kw = dict(mode='train', rng=state.rng_dropout, slope=config.leaky_slope,
              bn_momentum=config.bn_momentum)
    theta, phi = model.group('theta'), model.group('phi')
    used_heads = config.factorizer and config.beta > 0
    used_statnet = config.factorizer and config.gamma > 0

    tape = Tape()
    z = tape.constant(batch.z)
    factors = decompose_var(model, z, **kw)
    z_tilde = entangle_var(model, factors, **kw)
    lam = config.lam if host is not None and batch.x is not None else 0.0
    x_const = tape.constant(batch.x) if lam > 0 else None
    x_tilde = decode_var(host, z_tilde) if lam > 0 else None
    loss_r = _loss_lr_var(z, z_tilde, x_const, x_tilde, lam)

    loss_c = None
    if used_heads:
        logits = [_run(model, f'head{i}', factors[i], **kw) for i in range(1, model.n_factors + 1)]
        loss_c = _loss_lc_var(logits, batch.labels)

    loss_m = None
    if used_statnet:
        plan = shuffle_plan(model.n_factors, batch.z.shape[0], config.marginal_mode, state.rng_shuffle)
        joint, marginals = _tc_batches_var(factors, plan)
        loss_m = _loss_lm_var(model, joint, marginals, config.grl, **kw)

    weight = lm_weight(config, state.step)
    names = theta + phi + (model.group('psi') if used_heads else [])
    grad_r = _collect(backward(tape, loss_r, retain=used_heads or used_statnet), model, names)
    applied = {k: config.alpha * g for k, g in grad_r.items()}
    g_u = {k: g for k, g in grad_r.items() if k.split('/')[0] in theta}
    if used_heads:
        grad_c = _collect(backward(tape, loss_c, retain=used_statnet), model, names)
        applied = {k: g + config.beta * grad_c[k] for k, g in applied.items()}
        g_u = {k: g + grad_c[k] for k, g in g_u.items()}
    norm_u = global_norm(g_u)
    norm_m = 0.0
    if used_statnet:
        grads_m = backward(tape, loss_m, loss_grad=weight)
        g_m = _collect(grads_m, model, theta)
        norm_m = global_norm(g_m)
        g_a = clip_adaptive(g_u, g_m) if config.clip else g_m
        for k, g in g_a.items():
            applied[k] = applied[k] + g
        applied.update(_collect(grads_m, model, ['statnet']))

    value_m = float(loss_m.value) if loss_m is not None else 0.0
    value_c = float(loss_c.value) if loss_c is not None else 0.0
    metrics = {
        'step': state.step + 1,
        'loss_total': config.alpha * float(loss_r.value) + config.beta * value_c + weight * value_m,
        'loss_r': float(loss_r.value),
        'loss_c': value_c,
        'loss_m': value_m,
        'grad_norm_u': norm_u,
        'grad_norm_m': norm_m,
        'phase': 1 if weight < 0 else 2,
        'clipped': bool(config.clip and norm_m > norm_u),
    }
    return applied, metrics


def train_step(model: FdenModel, host: Optional[HostModel], batch: Batch, config: TrainConfig,
               state: TrainState) -> Dict[str, float]:
    """
    單步訓練：L = αL_R + βL_C − γL_M（GRL 實現符號翻轉），自適應裁剪後以 Adam 更新

    宿主參數只以常數參與計算，不會被修改。
    """
    grads, metrics = step_gradients(model, host, batch, config, state)
    adam_step(model.flat_params(), grads, state.adam)
    state.step += 1
    return metrics


def resolve_attributes(labels: Mapping[str, np.ndarray], n_factors: int) -> List[str]:
    """因子 1..N 對應的屬性名稱（形狀資料集依固定順序，其他依名稱排序）"""
    if n_factors == len(ATTRIBUTES) and all(a in labels for a in ATTRIBUTES):
        return list(ATTRIBUTES)
    names = sorted(labels)
    if len(names) < n_factors:
        raise ValueError(f"需要 {n_factors} 個屬性標籤，只有 {names}")
    return names[:n_factors]


def smooth_curve(values: Sequence[float], window: int = 500) -> np.ndarray:
    """移動平均（前段不足 window 時以現有點平均）"""
    return pd.Series(values, dtype=float).rolling(window, min_periods=1).mean().to_numpy()


class FdenTrainer:
    """
    FDEN 訓練引擎

    以固定 seed 產生批次順序、dropout 與打亂，逐步記錄損失曲線。
    """

    def __init__(self, model: FdenModel, host: Optional[HostModel], latents: LatentDataset,
                 config: Optional[TrainConfig] = None, attributes: Optional[Sequence[str]] = None,
                 verbose: bool = True):
        self.model = model
        self.host = host
        self.latents = latents
        self.config = config or TrainConfig()
        self.attributes = list(attributes or resolve_attributes(latents.labels, model.n_factors))
        self.verbose = verbose
        if latents.dim != model.dim:
            raise ShapeMismatchError(f"潛在寬度 {latents.dim} 與模型 Dim={model.dim} 不符")
        if len(self.attributes) != model.n_factors:
            raise ValueError(f"屬性數 {len(self.attributes)} 與監督因子數 {model.n_factors} 不符")
        self.labels = [latents.labels[a] for a in self.attributes]
        for name, values, classes in zip(self.attributes, self.labels, model.class_counts):
            if values.min() < 0 or values.max() >= classes:
                raise ValueError(f"屬性 {name} 的標籤超出 [0, {classes})")
        if len(latents) < self.config.batch:
            raise ValueError(f"樣本數 {len(latents)} 少於 batch {self.config.batch}")
        self.state = TrainState.create(self.config)
        self.history: List[Dict[str, float]] = []

    def sample_batch(self) -> Batch:
        idx = self.state.rng_data.choice(len(self.latents), size=self.config.batch, replace=False)
        x = self.latents.x[idx] if self.latents.x is not None else None
        return Batch(self.latents.z[idx], [values[idx] for values in self.labels], x)

    def run(self, steps: Optional[int] = None) -> pd.DataFrame:
        """執行訓練，回傳損失曲線"""
        steps = self.config.steps if steps is None else steps
        host_checksum = self.host.verify_frozen() if self.host is not None else ''

        if self.verbose:
            print(f"\n{'='*80}")
            print(f"FDEN 訓練 - N={self.model.n_factors}, Dim={self.model.dim}, steps={steps}")
            print(f"{'='*80}")
            print(f"GRL: {'on' if self.config.grl else 'off'}  Factorizer: "
                  f"{'on' if self.config.factorizer else 'off'}  marginal: {self.config.marginal_mode}")
            print(f"α={self.config.alpha} β={self.config.beta} γ={self.config.gamma} λ={self.config.lam}")
            print(f"{'='*80}\n")

        for _ in range(steps):
            try:
                metrics = train_step(self.model, self.host, self.sample_batch(), self.config, self.state)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"FDEN 訓練在第 {self.state.step + 1} 步發散: {e}") from e
            self.history.append(metrics)
            if self.verbose and metrics['step'] % self.config.log_every == 0:
                print(f"[{metrics['step']}/{steps}] L={metrics['loss_total']:+.4f} "
                      f"L_R={metrics['loss_r']:.4f} L_C={metrics['loss_c']:.4f} "
                      f"L_M={metrics['loss_m']:+.4f} |g_u|={metrics['grad_norm_u']:.3e} "
                      f"|g_m|={metrics['grad_norm_m']:.3e}")
            if (self.verbose and not self.config.grl
                    and metrics['step'] == self.config.phase_switch_step):
                print(f"⚠️ 第 {metrics['step']} 步切換 L_M 符號（pretrain → fine-tune）")

        if self.host is not None and self.host.verify_frozen() != host_checksum:
            raise FrozenModelError("訓練期間宿主 checksum 改變")
        if self.verbose:
            print(f"\n✅ 訓練完成，共 {self.state.step} 步")
        return self.curves()

    def curves(self) -> pd.DataFrame:
        """損失曲線；無 GRL 時附加 phase 欄位"""
        columns = CURVE_COLUMNS + ([] if self.config.grl else ['phase'])
        return pd.DataFrame(self.history, columns=columns)

    def print_training_report(self, window: int = 500):
        if not self.history:
            print("⚠️ 尚未執行訓練")
            return
        df = self.curves()
        smoothed = smooth_curve(df['loss_m'], window)
        print(f"\n{'='*80}")
        print(f"訓練報告 (Training Report)")
        print(f"{'='*80}\n")
        print(f"【最終損失】")
        last = df.iloc[-1]
        for col in CURVE_COLUMNS[1:]:
            print(f"  {col:<12}: {last[col]:+.5f}")
        print(f"\n【L_M 曲線】")
        print(f"  平滑最大值: {smoothed.max():+.5f} (第 {int(np.argmax(smoothed)) + 1} 步)")
        print(f"  平滑最終值: {smoothed[-1]:+.5f}")
        clipped = sum(1 for h in self.history if h['clipped'])
        print(f"  裁剪生效步數: {clipped}/{len(self.history)}")
        print(f"\n{'='*80}\n")

    def export_curves(self, filename: str = 'curves.csv') -> str:
        self.curves().to_csv(filename, index=False, encoding='utf-8')
        if self.verbose:
            print(f"✅ 訓練曲線已導出到: {filename}")
        return filename


def train(model: FdenModel, host: Optional[HostModel], latents: LatentDataset,
          config: Optional[TrainConfig] = None, attributes: Optional[Sequence[str]] = None,
          verbose: bool = True) -> Tuple[FdenModel, pd.DataFrame]:
    """
    訓練 FDEN

    返回:
        (訓練後的模型（就地更新）, 每步損失曲線 DataFrame)
    """
    trainer = FdenTrainer(model, host, latents, config, attributes, verbose)
    return model, trainer.run()


# ========== 因子操作 ==========

def factor_interpolate(fs_a: FactorSet, fs_b: FactorSet, alpha: float, mask: Sequence[bool]) -> FactorSet:
    """
    被選取的因子設為 α·f^A + (1−α)·f^B，其餘沿用 f^A
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha 必須在 [0,1]: {alpha}")
    if len(fs_a) != len(fs_b) or fs_a[0].shape != fs_b[0].shape:
        raise ShapeMismatchError("兩個 FactorSet 形狀不同")
    if len(mask) != len(fs_a):
        raise ValueError(f"mask 長度 {len(mask)} 應為 {len(fs_a)}")
    return FactorSet([alpha * a + (1.0 - alpha) * b if selected else a.copy()
                      for a, b, selected in zip(fs_a.factors, fs_b.factors, mask)])


def factor_transfer_mean(model: FdenModel, latents: LatentDataset, sample_index: int,
                         factor_index: int, target_value: int,
                         attribute: Optional[str] = None) -> FactorSet:
    """
    平均因子替換（風格轉換）

    樣本的因子 i 換成「屬性 i 標籤 = target_value」的所有樣本之因子 i 平均。

    參數:
        factor_index: 1..N
        attribute: 因子 i 對應的屬性名稱，預設依 resolve_attributes
    """
    if not 1 <= factor_index <= model.n_factors:
        raise ValueError(f"factor_index 必須在 1..{model.n_factors}: {factor_index}")
    if not 0 <= sample_index < len(latents.z):
        raise ValueError(f"sample_index 必須在 0..{len(latents.z) - 1}: {sample_index}")
    attribute = attribute or resolve_attributes(latents.labels, model.n_factors)[factor_index - 1]
    group = np.flatnonzero(latents.labels[attribute] == target_value)
    if group.size == 0:
        raise ValueError(f"沒有 {attribute} = {target_value} 的樣本")
    fs_all = decompose(model, latents.z)
    mean_factor = fs_all[factor_index][group].mean(axis=0)
    return fs_all.rows([sample_index]).replace(factor_index, mean_factor[None, :])


def interpolation_sweep(model: FdenModel, host: HostModel, z_a: np.ndarray, z_b: np.ndarray,
                        mask: Sequence[bool], alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)) -> np.ndarray:
    """
    依 α 網格解碼內插結果

    返回:
        [len(alphas), batch, 256] 影像
    """
    fs_a, fs_b = decompose(model, z_a), decompose(model, z_b)
    return np.stack([decode(host, entangle(model, factor_interpolate(fs_a, fs_b, a, mask)))
                     for a in alphas])


def factor_codes(model: FdenModel, z: np.ndarray, mode: str = 'concat', seed=0) -> np.ndarray:
    """
    評分用的因子編碼

    concat: f_0..f_N 串接後以 seed 隨機排列單元一次
    mean:   每個因子取單元平均，一個因子一個單元
    """
    fs = decompose(model, z)
    if mode == 'mean':
        return np.stack([f.mean(axis=1) for f in fs.factors], axis=1)
    if mode == 'concat':
        codes = fs.concat()
        return codes[:, np.random.default_rng(seed).permutation(codes.shape[1])]
    raise ValueError(f"未知的 factor code mode: {mode}")
