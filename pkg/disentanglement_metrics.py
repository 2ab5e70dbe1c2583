"""
解耦評估指標 (Disentanglement Metrics)
以真實生成因子為基準的評分工具

功能：
1. 互資訊：高斯解析解、離散 plug-in 估計、DV 神經估計（MINE）
2. 解耦分數：MIG、FactorVAE metric、β-VAE metric、DCI
3. RSA 相關矩陣
4. C-way K-shot 原型比對評估
5. 分數報告 CSV（metric,value,n,seed,config_digest）
"""

import numpy as np
import pandas as pd
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union
from scipy.special import logsumexp, softmax
from scipy.stats import entropy
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import mutual_info_score
from sklearn.neighbors import NearestCentroid
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from autodiff_core import (
    AdamState, LayerSpec, MlpParams, NonFiniteError, ShapeMismatchError, Tape, TrainingDivergedError,
    adam_step, backward, exp, log_mean_exp, mean, mlp_forward, mlp_predict, scale,
    seed_sequence, sub,
)
from synthgen import make_episode

SCORE_COLUMNS = ['metric', 'value', 'n', 'seed', 'config_digest']


# ========== 互資訊 ==========

def analytic_gaussian_mi(rho: float) -> float:
    """相關係數 rho 的二元常態互資訊 −½·ln(1−ρ²)（nats）"""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"|rho| 必須 < 1: {rho}")
    return float(-0.5 * np.log1p(-rho * rho))


def discrete_mi(a: Sequence[int], b: Sequence[int]) -> float:
    """經驗聯合分佈的 plug-in 互資訊（nats，0·log0 = 0）"""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.size == 0:
        raise ValueError("輸入為空")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"長度不同: {a.shape} vs {b.shape}")
    return max(0.0, float(mutual_info_score(a, b)))


def discrete_entropy(a: Sequence[int]) -> float:
    _, counts = np.unique(np.asarray(a), return_counts=True)
    return float(entropy(counts))


def discretize_codes(codes: np.ndarray, bins: int = 20) -> np.ndarray:
    """
    每個單元切成 bins 個等數量區間（重複邊界合併）

    取值數不超過 bins 的單元直接以取值編號，常數單元整欄為 0。
    """
    codes = np.asarray(codes, dtype=np.float64)
    codes = codes[:, None] if codes.ndim == 1 else codes
    out = np.zeros(codes.shape, dtype=np.int64)
    for j in range(codes.shape[1]):
        column = codes[:, j]
        values, inverse = np.unique(column, return_inverse=True)
        if len(values) <= bins:
            out[:, j] = inverse.ravel()
        else:
            out[:, j] = pd.qcut(column, bins, labels=False, duplicates='drop')
    return out


@dataclass
class MiEstimatorConfig:
    """DV 互資訊估計器設定"""
    hidden: Tuple[int, ...] = (64, 64)
    steps: int = 5000
    batch: int = 500
    lr: float = 1e-3
    seed: int = 0
    ema_decay: float = 0.0
    min_samples: int = 1000

    def __post_init__(self):
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError(f"hidden 寬度必須為正: {self.hidden}")
        if self.steps < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("steps / batch / lr 必須為正")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay 必須在 [0,1): {self.ema_decay}")


def dv_objective(critic: MlpParams, x: np.ndarray, y: np.ndarray, perm: np.ndarray) -> float:
    """DV 目標值：mean T(x,y) − log mean exp T(x, y[perm])"""
    t_joint = mlp_predict(critic, np.hstack([x, y])).ravel()
    t_marg = mlp_predict(critic, np.hstack([x, y[perm]])).ravel()
    return float(t_joint.mean() - (logsumexp(t_marg) - np.log(t_marg.size)))


def dv_mi_estimate(x: np.ndarray, y: np.ndarray, config: Optional[MiEstimatorConfig] = None,
                   verbose: bool = False) -> float:
    """
    以 Donsker-Varadhan 下界估計 I(x; y)

    critic T 以梯度上升最大化 mean T(joint) − log mean exp T(marginal)，
    邊際樣本由另一組隨機列的 y 組成。ema_decay > 0 時改用移動平均修正梯度偏差。
    回傳值為全樣本 DV 目標值在 5 組新排列上的平均。

    參數:
        x, y: [n, d_x]、[n, d_y]（一維視為單欄）
        config: MiEstimatorConfig

    返回:
        估計值（nats）
    """
    config = config or MiEstimatorConfig()
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ShapeMismatchError(f"列數不同: {x.shape[0]} vs {y.shape[0]}")
    if n < config.min_samples:
        raise ValueError(f"樣本數 {n} 少於 {config.min_samples}")

    init_seed, data_seed, eval_seed = seed_sequence(config.seed).spawn(3)
    specs = [LayerSpec(w) for w in config.hidden] + [LayerSpec(1, activation='linear')]
    critic = MlpParams.initialize(x.shape[1] + y.shape[1], specs, init_seed, scheme='he')
    state = AdamState(lr=config.lr, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng(data_seed)
    batch = min(config.batch, n)
    ema = None

    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=batch, replace=False)
        other = rng.choice(n, size=batch, replace=False)
        try:
            tape = Tape()
            t_joint, _ = mlp_forward(critic, np.hstack([x[idx], y[idx]]), 'train', tape=tape)
            t_marg, _ = mlp_forward(critic, tape.constant(np.hstack([x[idx], y[other]])), 'train')
            if config.ema_decay > 0:
                e_marg = mean(exp(t_marg))
                batch_mean = float(e_marg.value)
                ema = batch_mean if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * batch_mean
                objective = sub(mean(t_joint), scale(e_marg, 1.0 / ema))
            else:
                objective = sub(mean(t_joint), log_mean_exp(t_marg))
            grads = backward(tape, objective, loss_grad=-1.0)
        except NonFiniteError as e:
            raise TrainingDivergedError(f"DV 估計在第 {step} 步發散: {e}") from e
        adam_step(critic.arrays, grads.for_params(critic), state)
        if verbose and step % max(1, config.steps // 10) == 0:
            print(f"[{step}/{config.steps}] DV 目標: {dv_objective(critic, x[idx], y[idx], rng.permutation(batch)):+.4f}")

    eval_rng = np.random.default_rng(eval_seed)
    estimate = float(np.mean([dv_objective(critic, x, y, eval_rng.permutation(n)) for _ in range(5)]))
    if not np.isfinite(estimate):
        raise TrainingDivergedError("DV 估計值非有限")
    return estimate


# ========== 解耦分數 ==========

@dataclass
class CodeFactorMatrix:
    """評分資料：codes [n, d_code] 與整數真實因子 [n, d_factor]"""
    codes: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim == 1:
            self.codes = self.codes[:, None]
        self.factors = np.asarray(self.factors).astype(np.int64)
        if self.factors.ndim == 1:
            self.factors = self.factors[:, None]
        if self.codes.shape[0] != self.factors.shape[0]:
            raise ShapeMismatchError(f"列數不同: codes {self.codes.shape} vs factors {self.factors.shape}")
        for k in range(self.factors.shape[1]):
            if len(np.unique(self.factors[:, k])) < 2:
                raise ValueError(f"因子欄 {k} 只有一個取值")

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def d_code(self) -> int:
        return self.codes.shape[1]

    @property
    def d_factor(self) -> int:
        return self.factors.shape[1]

    def mi_matrix(self, bins: int = 20) -> np.ndarray:
        """[d_code, d_factor] 離散化單元與因子的互資訊"""
        binned = discretize_codes(self.codes, bins)
        return np.array([[discrete_mi(binned[:, j], self.factors[:, k]) for k in range(self.d_factor)]
                         for j in range(self.d_code)])


@dataclass
class ScoreConfig:
    """評分預算（訓練 / 評估投票數與批次大小）"""
    eval_train: int = 10000
    eval_test: int = 5000
    eval_batch: int = 64
    seed: int = 0
    bins: int = 20


def mig(cf: CodeFactorMatrix, bins: int = 20) -> float:
    """
    Mutual Information Gap

    對每個因子 k：(最大 MI − 次大 MI) / H(v_k)，再對 k 平均。
    """
    m = cf.mi_matrix(bins)
    ent = np.array([discrete_entropy(cf.factors[:, k]) for k in range(cf.d_factor)])
    top = np.sort(m, axis=0)[::-1]
    second = top[1] if cf.d_code > 1 else np.zeros(cf.d_factor)
    return float(np.clip(np.mean((top[0] - second) / ent), 0.0, 1.0))


def _factor_groups(cf: CodeFactorMatrix) -> Dict[Tuple[int, int], np.ndarray]:
    return {(k, int(v)): np.flatnonzero(cf.factors[:, k] == v)
            for k in range(cf.d_factor) for v in np.unique(cf.factors[:, k])}


def _fixed_factor_rows(cf, groups, k, batch, rng) -> np.ndarray:
    value = int(cf.factors[rng.integers(cf.n), k])
    members = groups[(k, value)]
    return rng.choice(members, size=batch, replace=len(members) < batch)


def _partner_index(cf: CodeFactorMatrix) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """每個因子：依取值排序的列索引、每列所屬群組的起點與大小（向量化抽樣對）"""
    index = []
    for k in range(cf.d_factor):
        values = cf.factors[:, k]
        order = np.argsort(values, kind='stable')
        uniq, first, counts = np.unique(values[order], return_index=True, return_counts=True)
        slot = np.searchsorted(uniq, values)
        index.append((order, first[slot], counts[slot]))
    return index


def factor_vae_metric(cf: CodeFactorMatrix, config: Optional[ScoreConfig] = None,
                      factors: Optional[Sequence[int]] = None, verbose: bool = False) -> float:
    """
    FactorVAE metric

    每次投票固定一個因子抽一批樣本，取標準化變異數最小的單元；
    多數決分類器（單元 → 因子）在評估投票上的準確率即為分數。
    變異數為 0 的單元不參與投票。
    """
    config = config or ScoreConfig()
    rng = np.random.default_rng(config.seed)
    factors = list(range(cf.d_factor)) if factors is None else list(factors)
    global_std = cf.codes.std(axis=0)
    active = global_std > 0
    if not active.all():
        print(f"⚠️ {int((~active).sum())} 個單元變異數為 0，已排除")
    if not active.any():
        return 0.0
    codes = cf.codes[:, active] / global_std[active]
    groups = _factor_groups(cf)

    def votes(count: int) -> np.ndarray:
        table = np.zeros((cf.d_factor, codes.shape[1]))
        for _ in range(count):
            k = factors[rng.integers(len(factors))]
            rows = _fixed_factor_rows(cf, groups, k, config.eval_batch, rng)
            table[k, int(np.argmin(codes[rows].var(axis=0)))] += 1
        return table

    train_votes = votes(config.eval_train)
    eval_votes = votes(config.eval_test)
    classifier = np.argmax(train_votes, axis=0)
    units = np.arange(codes.shape[1])
    score = float(eval_votes[classifier, units].sum() / eval_votes.sum())
    if verbose:
        print(f"✅ FactorVAE metric: {score:.4f}（有效單元 {codes.shape[1]}）")
    return score


def beta_vae_metric(cf: CodeFactorMatrix, config: Optional[ScoreConfig] = None,
                    factors: Optional[Sequence[int]] = None, verbose: bool = False) -> float:
    """
    β-VAE metric

    特徵為「共享一個固定因子」的樣本對之平均絕對編碼差，
    以線性分類器（標準化 + LogisticRegression）預測被固定的因子。
    """
    config = config or ScoreConfig()
    rng = np.random.default_rng(config.seed)
    factors = list(range(cf.d_factor)) if factors is None else list(factors)
    if len(set(factors)) < 2:
        raise ValueError(f"β-VAE metric 需要至少 2 個因子: {factors}")
    partners = _partner_index(cf)

    def sample(count: int) -> Tuple[np.ndarray, np.ndarray]:
        features, labels = [], []
        for _ in range(count):
            k = factors[rng.integers(len(factors))]
            first = rng.integers(cf.n, size=config.eval_batch)
            order, start, size = partners[k]
            second = order[start[first] + (rng.random(config.eval_batch) * size[first]).astype(np.int64)]
            features.append(np.abs(cf.codes[first] - cf.codes[second]).mean(axis=0))
            labels.append(k)
        return np.array(features), np.array(labels)

    x_train, y_train = sample(config.eval_train)
    x_eval, y_eval = sample(config.eval_test)
    if len(np.unique(y_train)) < 2:
        raise ValueError(f"eval_train={config.eval_train} 只抽到一個因子，無法訓練分類器")
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=config.seed))
    model.fit(x_train, y_train)
    score = float(model.score(x_eval, y_eval))
    if verbose:
        print(f"✅ β-VAE metric: {score:.4f}")
    return score


def dci_from_importance(importance: np.ndarray) -> Tuple[float, float]:
    """
    由重要度矩陣 R [d_code, d_factor] 計算 (D, C)

    D = Σ_j ρ_j (1 − H_norm(R_j·))，ρ_j 為單元 j 的重要度占比
    C = mean_k (1 − H_norm(R_·k))
    """
    r = np.asarray(importance, dtype=np.float64)
    if r.ndim != 2 or r.sum() <= 0:
        raise ValueError("重要度矩陣全為 0")
    d_code, d_factor = r.shape

    def one_minus_entropy(p: np.ndarray, base: int) -> float:
        return 1.0 if base < 2 else 1.0 - entropy(p, base=base)

    row_sums = r.sum(axis=1)
    weights = row_sums / row_sums.sum()
    disentanglement = sum(weights[j] * one_minus_entropy(r[j], d_factor)
                          for j in range(d_code) if row_sums[j] > 0)
    col_sums = r.sum(axis=0)
    completeness = np.mean([one_minus_entropy(r[:, k], d_code) if col_sums[k] > 0 else 0.0
                            for k in range(d_factor)])
    return float(np.clip(disentanglement, 0, 1)), float(np.clip(completeness, 0, 1))


def dci(cf: CodeFactorMatrix, bins: int = 20) -> Tuple[float, float, float]:
    """
    DCI：Disentanglement、Completeness、Informativeness

    重要度 R_jk = I(z_j; v_k) / Σ_j' I(z_j'; v_k)；
    Informativeness 為最近質心分類器（全部樣本擬合與評估）預測各因子的平均準確率。
    """
    m = cf.mi_matrix(bins)
    col = m.sum(axis=0)
    if not np.any(col > 0):
        raise ValueError("重要度矩陣全為 0")
    importance = np.divide(m, col, out=np.zeros_like(m), where=col > 0)
    d, c = dci_from_importance(importance)
    accuracies = []
    for k in range(cf.d_factor):
        clf = NearestCentroid().fit(cf.codes, cf.factors[:, k])
        accuracies.append(clf.score(cf.codes, cf.factors[:, k]))
    return d, c, float(np.mean(accuracies))


# ========== RSA ==========

def rsa_labels(dim: int, n_factors: int, factor_dim: Optional[int] = None) -> List[str]:
    """z_0.., f0_0.., f1_0.. 單元標籤"""
    factor_dim = dim if factor_dim is None else factor_dim
    labels = [f'z_{j}' for j in range(dim)]
    for i in range(n_factors + 1):
        labels += [f'f{i}_{j}' for j in range(factor_dim)]
    return labels


def rsa_matrix(columns: Union[np.ndarray, Sequence[np.ndarray]],
               labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    單元兩兩 Pearson 相關矩陣

    參數:
        columns: [n, units] 矩陣或單元向量列表
        labels: 單元名稱

    返回:
        對稱、對角為 1 的 DataFrame
    """
    data = np.column_stack(columns) if not isinstance(columns, np.ndarray) else np.asarray(columns, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"每個單元至少需要 2 個樣本: {data.shape}")
    flat = np.flatnonzero(data.std(axis=0) == 0)
    if flat.size:
        raise ValueError(f"單元 {flat.tolist()} 變異數為 0")
    labels = list(labels) if labels is not None else [f'u_{j}' for j in range(data.shape[1])]
    r = np.corrcoef(data, rowvar=False)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return pd.DataFrame(r, index=labels, columns=labels)


# ========== Few-shot 評估 ==========

def prototype_probabilities(query: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """P(y | x, S) = softmax(−‖x − c_y‖²)"""
    dist = np.sum((prototypes - query[None, :]) ** 2, axis=1)
    return softmax(-dist)


def episodic_accuracy(features: np.ndarray, labels: np.ndarray, C: int = 3, K: int = 1,
                      episodes: int = 1000, class_pool: Optional[Sequence[int]] = None,
                      seed=0) -> float:
    """
    原型比對的 episode 平均準確率

    每個 episode 以支援樣本的類別平均為原型，query 判給機率最高的類別。
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(f"特徵 {features.shape} 與標籤 {labels.shape} 列數不同")
    rng = np.random.default_rng(seed)
    correct = 0
    for _ in range(episodes):
        ep = make_episode(labels, C, K, class_pool, rng)
        classes = ep.classes
        prototypes = np.stack([features[ep.support_indices[ep.support_classes == c]].mean(axis=0)
                               for c in classes])
        probs = prototype_probabilities(features[ep.query_index], prototypes)
        correct += int(classes[int(np.argmax(probs))] == ep.query_class)
    return correct / episodes if episodes else 0.0


def episodic_eval(fden, host, dataset, C: int = 3, K: int = 1, episodes: int = 1000,
                  factor_index: int = 1, seed=0, class_pool: Optional[Sequence[int]] = None) -> float:
    """
    以 FDEN 因子 i 做 C-way K-shot 原型比對

    參數:
        fden: FdenModel
        host: 凍結的 HostModel
        dataset: ShapeDataset（類別為 shape×scale）
        factor_index: 使用的因子（0..N）
        class_pool: 評估用類別（通常是訓練時保留的類別）
    """
    from fden_model import decompose
    from host_model import encode

    fs = decompose(fden, encode(host, dataset.images))
    if not 0 <= factor_index < len(fs):
        raise ValueError(f"factor_index 必須在 0..{len(fs) - 1}: {factor_index}")
    return episodic_accuracy(fs[factor_index], dataset.class_ids, C, K, episodes, class_pool, seed)


# ========== 報告 ==========

def score_row(metric: str, value: float, n: int, seed: int, config_digest: str) -> Dict:
    return {'metric': metric, 'value': float(value), 'n': int(n), 'seed': int(seed),
            'config_digest': config_digest}


def write_score_report(rows: Sequence[Dict], filename: str) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=SCORE_COLUMNS)
    df.to_csv(filename, index=False, encoding='utf-8')
    return df
