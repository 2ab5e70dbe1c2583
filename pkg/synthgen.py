"""
合成資料產生器 (Synthetic Data Generator)
具備完整真實生成因子的桌面規模資料集

功能：
1. 形狀影像資料集（square / cross / diamond × 3 種大小 × 10×10 位置）
2. 相關二元常態樣本（互資訊驗證用）
3. C-way K-shot episode 抽樣
4. 資料集 CSV 匯出
"""

import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

SHAPES = ('square', 'cross', 'diamond')
SCALES = (3, 5, 7)
POSITIONS = tuple(range(10))
CANVAS = 16

# 對齊頭使用的屬性（順序即監督因子 f_1..f_N 的順序）
ATTRIBUTES = ('shape', 'scale', 'pos_x_bin', 'pos_y_bin')


@dataclass(frozen=True)
class ShapeFactors:
    """單張影像的真實生成因子"""
    shape: str
    scale: int
    pos_x: int
    pos_y: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"未知的形狀: {self.shape}")
        if self.scale not in SCALES:
            raise ValueError(f"未知的大小: {self.scale}")
        for name, pos in (('pos_x', self.pos_x), ('pos_y', self.pos_y)):
            if not 0 <= pos <= 9:
                raise ValueError(f"{name} 超出範圍 0–9: {pos}")
            if pos + self.scale > CANVAS:
                raise ValueError(f"{name}={pos} 搭配大小 {self.scale} 超出畫布")


@dataclass(frozen=True)
class DatasetSpec:
    """資料集設定（預設即 900 張完整網格）"""
    shapes: Sequence[str] = SHAPES
    scales: Sequence[int] = SCALES
    positions: Sequence[int] = POSITIONS


@dataclass
class ShapeDataset:
    """
    形狀影像資料集

    images:   [n, 256] 二值影像（16×16 攤平）
    factors:  每張影像的 ShapeFactors
    grid:     [n, 4] 整數因子索引（shape, scale, pos_x, pos_y）
    labels:   屬性名稱 → 整數標籤（shape 3 類、scale 3 類、位置二元）
    """
    images: np.ndarray
    factors: List[ShapeFactors]
    grid: np.ndarray
    labels: Dict[str, np.ndarray]
    seed: int = 0
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def __len__(self) -> int:
        return len(self.factors)

    @property
    def class_ids(self) -> np.ndarray:
        """shape × scale 組合類別（9 類），few-shot episode 使用"""
        return self.grid[:, 0] * len(self.spec.scales) + self.grid[:, 1]

    def label_matrix(self) -> np.ndarray:
        """[n, 4] 屬性標籤矩陣（依 ATTRIBUTES 順序）"""
        return np.stack([self.labels[name] for name in ATTRIBUTES], axis=1)

    def split_indices(self, test_fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
        """依資料集 seed 切出訓練 / 測試索引"""
        order = np.random.default_rng(self.seed).permutation(len(self))
        cut = int(round(len(self) * (1.0 - test_fraction)))
        return np.sort(order[:cut]), np.sort(order[cut:])


def render_shape(f: ShapeFactors, canvas: int = CANVAS) -> np.ndarray:
    """
    將因子光柵化為 [16,16] 二值影像

    方框左上角為 (pos_y 列, pos_x 行)，框內相對座標 (i, j)，c = (s-1)/2：
        square : 框內全部點亮
        diamond: |i-c| + |j-c| <= c
        cross  : i == c 或 j == c
    """
    if f.pos_x + f.scale > canvas or f.pos_y + f.scale > canvas:
        raise ValueError(f"因子超出畫布: {f}")
    s = f.scale
    c = (s - 1) // 2
    i, j = np.mgrid[0:s, 0:s]
    if f.shape == 'square':
        mask = np.ones((s, s), dtype=bool)
    elif f.shape == 'diamond':
        mask = np.abs(i - c) + np.abs(j - c) <= c
    else:
        mask = (i == c) | (j == c)
    image = np.zeros((canvas, canvas))
    image[f.pos_y:f.pos_y + s, f.pos_x:f.pos_x + s] = mask
    return image


def make_dataset(spec: Optional[DatasetSpec] = None, seed: int = 0) -> ShapeDataset:
    """
    產生完整因子網格資料集（字典序：shape, scale, pos_x, pos_y）

    參數:
        spec: DatasetSpec，預設 3×3×10×10 = 900 張
        seed: 僅用於訓練/測試切分，影像本身與 seed 無關

    返回:
        ShapeDataset
    """
    spec = spec or DatasetSpec()
    factors, grid, images = [], [], []
    for a, shape in enumerate(spec.shapes):
        for b, scale in enumerate(spec.scales):
            for pos_x in spec.positions:
                for pos_y in spec.positions:
                    f = ShapeFactors(shape, scale, pos_x, pos_y)
                    factors.append(f)
                    grid.append((a, b, pos_x, pos_y))
                    images.append(render_shape(f).ravel())

    grid = np.array(grid, dtype=np.int64)
    labels = {
        'shape': grid[:, 0].copy(),
        'scale': grid[:, 1].copy(),
        'pos_x_bin': (grid[:, 2] >= 5).astype(np.int64),
        'pos_y_bin': (grid[:, 3] >= 5).astype(np.int64),
    }
    return ShapeDataset(np.array(images), factors, grid, labels, seed, spec)


def export_dataset_csv(dataset: ShapeDataset, path: str) -> pd.DataFrame:
    """匯出資料集：idx,shape,scale,pos_x,pos_y,pix_0..pix_255"""
    df = pd.DataFrame({
        'idx': np.arange(len(dataset)),
        'shape': [f.shape for f in dataset.factors],
        'scale': [f.scale for f in dataset.factors],
        'pos_x': [f.pos_x for f in dataset.factors],
        'pos_y': [f.pos_y for f in dataset.factors],
    })
    pixels = pd.DataFrame(dataset.images.astype(np.int64),
                          columns=[f'pix_{k}' for k in range(dataset.images.shape[1])])
    df = pd.concat([df, pixels], axis=1)
    df.to_csv(path, index=False, encoding='utf-8')
    return df


def sample_gaussian_pair(rho: float, n: int, seed=None) -> np.ndarray:
    """
    相關係數 rho 的二元標準常態樣本（Cholesky 建構）

    返回:
        [n, 2] 陣列
    """
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho 必須在 (-1, 1): {rho}")
    if n <= 0:
        raise ValueError(f"n 必須為正: {n}")
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    rng = np.random.default_rng(seed)
    return rng.standard_normal((int(n), 2)) @ chol.T


@dataclass
class Episode:
    """C-way K-shot episode（索引指向來源資料集）"""
    support_indices: np.ndarray
    support_classes: np.ndarray
    query_index: int
    query_class: int
    way: int
    shot: int

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.support_classes)


def make_episode(dataset, C: int, K: int, class_pool: Optional[Sequence[int]] = None,
                 seed=None) -> Episode:
    """
    抽樣一個 episode

    先不放回地均勻抽 C 個類別，每類抽 K 個支援樣本；
    query 從其中一個類別抽出，且與支援樣本不重複。

    參數:
        dataset: ShapeDataset（使用 class_ids）或整數類別陣列
        C, K: way 與 shot
        class_pool: 可抽的類別，預設為全部
        seed: 亂數種子或 Generator
    """
    labels = dataset.class_ids if isinstance(dataset, ShapeDataset) else np.asarray(dataset)
    pool = np.unique(labels) if class_pool is None else np.unique(np.asarray(class_pool))
    if C < 1 or K < 1:
        raise ValueError(f"C 與 K 必須 >= 1: C={C}, K={K}")
    if len(pool) < C:
        raise ValueError(f"類別數不足: 需要 {C}，只有 {len(pool)}")
    members = {int(c): np.flatnonzero(labels == c) for c in pool}
    short = [c for c, idx in members.items() if len(idx) < K + 1]
    if short:
        raise ValueError(f"類別 {short} 的樣本數少於 K+1={K + 1}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = rng.choice(pool, size=C, replace=False)
    query_slot = int(rng.integers(C))
    support_idx, support_cls = [], []
    query_index = -1
    for slot, cls in enumerate(chosen):
        draw = rng.choice(members[int(cls)], size=K + (slot == query_slot), replace=False)
        support_idx.extend(draw[:K])
        support_cls.extend([int(cls)] * K)
        if slot == query_slot:
            query_index = int(draw[K])
    return Episode(np.array(support_idx), np.array(support_cls), query_index,
                   int(chosen[query_slot]), C, K)
