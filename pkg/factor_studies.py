"""
因子研究 (Factor Studies)
訓練完成的 FDEN 在下游任務上的檢驗

功能：
1. Alignment head 分類準確率
2. 經由凍結解碼器的重建誤差比
3. 因子交換（最近真實影像的屬性變化 / 保持）
4. 因子兩兩互資訊與對齊互資訊
"""

import numpy as np
import pandas as pd
from typing import Dict, Optional, Sequence

from autodiff_core import mlp_predict
from disentanglement_metrics import discrete_mi, discretize_codes
from fden_model import FdenModel, decompose, entangle, resolve_attributes
from host_model import HostModel, LatentDataset, decode, encode, reconstruction_error


def alignment_accuracy(model: FdenModel, latents: LatentDataset,
                       attributes: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """每個 head 在 latents 上的分類準確率（屬性名稱 → 準確率）"""
    attributes = list(attributes or resolve_attributes(latents.labels, model.n_factors))
    fs = decompose(model, latents.z)
    result = {}
    for i, name in enumerate(attributes, start=1):
        logits = mlp_predict(model.networks[f'head{i}'], fs[i])
        result[name] = float(np.mean(np.argmax(logits, axis=1) == latents.labels[name]))
    return result


def reconstruction_ratio(model: FdenModel, host: HostModel, images: np.ndarray) -> Dict[str, float]:
    """
    FDEN 重建 z̃ 經凍結解碼器的像素誤差，相對宿主自身誤差的比值
    """
    images = np.asarray(images, dtype=np.float64)
    z = encode(host, images)
    z_tilde = entangle(model, decompose(model, z))
    host_error = reconstruction_error(host, images, z)
    fden_error = reconstruction_error(host, images, z_tilde)
    return {
        'host_error': host_error,
        'fden_error': fden_error,
        'ratio': fden_error / host_error if host_error > 0 else float('inf'),
    }


def nearest_ground_truth(images: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """每張影像最接近的參考影像索引（平方距離）"""
    d2 = (np.sum(images ** 2, axis=1)[:, None] - 2.0 * images @ reference.T
          + np.sum(reference ** 2, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def factor_swap_study(model: FdenModel, host: HostModel, dataset, factor_index: int = 1,
                      pairs: int = 200, seed=0, attributes: Optional[Sequence[str]] = None,
                      verbose: bool = False) -> Dict:
    """
    因子交換研究

    隨機抽取被交換屬性不同的樣本對 (A, B)，把 A 的因子 i 換成 B 的，
    解碼後找最近的真實影像，統計：
        changed_rate  : 被交換屬性與 A 不同
        matched_rate  : 被交換屬性等於 B
        preserved_rate: 其餘屬性全部與 A 相同
        preserved_by_attribute: 其餘屬性各自的保持率
    """
    attributes = list(attributes or resolve_attributes(dataset.labels, model.n_factors))
    if not 1 <= factor_index <= len(attributes):
        raise ValueError(f"factor_index 必須在 1..{len(attributes)}: {factor_index}")
    swapped = attributes[factor_index - 1]
    others = [a for a in attributes if a != swapped]
    labels = {a: np.asarray(dataset.labels[a]) for a in attributes}
    images = np.asarray(dataset.images, dtype=np.float64)

    rng = np.random.default_rng(seed)
    first = rng.integers(len(images), size=pairs)
    second = np.empty(pairs, dtype=np.int64)
    for p, a in enumerate(first):
        candidates = np.flatnonzero(labels[swapped] != labels[swapped][a])
        second[p] = rng.choice(candidates)

    fs_a = decompose(model, encode(host, images[first]))
    fs_b = decompose(model, encode(host, images[second]))
    mixed = fs_a.replace(factor_index, fs_b[factor_index])
    nearest = nearest_ground_truth(decode(host, entangle(model, mixed)), images)

    preserved_by = {a: float(np.mean(labels[a][nearest] == labels[a][first])) for a in others}
    preserved_all = np.all([labels[a][nearest] == labels[a][first] for a in others], axis=0) \
        if others else np.ones(pairs, dtype=bool)
    result = {
        'attribute': swapped,
        'pairs': pairs,
        'changed_rate': float(np.mean(labels[swapped][nearest] != labels[swapped][first])),
        'matched_rate': float(np.mean(labels[swapped][nearest] == labels[swapped][second])),
        'preserved_rate': float(np.mean(preserved_all)),
        'preserved_by_attribute': preserved_by,
    }
    if verbose:
        print(f"✅ 因子交換 ({swapped}, {pairs} 對): 改變 {result['changed_rate']*100:.1f}% | "
              f"符合 B {result['matched_rate']*100:.1f}% | 其餘保持 {result['preserved_rate']*100:.1f}%")
    return result


def pairwise_factor_mi(model: FdenModel, latents: LatentDataset, bins: int = 20,
                       attributes: Optional[Sequence[str]] = None) -> Dict:
    """
    因子獨立性檢查

    pairwise: 因子平均碼（每因子一個單元）兩兩的離散互資訊，(N+1)×(N+1) DataFrame
    aligned:  因子 i 各單元與其對齊屬性的互資訊平均（i = 1..N）
    """
    attributes = list(attributes or resolve_attributes(latents.labels, model.n_factors))
    fs = decompose(model, latents.z)
    summary = discretize_codes(np.stack([f.mean(axis=1) for f in fs.factors], axis=1), bins)
    names = [f'f{i}' for i in range(len(fs))]
    matrix = np.array([[discrete_mi(summary[:, i], summary[:, j]) for j in range(len(fs))]
                       for i in range(len(fs))])
    pairwise = pd.DataFrame(matrix, index=names, columns=names)

    aligned = {}
    for i, name in enumerate(attributes, start=1):
        binned = discretize_codes(fs[i], bins)
        aligned[name] = float(np.mean([discrete_mi(binned[:, j], latents.labels[name])
                                       for j in range(binned.shape[1])]))
    supervised = range(1, len(fs))
    off_diag = [matrix[i, j] for i in supervised for j in supervised if i < j]
    return {
        'pairwise': pairwise,
        'mean_pairwise': float(np.mean(off_diag)) if off_diag else 0.0,
        'aligned': aligned,
        'mean_aligned': float(np.mean(list(aligned.values()))),
    }
