"""
宿主模型 (Host Model)
FDEN 外掛所依附的「固定預訓練網路」

功能：
1. 小型確定性自編碼器（256 → 128 → 64 → Dim → 64 → 128 → 256）
2. 訓練後凍結：參數唯讀並計算 checksum
3. 潛在表示匯入 / 匯出（外部預訓練模型的接入點）
4. 檢查點存取（FDEN 容器格式，32-bit 儲存）
"""

import hashlib
import numpy as np
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

from autodiff_core import (
    AdamState, LayerSpec, MlpParams, NonFiniteError, Tape, TrainingDivergedError, Var,
    ShapeMismatchError, adam_step, backward, mean, mlp_forward, mlp_predict, mul, seed_sequence, sub,
)
from fden_container import ContainerFormatError, read_container, write_container

KIND_HOST = 1
KIND_FDEN = 2
PIXELS = 256


class CheckpointError(ValueError):
    """檢查點內容與宣告不符（Dim、網路形狀、種類）"""


class FrozenModelError(RuntimeError):
    """凍結模型的參數被修改"""


# ========== 參數序列化 ==========

def params_to_entries(prefix: str, params: MlpParams) -> Dict[str, np.ndarray]:
    """MLP 參數 → 容器條目（{prefix}.in_dim, {prefix}.spec, {prefix}.<陣列名>）"""
    entries = {
        f'{prefix}.in_dim': np.array([params.in_dim], dtype=np.float64),
        f'{prefix}.spec': params.spec_table(),
    }
    for name, array in params.arrays.items():
        entries[f'{prefix}.{name}'] = array
    return entries


def params_from_entries(entries: Dict[str, np.ndarray], prefix: str) -> MlpParams:
    try:
        in_dim = int(round(float(entries[f'{prefix}.in_dim'][0])))
        specs = [LayerSpec.from_row(row) for row in np.atleast_2d(entries[f'{prefix}.spec'])]
    except KeyError as e:
        raise CheckpointError(f"缺少網路 {prefix} 的條目: {e}")
    except ValueError as e:
        raise CheckpointError(f"網路 {prefix} 的層設定無效: {e}")

    head = f'{prefix}.'
    arrays = {
        name[len(head):]: np.asarray(value, dtype=np.float64).copy()
        for name, value in entries.items()
        if name.startswith(head) and name not in (f'{prefix}.in_dim', f'{prefix}.spec')
    }
    try:
        return MlpParams(in_dim, specs, arrays)
    except (KeyError, ShapeMismatchError) as e:
        raise CheckpointError(f"網路 {prefix} 的參數不完整或形狀錯誤: {e}")


def params_checksum(named: Dict[str, MlpParams]) -> str:
    """所有參數（名稱、形狀、float32 位元組）的 SHA-256"""
    sha = hashlib.sha256()
    for net_name in sorted(named):
        arrays = named[net_name].arrays
        for name in sorted(arrays):
            value = np.ascontiguousarray(arrays[name], dtype='<f4')
            sha.update(f'{net_name}.{name}:{value.shape}'.encode('utf-8'))
            sha.update(value.tobytes())
    return sha.hexdigest()


def _round_to_storage(params: MlpParams):
    """參數捨入到 32-bit 精度，確保存檔讀檔後逐位元一致"""
    for name, array in params.arrays.items():
        params.arrays[name] = array.astype(np.float32).astype(np.float64)


# ========== 宿主模型 ==========

def encoder_specs(dim: int) -> Sequence[LayerSpec]:
    return [LayerSpec(128), LayerSpec(64), LayerSpec(dim, activation='linear')]


def decoder_specs() -> Sequence[LayerSpec]:
    return [LayerSpec(64), LayerSpec(128), LayerSpec(PIXELS, activation='sigmoid')]


@dataclass
class HostConfig:
    """宿主訓練設定"""
    dim: int = 32
    steps: int = 5000
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class HostModel:
    """
    宿主自編碼器

    encoder: 256 → 128 → 64 → Dim（LeakyReLU，線性輸出）
    decoder: Dim → 64 → 128 → 256（LeakyReLU，sigmoid 輸出）
    """
    encoder: MlpParams
    decoder: MlpParams
    frozen: bool = False
    checksum: str = ''

    @property
    def dim(self) -> int:
        return self.encoder.out_dim

    @classmethod
    def initialize(cls, dim: int = 32, seed=None) -> 'HostModel':
        enc_seed, dec_seed = seed_sequence(seed).spawn(2)
        return cls(MlpParams.initialize(PIXELS, encoder_specs(dim), enc_seed, scheme='he'),
                   MlpParams.initialize(dim, decoder_specs(), dec_seed, scheme='he'))

    @classmethod
    def zeros(cls, dim: int = 32) -> 'HostModel':
        return cls(MlpParams.zeros(PIXELS, encoder_specs(dim)), MlpParams.zeros(dim, decoder_specs()))

    def networks(self) -> Dict[str, MlpParams]:
        return {'encoder': self.encoder, 'decoder': self.decoder}

    def compute_checksum(self) -> str:
        return params_checksum(self.networks())

    def freeze(self) -> 'HostModel':
        """捨入到 32-bit、設為唯讀並記錄 checksum"""
        if not self.frozen:
            for params in self.networks().values():
                _round_to_storage(params)
                for array in params.arrays.values():
                    array.setflags(write=False)
            self.frozen = True
        self.checksum = self.compute_checksum()
        return self

    def verify_frozen(self) -> str:
        """確認凍結後參數未被修改，回傳 checksum"""
        if not self.frozen:
            raise FrozenModelError("宿主模型尚未凍結")
        current = self.compute_checksum()
        if current != self.checksum:
            raise FrozenModelError(f"宿主參數已被修改: {self.checksum[:12]} → {current[:12]}")
        return current

    def to_entries(self) -> Dict[str, np.ndarray]:
        entries = {
            'meta.kind': np.array([KIND_HOST], dtype=np.float64),
            'meta.dim': np.array([self.dim], dtype=np.float64),
            'meta.frozen': np.array([float(self.frozen)]),
        }
        for net_name, params in self.networks().items():
            entries.update(params_to_entries(net_name, params))
        return entries

    @classmethod
    def from_entries(cls, entries: Dict[str, np.ndarray]) -> 'HostModel':
        declared = int(round(float(entries['meta.dim'][0])))
        encoder = params_from_entries(entries, 'encoder')
        decoder = params_from_entries(entries, 'decoder')
        if encoder.in_dim != PIXELS or decoder.out_dim != PIXELS:
            raise CheckpointError(f"宿主輸入 / 輸出寬度必須為 {PIXELS}")
        if encoder.out_dim != declared or decoder.in_dim != declared:
            raise CheckpointError(
                f"宣告的 Dim={declared} 與網路形狀不符 (encoder 輸出 {encoder.out_dim}, "
                f"decoder 輸入 {decoder.in_dim})")
        host = cls(encoder, decoder)
        if float(entries.get('meta.frozen', [0.0])[0]) > 0.5:
            host.freeze()
        return host


def encode(host: HostModel, x: np.ndarray) -> np.ndarray:
    """推論模式編碼：x [batch, 256] → z [batch, Dim]"""
    return mlp_predict(host.encoder, x)


def decode(host: HostModel, z: np.ndarray) -> np.ndarray:
    """推論模式解碼：z [batch, Dim] → x̃ [batch, 256]，值域 [0,1]"""
    return mlp_predict(host.decoder, z)


def decode_var(host: HostModel, z: Var) -> Var:
    """在既有 Tape 上解碼（宿主參數以常數綁定，梯度只流向 z）"""
    out, _ = mlp_forward(host.decoder, z, 'eval', trainable=False)
    return out


def reconstruction_error(host: HostModel, x: np.ndarray, z: Optional[np.ndarray] = None) -> float:
    """
    平均每像素平方誤差

    參數:
        x: 原始影像 [n, 256]
        z: 要解碼的潛在表示，預設為 encode(x)
    """
    z = encode(host, x) if z is None else z
    return float(np.mean((decode(host, z) - x) ** 2))


def train_host(dataset, config: Optional[HostConfig] = None, seed=0, verbose: bool = True) -> HostModel:
    """
    訓練並凍結宿主自編碼器

    參數:
        dataset: ShapeDataset（或任何具 images 屬性的物件）
        config: HostConfig
        seed: 決定初始化與批次順序

    返回:
        凍結的 HostModel
    """
    config = config or HostConfig()
    init_seed, data_seed = seed_sequence(seed).spawn(2)
    host = HostModel.initialize(config.dim, init_seed)
    images = np.asarray(dataset.images, dtype=np.float64)
    rng = np.random.default_rng(data_seed)
    enc_state = AdamState(config.lr, config.beta1, config.beta2)
    dec_state = AdamState(config.lr, config.beta1, config.beta2)

    if verbose:
        print(f"\n{'='*80}")
        print(f"訓練宿主自編碼器 - Dim={config.dim}, steps={config.steps}, batch={config.batch}")
        print(f"{'='*80}")

    log_every = max(1, config.steps // 10)
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(images), size=config.batch, replace=len(images) < config.batch)
        try:
            tape = Tape()
            z, _ = mlp_forward(host.encoder, images[idx], 'train', tape=tape)
            x_hat, _ = mlp_forward(host.decoder, z, 'train')
            diff = sub(x_hat, tape.constant(images[idx]))
            loss = mean(mul(diff, diff))
            grads = backward(tape, loss)
        except NonFiniteError as e:
            raise TrainingDivergedError(f"宿主訓練在第 {step} 步發散: {e}") from e
        adam_step(host.encoder.arrays, grads.for_params(host.encoder), enc_state)
        adam_step(host.decoder.arrays, grads.for_params(host.decoder), dec_state)
        if verbose and step % log_every == 0:
            print(f"[{step}/{config.steps}] 重建誤差: {float(loss.value):.5f}")

    host.freeze()
    if verbose:
        print(f"✅ 宿主訓練完成，全網格重建誤差: {reconstruction_error(host, images):.5f}")
        print(f"   checksum: {host.checksum[:16]}")
    return host


# ========== 潛在表示 ==========

@dataclass
class LatentDataset:
    """FDEN 的輸入資料：z（必要）、x（可選，λ 正則項使用）、屬性標籤"""
    z: np.ndarray
    x: Optional[np.ndarray] = None
    labels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ShapeMismatchError(f"z 必須是二維陣列: {self.z.shape}")
        rows = self.z.shape[0]
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=np.float64)
            if self.x.ndim != 2 or self.x.shape[0] != rows:
                raise ShapeMismatchError(f"x 列數 {self.x.shape} 與 z 的 {rows} 列不符")
        for name, values in self.labels.items():
            values = np.asarray(values).astype(np.int64)
            if values.shape != (rows,):
                raise ShapeMismatchError(f"標籤 {name} 形狀 {values.shape} 與 z 的 {rows} 列不符")
            self.labels[name] = values

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def subset(self, index: np.ndarray) -> 'LatentDataset':
        return LatentDataset(self.z[index], None if self.x is None else self.x[index],
                             {name: values[index] for name, values in self.labels.items()})

    @classmethod
    def from_host(cls, host: HostModel, dataset) -> 'LatentDataset':
        images = np.asarray(dataset.images, dtype=np.float64)
        return cls(encode(host, images), images, dict(dataset.labels))


def export_representations(latents: LatentDataset, path: str) -> str:
    """匯出表示檔：條目 z、可選 x、labels_<attr>"""
    entries = {'z': latents.z}
    if latents.x is not None:
        entries['x'] = latents.x
    for name, values in latents.labels.items():
        entries[f'labels_{name}'] = values
    return write_container(path, entries)


def import_representations(path: str) -> LatentDataset:
    """
    匯入外部表示檔（Dim 由檔案推得）

    只有 z 的檔案仍可使用，此時 λ 正則項視為 0。
    """
    entries = read_container(path)
    if 'z' not in entries:
        raise ContainerFormatError("表示檔缺少條目 z")
    labels = {name[len('labels_'):]: values for name, values in entries.items()
              if name.startswith('labels_')}
    try:
        return LatentDataset(entries['z'].astype(np.float64), entries.get('x'), labels)
    except ShapeMismatchError as e:
        raise ContainerFormatError(f"表示檔列數不一致: {e}") from e


# ========== 檢查點 ==========

def save_checkpoint(model, path: str) -> str:
    """儲存 HostModel 或 FdenModel"""
    return write_container(path, model.to_entries())


def load_checkpoint(path: str, expected_dim: Optional[int] = None):
    """
    讀取檢查點，依 meta.kind 還原成 HostModel 或 FdenModel

    參數:
        expected_dim: 若指定，Dim 不符時丟出 CheckpointError
    """
    entries = read_container(path)
    if 'meta.kind' not in entries or 'meta.dim' not in entries:
        raise CheckpointError(f"{path} 不是模型檢查點（缺少 meta 條目）")
    kind = int(round(float(entries['meta.kind'][0])))
    if kind == KIND_HOST:
        model = HostModel.from_entries(entries)
    elif kind == KIND_FDEN:
        from fden_model import FdenModel
        model = FdenModel.from_entries(entries)
    else:
        raise CheckpointError(f"未知的檢查點種類: {kind}")
    if expected_dim is not None and model.dim != expected_dim:
        raise CheckpointError(f"檢查點 Dim={model.dim}，預期 {expected_dim}")
    return model
