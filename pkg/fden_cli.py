"""
FDEN 實驗執行器 (Experiment Runner)

功能：
1. key = value 設定檔解析（未知鍵、型別錯誤附行號）
2. 子命令：train-host / train-fden / eval-disent / eval-fewshot / transfer /
   interpolate / mi-bench / rsa / export-factors / report
3. 執行目錄 manifest（設定 digest、seed、套件版本、產出檔 SHA-256）

結束碼：0 成功、1 執行失敗、2 用法或設定錯誤

使用方式：
    python fden_cli.py train-host --run-dir runs/demo
    python fden_cli.py train-fden --run-dir runs/demo --set steps=2000
    python fden_cli.py train-fden --run-dir runs/demo --grl off --tag nogrl
    python fden_cli.py eval-disent --run-dir runs/demo
    python fden_cli.py report --run-dir runs/demo
"""

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
import sklearn

from disentanglement_metrics import (
    CodeFactorMatrix, MiEstimatorConfig, ScoreConfig, analytic_gaussian_mi, beta_vae_metric, dci,
    dv_mi_estimate, episodic_eval, factor_vae_metric, mig, rsa_labels, rsa_matrix, score_row,
    write_score_report,
)
from factor_studies import (
    alignment_accuracy, factor_swap_study, nearest_ground_truth, pairwise_factor_mi,
    reconstruction_ratio,
)
from fden_container import file_digest
from fden_model import (
    FdenModel, FdenTrainer, TrainConfig, decompose, entangle, factor_codes, factor_transfer_mean,
    interpolation_sweep, resolve_attributes, train_streams,
)
from host_model import (
    HostConfig, HostModel, LatentDataset, decode, encode, import_representations, load_checkpoint,
    reconstruction_error, save_checkpoint, train_host,
)
from synthgen import ATTRIBUTES, export_dataset_csv, make_dataset, sample_gaussian_pair

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST = 'manifest.json'


class ConfigError(ValueError):
    """設定錯誤（line 為設定檔行號，--set 覆寫時為 None）"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"第 {line} 行: {message}")
        self.line = line


class IntegrityError(RuntimeError):
    """產出檔或檢查點的 digest 與 manifest 不符"""


class MissingArtifactError(RuntimeError):
    """manifest 列出的產出檔不存在"""

    def __init__(self, missing: Sequence[str]):
        super().__init__(f"缺少產出檔: {', '.join(missing)}")
        self.missing = list(missing)


# ========== 設定 ==========

# 鍵 → (型別, 預設值)；順序即序列化順序
CONFIG_KEYS: Dict[str, Tuple[str, object]] = {
    # 模型
    'dim': ('int', 32),
    'n_factors': ('int', 4),
    'width_scale': ('float', 1.0),
    'leaky_slope': ('float', 0.01),
    'init_sigma': ('float', 0.001),
    'dropout': ('float', 0.2),
    'bn_momentum': ('float', 0.9),
    # 損失權重
    'alpha': ('float', 1.0),
    'beta': ('float', 1.0),
    'gamma': ('float', 0.5),
    'lambda': ('float', 0.5),
    # 優化
    'lr': ('float', 0.0001),
    'beta1': ('float', 0.5),
    'beta2': ('float', 0.999),
    'batch': ('int', 16),
    'steps': ('int', 30000),
    'seed': ('int', 7),
    # 消融開關
    'grl': ('switch', True),
    'factorizer': ('switch', True),
    'clip': ('switch', True),
    'marginal_mode': ('choice', 'one_vs_all'),
    'phase_switch_step': ('int', 20000),
    'log_every': ('int', 500),
    # 宿主
    'host_steps': ('int', 5000),
    'host_lr': ('float', 0.001),
    'host_batch': ('int', 64),
    # 資料
    'test_fraction': ('float', 0.2),
    'holdout_classes': ('int_list', (2, 4, 6)),
    # 互資訊估計
    'mi_steps': ('int', 5000),
    'mi_batch': ('int', 500),
    'mi_lr': ('float', 0.001),
    'mi_ema_decay': ('float', 0.0),
    # 評估
    'eval_train': ('int', 10000),
    'eval_test': ('int', 5000),
    'eval_batch': ('int', 64),
    'bins': ('int', 20),
    'way': ('int', 3),
    'shot': ('int', 1),
    'episodes': ('int', 1000),
}

CHOICES = {'marginal_mode': ('one_vs_all', 'full_shuffle')}
NONNEGATIVE = ('alpha', 'beta', 'gamma', 'lambda', 'steps', 'host_steps', 'mi_steps',
               'phase_switch_step', 'mi_ema_decay', 'episodes')
POSITIVE = ('dim', 'width_scale', 'init_sigma', 'lr', 'host_lr', 'mi_lr', 'host_batch', 'mi_batch',
            'eval_train', 'eval_test', 'eval_batch', 'bins', 'way', 'shot', 'log_every')
UNIT_INTERVAL = ('dropout', 'beta1', 'beta2', 'bn_momentum', 'mi_ema_decay', 'test_fraction')


@dataclass(frozen=True)
class ExperimentConfig:
    """扁平的實驗設定（鍵見 CONFIG_KEYS）"""
    values: Tuple[Tuple[str, object], ...]

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def as_dict(self) -> Dict[str, object]:
        return dict(self.values)


def _convert(key: str, raw: str):
    kind, _ = CONFIG_KEYS[key]
    raw = raw.strip()
    if kind == 'int':
        return int(raw)
    if kind == 'float':
        value = float(raw)
        if not np.isfinite(value):
            raise ValueError(f"{raw} 不是有限數值")
        return value
    if kind == 'switch':
        if raw.lower() not in ('on', 'off'):
            raise ValueError(f"必須是 on 或 off: {raw}")
        return raw.lower() == 'on'
    if kind == 'choice':
        if raw not in CHOICES[key]:
            raise ValueError(f"必須是 {'/'.join(CHOICES[key])}: {raw}")
        return raw
    return tuple(int(v) for v in raw.split(',') if v.strip()) if raw else ()


def _check_range(key: str, value):
    if key in NONNEGATIVE and value < 0:
        raise ValueError(f"{key} 必須 >= 0: {value}")
    if key in POSITIVE and value <= 0:
        raise ValueError(f"{key} 必須 > 0: {value}")
    if key in UNIT_INTERVAL and not 0 <= value < 1:
        raise ValueError(f"{key} 必須在 [0,1): {value}")
    if key == 'batch' and value < 2:
        raise ValueError(f"batch 必須 >= 2: {value}")
    if key == 'n_factors' and not 1 <= value <= len(ATTRIBUTES):
        raise ValueError(f"n_factors 必須在 1..{len(ATTRIBUTES)}: {value}")


def _assign(values: Dict[str, object], key: str, raw: str, line: Optional[int]):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"未知的設定鍵: {key}", line)
    try:
        value = _convert(key, raw)
        _check_range(key, value)
    except ValueError as e:
        raise ConfigError(f"{key} 的值無效: {e}", line)
    values[key] = value


def parse_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    解析設定檔與 --set 覆寫

    參數:
        path: UTF-8 設定檔（每行 key = value，# 之後為註解），None 表示全部預設值
        overrides: 'key=value' 字串，依序套用在檔案內容之後

    返回:
        ExperimentConfig
    """
    values = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if path is not None:
        with open(path, 'r', encoding='utf-8') as fh:
            text = fh.read()
        for number, line in enumerate(text.splitlines(), start=1):
            content = line.split('#', 1)[0].strip()
            if not content:
                continue
            if '=' not in content:
                raise ConfigError(f"缺少 '=': {content}", number)
            key, raw = content.split('=', 1)
            _assign(values, key.strip(), raw, number)
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"--set 需要 key=value 格式: {item}")
        key, raw = item.split('=', 1)
        _assign(values, key.strip(), raw, None)
    return ExperimentConfig(tuple((key, values[key]) for key in CONFIG_KEYS))


def _format(value) -> str:
    if isinstance(value, bool):
        return 'on' if value else 'off'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """固定順序輸出所有鍵（parse_config 的反函數）"""
    lines = ['# FDEN experiment config']
    lines += [f'{key} = {_format(value)}' for key, value in config.values]
    return '\n'.join(lines) + '\n'


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode('utf-8')).hexdigest()


def to_train_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        alpha=config['alpha'], beta=config['beta'], gamma=config['gamma'], lam=config['lambda'],
        lr=config['lr'], beta1=config['beta1'], beta2=config['beta2'], batch=config['batch'],
        steps=config['steps'], seed=config['seed'], grl=config['grl'],
        factorizer=config['factorizer'], marginal_mode=config['marginal_mode'], clip=config['clip'],
        phase_switch_step=config['phase_switch_step'], leaky_slope=config['leaky_slope'],
        bn_momentum=config['bn_momentum'], log_every=config['log_every'])


def to_score_config(config: ExperimentConfig) -> ScoreConfig:
    return ScoreConfig(config['eval_train'], config['eval_test'], config['eval_batch'],
                       config['seed'], config['bins'])


# ========== 執行目錄 ==========

def package_versions() -> Dict[str, str]:
    return {'python': platform.python_version(), 'numpy': np.__version__, 'pandas': pd.__version__,
            'scipy': scipy.__version__, 'scikit-learn': sklearn.__version__}


def update_manifest(run_dir: str, command: str, config: ExperimentConfig, artifacts: Sequence[str],
                    inputs: Optional[Dict[str, str]] = None) -> Dict:
    """
    把本次子命令的紀錄併入 manifest.json

    artifacts 為執行目錄內的檔名，記錄其 SHA-256；時間戳只出現在 manifest。
    """
    path = os.path.join(run_dir, MANIFEST)
    manifest = {'artifacts': {}, 'commands': []}
    if os.path.exists(path):
        with open(path, 'r', encoding='utf-8') as fh:
            manifest = json.load(fh)
    for name in artifacts:
        manifest['artifacts'][name] = file_digest(os.path.join(run_dir, name))
    manifest['commands'].append({
        'command': command,
        'config_digest': config_digest(config),
        'seed': config['seed'],
        'inputs': inputs or {},
        'outputs': list(artifacts),
        'timestamp': datetime.now().isoformat(timespec='seconds'),
    })
    manifest['versions'] = package_versions()
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False, sort_keys=True)
    return manifest


class RunContext:
    """單一子命令的執行環境：設定、執行目錄、輸出"""

    def __init__(self, args: argparse.Namespace, config: ExperimentConfig):
        self.args = args
        self.config = config
        self.run_dir = args.run_dir
        self.verbose = not args.quiet
        self.artifacts: List[str] = []
        self.inputs: Dict[str, str] = {}
        os.makedirs(self.run_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def record(self, name: str) -> str:
        self.artifacts.append(name)
        return self.path(name)

    def write_scores(self, name: str, rows: Sequence[Dict]):
        write_score_report(rows, self.record(name))
        if self.verbose:
            print(f"✅ 分數已導出到: {self.path(name)}")

    def row(self, metric: str, value: float, n: int) -> Dict:
        return score_row(metric, value, n, self.config['seed'], config_digest(self.config))

    def dataset(self):
        return make_dataset(seed=self.config['seed'])

    def load(self, path: str, kind: type):
        model = load_checkpoint(path)
        if not isinstance(model, kind):
            raise IntegrityError(f"{path} 不是 {kind.__name__} 檢查點")
        self.inputs[os.path.basename(path)] = file_digest(path)
        return model

    def host_path(self) -> str:
        return self.args.host or self.path('host.ckpt')

    def fden_path(self) -> str:
        return self.args.fden or self.path(f'fden_{self.args.tag}.ckpt')

    def verify_inputs(self):
        """唯讀子命令結束時確認輸入檢查點未被修改"""
        for path in (self.host_path(), self.fden_path()):
            name = os.path.basename(path)
            if name in self.inputs and file_digest(path) != self.inputs[name]:
                raise IntegrityError(f"{path} 在執行期間被修改")

    def finish(self, command: str):
        update_manifest(self.run_dir, command, self.config, self.artifacts, self.inputs)


def _split_classes(dataset, config: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray]:
    """訓練 / 測試索引，保留類別（few-shot 用）不進訓練集"""
    train_idx, test_idx = dataset.split_indices(config['test_fraction'])
    holdout = np.isin(dataset.class_ids, config['holdout_classes'])
    return train_idx[~holdout[train_idx]], test_idx[~holdout[test_idx]]


# ========== 子命令 ==========

def cmd_train_host(ctx: RunContext) -> int:
    config = ctx.config
    dataset = ctx.dataset()
    host_cfg = HostConfig(dim=config['dim'], steps=config['host_steps'], batch=config['host_batch'],
                          lr=config['host_lr'])
    host = train_host(dataset, host_cfg, seed=config['seed'], verbose=ctx.verbose)
    save_checkpoint(host, ctx.record('host.ckpt'))
    if getattr(ctx.args, 'export_dataset', False):
        export_dataset_csv(dataset, ctx.record('dataset.csv'))
    error = reconstruction_error(host, dataset.images)
    ctx.write_scores('scores_train_host.csv', [ctx.row('host_reconstruction_error', error, len(dataset))])
    return EXIT_OK


def _prepare_host(ctx: RunContext, dataset) -> Optional[HostModel]:
    """--latents 時只在明確給 --host 才載入；否則載入或現場訓練宿主"""
    if ctx.args.latents:
        return ctx.load(ctx.args.host, HostModel) if ctx.args.host else None
    if not os.path.exists(ctx.host_path()):
        if ctx.args.host:
            raise MissingArtifactError([ctx.args.host])
        if ctx.verbose:
            print("⚠️ 找不到宿主檢查點，先訓練宿主")
        cmd_train_host(ctx)
    return ctx.load(ctx.host_path(), HostModel)


def cmd_train_fden(ctx: RunContext) -> int:
    config = ctx.config
    dataset = ctx.dataset()
    host = _prepare_host(ctx, dataset)
    if ctx.args.latents:
        train_set = import_representations(ctx.args.latents)
        ctx.inputs[os.path.basename(ctx.args.latents)] = file_digest(ctx.args.latents)
        test_set = None
        attributes = resolve_attributes(train_set.labels, config['n_factors'])
        class_counts = [int(train_set.labels[a].max()) + 1 for a in attributes]
    else:
        latents = LatentDataset.from_host(host, dataset)
        train_idx, test_idx = _split_classes(dataset, config)
        train_set, test_set = latents.subset(train_idx), latents.subset(test_idx)
        attributes = list(ATTRIBUTES[:config['n_factors']])
        class_counts = [int(dataset.labels[a].max()) + 1 for a in attributes]

    streams = train_streams(config['seed'])
    model = FdenModel.initialize(train_set.dim, class_counts, streams['init'], sigma=config['init_sigma'],
                                 dropout=config['dropout'], width_scale=config['width_scale'])
    trainer = FdenTrainer(model, host, train_set, to_train_config(config), attributes, ctx.verbose)
    trainer.run()
    if ctx.verbose:
        trainer.print_training_report()

    tag = ctx.args.tag
    save_checkpoint(model, ctx.record(f'fden_{tag}.ckpt'))
    trainer.export_curves(ctx.record(f'curves_{tag}.csv'))

    rows = [ctx.row('final_loss_m', trainer.history[-1]['loss_m'] if trainer.history else 0.0,
                    len(train_set))]
    if test_set is not None and len(test_set):
        for name, acc in alignment_accuracy(model, test_set, attributes).items():
            rows.append(ctx.row(f'alignment_accuracy_{name}', acc, len(test_set)))
    if host is not None and host.dim == model.dim:
        ratio = reconstruction_ratio(model, host, dataset.images)
        for key, value in ratio.items():
            rows.append(ctx.row(f'reconstruction_{key}', value, len(dataset)))
    ctx.write_scores(f'scores_train_fden_{tag}.csv', rows)
    return EXIT_OK


def _load_pair(ctx: RunContext) -> Tuple[HostModel, FdenModel]:
    return ctx.load(ctx.host_path(), HostModel), ctx.load(ctx.fden_path(), FdenModel)


def cmd_eval_disent(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    dataset = ctx.dataset()
    score_cfg = to_score_config(ctx.config)
    z = encode(host, dataset.images)
    rows = []
    for source, codes in (('fden', factor_codes(fden, z, 'concat', ctx.config['seed'])),
                          ('fden_mean', factor_codes(fden, z, 'mean')), ('z', z)):
        cf = CodeFactorMatrix(codes, dataset.grid)
        if ctx.verbose:
            print(f"\n[{source}] 計算解耦分數（{cf.d_code} 個單元）...")
        d, c, i = dci(cf, score_cfg.bins)
        scores = {'mig': mig(cf, score_cfg.bins), 'fvm': factor_vae_metric(cf, score_cfg),
                  'bvm': beta_vae_metric(cf, score_cfg), 'dci_d': d, 'dci_c': c, 'dci_i': i}
        for name, value in scores.items():
            rows.append(ctx.row(f'{name}_{source}', value, cf.n))
            if ctx.verbose:
                print(f"  {name:<6}: {value:.4f}")
    latents = LatentDataset.from_host(host, dataset)
    independence = pairwise_factor_mi(fden, latents, ctx.config['bins'])
    rows.append(ctx.row('factor_mi_pairwise_mean', independence['mean_pairwise'], len(dataset)))
    rows.append(ctx.row('factor_mi_aligned_mean', independence['mean_aligned'], len(dataset)))
    ctx.write_scores(f'scores_eval_disent_{ctx.args.tag}.csv', rows)
    return EXIT_OK


def cmd_eval_fewshot(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    config = ctx.config
    pool = list(config['holdout_classes']) or None
    accuracy = episodic_eval(fden, host, ctx.dataset(), config['way'], config['shot'], config['episodes'],
                             ctx.args.factor, config['seed'], pool)
    if ctx.verbose:
        print(f"✅ {config['way']}-way {config['shot']}-shot（因子 {ctx.args.factor}）準確率: "
              f"{accuracy*100:.2f}%（機率水準 {100 / config['way']:.2f}%）")
    ctx.write_scores(f'scores_eval_fewshot_{ctx.args.tag}.csv',
                     [ctx.row(f'fewshot_{config["way"]}way_{config["shot"]}shot_f{ctx.args.factor}',
                              accuracy, config['episodes'])])
    return EXIT_OK


def cmd_transfer(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    dataset = ctx.dataset()
    args = ctx.args
    if args.study == 'swap':
        result = factor_swap_study(fden, host, dataset, args.factor, args.pairs, ctx.config['seed'],
                                   verbose=ctx.verbose)
        rows = [ctx.row(f'swap_{key}_f{args.factor}', result[key], args.pairs)
                for key in ('changed_rate', 'matched_rate', 'preserved_rate')]
        rows += [ctx.row(f'swap_preserved_{name}_f{args.factor}', value, args.pairs)
                 for name, value in result['preserved_by_attribute'].items()]
        ctx.verify_inputs()
        ctx.write_scores(f'scores_transfer_{ctx.args.tag}.csv', rows)
        return EXIT_OK

    latents = LatentDataset.from_host(host, dataset)
    fs = factor_transfer_mean(fden, latents, args.sample, args.factor, args.target)
    image = decode(host, entangle(fden, fs))
    nearest = int(nearest_ground_truth(image, dataset.images)[0])
    source = dataset.factors[args.sample]
    found = dataset.factors[nearest]
    df = pd.DataFrame([{
        'sample': args.sample, 'factor': args.factor, 'target': args.target,
        'source_shape': source.shape, 'source_scale': source.scale,
        'source_pos_x': source.pos_x, 'source_pos_y': source.pos_y,
        'nearest_idx': nearest, 'nearest_shape': found.shape, 'nearest_scale': found.scale,
        'nearest_pos_x': found.pos_x, 'nearest_pos_y': found.pos_y,
        **{f'pix_{k}': float(v) for k, v in enumerate(image[0])},
    }])
    ctx.verify_inputs()
    df.to_csv(ctx.record(f'transfer_{ctx.args.tag}.csv'), index=False, encoding='utf-8')
    if ctx.verbose:
        print(f"✅ 樣本 {args.sample} 的因子 {args.factor} 換成屬性值 {args.target} 的平均因子")
        print(f"   最近真實影像: {found}")
    return EXIT_OK


def parse_factor_list(text: str, n_factors: int) -> List[int]:
    """--factors 的索引清單，每個都必須在 0..n_factors"""
    try:
        selected = sorted({int(v) for v in text.split(',') if v.strip()})
    except ValueError:
        raise ConfigError(f"--factors 必須是以逗號分隔的整數: {text!r}")
    if not selected:
        raise ConfigError("--factors 至少需要一個因子")
    outside = [i for i in selected if not 0 <= i <= n_factors]
    if outside:
        raise ConfigError(f"--factors 必須在 0..{n_factors}: {outside}")
    return selected


def cmd_interpolate(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    dataset = ctx.dataset()
    args = ctx.args
    selected = parse_factor_list(args.factors, fden.n_factors)
    mask = [i in selected for i in range(fden.n_factors + 1)]
    alphas = [float(v) for v in args.alphas.split(',')]
    z = encode(host, dataset.images[[args.a, args.b]])
    images = interpolation_sweep(fden, host, z[:1], z[1:], mask, alphas)
    nearest = nearest_ground_truth(images[:, 0, :], dataset.images)
    records = []
    for alpha, image, idx in zip(alphas, images[:, 0, :], nearest):
        found = dataset.factors[int(idx)]
        records.append({'alpha': alpha, 'nearest_idx': int(idx), 'nearest_shape': found.shape,
                        'nearest_scale': found.scale, 'nearest_pos_x': found.pos_x,
                        'nearest_pos_y': found.pos_y,
                        **{f'pix_{k}': float(v) for k, v in enumerate(image)}})
    ctx.verify_inputs()
    pd.DataFrame(records).to_csv(ctx.record(f'interpolation_{ctx.args.tag}.csv'), index=False,
                                 encoding='utf-8')
    if ctx.verbose:
        print(f"✅ 內插 {args.a} → {args.b}，因子 {selected}，{len(alphas)} 個 α")
    return EXIT_OK


def cmd_mi_bench(ctx: RunContext) -> int:
    config = ctx.config
    mi_cfg = MiEstimatorConfig(steps=config['mi_steps'], batch=config['mi_batch'], lr=config['mi_lr'],
                               seed=config['seed'], ema_decay=config['mi_ema_decay'])
    rows = []
    for k, rho in enumerate(ctx.args.rho):
        pair = sample_gaussian_pair(rho, ctx.args.n, seed=config['seed'] + k)
        estimate = dv_mi_estimate(pair[:, :1], pair[:, 1:], mi_cfg, verbose=ctx.verbose)
        oracle = analytic_gaussian_mi(rho)
        rows.append(ctx.row(f'mi_dv_rho_{rho:g}', estimate, ctx.args.n))
        rows.append(ctx.row(f'mi_analytic_rho_{rho:g}', oracle, ctx.args.n))
        if ctx.verbose:
            flag = '✅' if abs(estimate - oracle) <= 0.15 else '⚠️'
            print(f"{flag} rho={rho:g}: DV 估計 {estimate:.4f} / 解析值 {oracle:.4f}")
    ctx.write_scores(f'scores_mi_bench_{ctx.args.tag}.csv', rows)
    return EXIT_OK


def cmd_rsa(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    dataset = ctx.dataset()
    z = encode(host, dataset.images)
    fs = decompose(fden, z)
    matrix = rsa_matrix(np.hstack([z, fs.concat()]), rsa_labels(fden.dim, fden.n_factors))
    matrix.to_csv(ctx.record(f'rsa_{ctx.args.tag}.csv'), encoding='utf-8', index_label='unit')
    if ctx.verbose:
        print(f"✅ RSA 矩陣 {matrix.shape[0]}×{matrix.shape[1]} 已導出")
    return EXIT_OK


def cmd_export_factors(ctx: RunContext) -> int:
    host, fden = _load_pair(ctx)
    dataset = ctx.dataset()
    fs = decompose(fden, encode(host, dataset.images))
    df = pd.DataFrame({
        'idx': np.arange(len(dataset)),
        'shape': [f.shape for f in dataset.factors],
        'scale': [f.scale for f in dataset.factors],
        'pos_x': [f.pos_x for f in dataset.factors],
        'pos_y': [f.pos_y for f in dataset.factors],
    })
    columns = [f'f{i}_{j}' for i in range(len(fs)) for j in range(fs.dim)]
    df = pd.concat([df, pd.DataFrame(fs.concat(), columns=columns)], axis=1)
    df.to_csv(ctx.record(f'factors_{ctx.args.tag}.csv'), index=False, encoding='utf-8')
    if ctx.verbose:
        print(f"✅ {len(df)} 筆因子已導出（{len(fs)} 個因子 × {fs.dim} 維）")
    return EXIT_OK


def cmd_report(ctx: RunContext) -> int:
    from run_reporter import emit_report
    emit_report(ctx.run_dir, verbose=ctx.verbose)
    return EXIT_OK


COMMANDS = {
    'train-host': cmd_train_host,
    'train-fden': cmd_train_fden,
    'eval-disent': cmd_eval_disent,
    'eval-fewshot': cmd_eval_fewshot,
    'transfer': cmd_transfer,
    'interpolate': cmd_interpolate,
    'mi-bench': cmd_mi_bench,
    'rsa': cmd_rsa,
    'export-factors': cmd_export_factors,
    'report': cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fden_cli', description='FDEN 實驗執行器')
    sub = parser.add_subparsers(dest='command', required=True)

    def add(name: str, help_text: str, models: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', help='key = value 設定檔')
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='覆寫設定')
        p.add_argument('--run-dir', default=os.path.join('runs', 'default'), help='執行目錄')
        p.add_argument('--tag', default='main', help='產出檔名後綴')
        p.add_argument('--quiet', action='store_true', help='不輸出進度')
        if models:
            p.add_argument('--host', help='宿主檢查點（預設 <run-dir>/host.ckpt）')
            p.add_argument('--fden', help='FDEN 檢查點（預設 <run-dir>/fden_<tag>.ckpt）')
        return p

    p = add('train-host', '訓練並凍結宿主自編碼器')
    p.add_argument('--export-dataset', action='store_true', help='同時匯出 dataset.csv')
    p = add('train-fden', '訓練 FDEN 外掛', models=True)
    p.add_argument('--latents', help='外部表示檔（FDEN 容器格式）')
    p.add_argument('--grl', choices=('on', 'off'), help='覆寫 grl')
    p.add_argument('--factorizer', choices=('on', 'off'), help='覆寫 factorizer')
    add('eval-disent', '解耦分數（MIG / FVM / BVM / DCI）', models=True)
    p = add('eval-fewshot', 'C-way K-shot 原型比對', models=True)
    p.add_argument('--factor', type=int, default=1, help='使用的因子索引')
    p = add('transfer', '平均因子替換或因子交換研究', models=True)
    p.add_argument('--study', choices=('mean', 'swap'), default='mean')
    p.add_argument('--sample', type=int, default=0)
    p.add_argument('--factor', type=int, default=1)
    p.add_argument('--target', type=int, default=0)
    p.add_argument('--pairs', type=int, default=200)
    p = add('interpolate', '因子內插', models=True)
    p.add_argument('--a', type=int, default=0)
    p.add_argument('--b', type=int, default=899)
    p.add_argument('--factors', default='1', help='要內插的因子索引，以逗號分隔')
    p.add_argument('--alphas', default='0,0.25,0.5,0.75,1')
    p = add('mi-bench', 'DV 互資訊估計 vs 解析值')
    p.add_argument('--rho', type=float, action='append', help='相關係數，可重複')
    p.add_argument('--n', type=int, default=10000)
    add('rsa', 'RSA 相關矩陣', models=True)
    add('export-factors', '匯出因子 CSV', models=True)
    add('report', '彙整執行目錄')
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI 進入點

    返回:
        結束碼（0 成功、1 執行失敗、2 用法或設定錯誤）
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        overrides = list(args.set)
        for switch in ('grl', 'factorizer'):
            if getattr(args, switch, None):
                overrides.append(f'{switch}={getattr(args, switch)}')
        config = parse_config(args.config, overrides)
        if args.command == 'mi-bench' and not args.rho:
            args.rho = [0.0, 0.5, 0.9]
        if args.command == 'mi-bench':
            for rho in args.rho:
                if not -1.0 < rho < 1.0:
                    raise ConfigError(f"--rho 必須在 (-1, 1): {rho}")
        if args.command == 'interpolate':
            parse_factor_list(args.factors, config['n_factors'])
    except ConfigError as e:
        print(f"❌ 設定錯誤: {e}")
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ 無法讀取設定檔: {e}")
        return EXIT_USAGE

    try:
        ctx = RunContext(args, config)
        code = COMMANDS[args.command](ctx)
        if args.command != 'report':
            ctx.finish(args.command)
        return code
    except Exception as e:
        print(f"❌ {args.command} 失敗: {type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(run())
