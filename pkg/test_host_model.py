"""
測試宿主自編碼器、表示檔與 FDEN 容器格式
"""

import sys
import os
sys.path.append(os.path.dirname(__file__))

import struct

import numpy as np
import pytest

from autodiff_core import ShapeMismatchError, seed_sequence
from fden_container import (
    ContainerFormatError, decode_container, encode_container, file_digest, read_container,
    write_container,
)
from host_model import (
    CheckpointError, FrozenModelError, HostConfig, HostModel, LatentDataset, decode, encode,
    export_representations, import_representations, load_checkpoint, reconstruction_error,
    save_checkpoint, train_host,
)
from synthgen import make_dataset


@pytest.fixture(scope='module')
def dataset():
    return make_dataset(seed=0)


@pytest.fixture(scope='module')
def small_host(dataset):
    return train_host(dataset, HostConfig(dim=8, steps=30, batch=16), seed=1, verbose=False)


# ========== 容器格式 ==========

def test_container_layout_header():
    payload = encode_container({'a': np.arange(3.0)})
    assert payload[:4] == b'FDEN'
    assert payload[4] == 1
    assert struct.unpack('<I', payload[5:9])[0] == 1
    assert len(payload) == 9 + 4 + 1 + 4 + 4 + 3 * 4


def test_container_preserves_order_and_values():
    entries = {'zeta': np.array([[1.5, -2.0]]), 'alpha': np.array(3.25), 'v': np.arange(4.0)}
    decoded = decode_container(encode_container(entries))
    assert list(decoded) == ['zeta', 'alpha', 'v']
    for name, array in entries.items():
        assert decoded[name].shape == np.shape(array)
        assert np.array_equal(decoded[name], array)


@pytest.mark.parametrize('payload', [
    b'',
    b'FDE',
    b'XDEN\x01\x00\x00\x00\x00',
    b'FDEN\x02\x00\x00\x00\x00',
])
def test_container_rejects_bad_headers(payload):
    with pytest.raises(ContainerFormatError):
        decode_container(payload)


def test_container_rejects_truncation_and_trailing_bytes():
    payload = encode_container({'a': np.arange(5.0)})
    with pytest.raises(ContainerFormatError):
        decode_container(payload[:-2])
    with pytest.raises(ContainerFormatError):
        decode_container(payload + b'\x00')


@pytest.mark.parametrize('dims', [(2 ** 21, 2 ** 21, 2 ** 22), (2 ** 32 - 1, 2 ** 32 - 1), (3,)])
def test_container_rejects_oversized_dims(dims):
    payload = (b'FDEN\x01' + struct.pack('<I', 1) + struct.pack('<I', 1) + b'w'
               + struct.pack('<I', len(dims)) + struct.pack(f'<{len(dims)}I', *dims)
               + np.zeros(2, dtype='<f4').tobytes())
    with pytest.raises(ContainerFormatError):
        decode_container(payload)


def test_container_rejects_duplicate_names():
    one = encode_container({'a': np.zeros(1)})
    body = one[9:]
    payload = b'FDEN\x01' + struct.pack('<I', 2) + body + body
    with pytest.raises(ContainerFormatError):
        decode_container(payload)


def test_file_digest_tracks_content(tmp_path):
    path = str(tmp_path / 'x.bin')
    write_container(path, {'a': np.ones(2)})
    first = file_digest(path)
    assert first == file_digest(path)
    write_container(path, {'a': np.zeros(2)})
    assert file_digest(path) != first
    assert np.array_equal(read_container(path)['a'], np.zeros(2))


# ========== 宿主模型 ==========

def test_encode_decode_shapes(small_host, dataset):
    z = encode(small_host, dataset.images[:4])
    assert z.shape == (4, 8)
    x_hat = decode(small_host, z)
    assert x_hat.shape == (4, 256)
    assert x_hat.min() >= 0.0 and x_hat.max() <= 1.0


def test_encode_is_pure(small_host, dataset):
    assert np.array_equal(encode(small_host, dataset.images[:10]), encode(small_host, dataset.images[:10]))


def test_zero_host_encodes_to_zero(dataset):
    assert np.array_equal(encode(HostModel.zeros(16), dataset.images[:5]), np.zeros((5, 16)))


def test_zero_steps_equals_initialization(dataset):
    host = train_host(dataset, HostConfig(dim=8, steps=0), seed=5, verbose=False)
    init_seed, _ = seed_sequence(5).spawn(2)
    reference = HostModel.initialize(8, init_seed)
    for name, array in reference.encoder.arrays.items():
        assert np.array_equal(host.encoder.arrays[name], array.astype(np.float32).astype(np.float64))


def test_training_is_deterministic(dataset, small_host):
    again = train_host(dataset, HostConfig(dim=8, steps=30, batch=16), seed=1, verbose=False)
    assert again.checksum == small_host.checksum


def test_trained_host_is_frozen(small_host):
    assert small_host.frozen
    assert small_host.verify_frozen() == small_host.checksum
    with pytest.raises(ValueError):
        small_host.encoder.arrays['W0'][0, 0] = 1.0


def test_modified_host_fails_verification(small_host):
    tampered = HostModel(small_host.encoder.copy(), small_host.decoder.copy(), True, small_host.checksum)
    tampered.encoder.arrays['W0'][0, 0] += 1.0
    with pytest.raises(FrozenModelError):
        tampered.verify_frozen()


def test_unfrozen_host_fails_verification():
    with pytest.raises(FrozenModelError):
        HostModel.initialize(4, seed=0).verify_frozen()


def test_reconstruction_error_with_explicit_z(small_host, dataset):
    x = dataset.images[:20]
    assert reconstruction_error(small_host, x) == pytest.approx(
        reconstruction_error(small_host, x, encode(small_host, x)))


@pytest.mark.slow
def test_default_host_reconstructs_grid(dataset):
    host = train_host(dataset, HostConfig(), seed=0, verbose=False)
    assert reconstruction_error(host, dataset.images) < 0.02


# ========== 檢查點 ==========

def test_checkpoint_round_trip(tmp_path, small_host):
    path = str(tmp_path / 'host.ckpt')
    save_checkpoint(small_host, path)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, HostModel)
    assert loaded.frozen
    assert loaded.checksum == small_host.checksum


def test_checkpoint_empty_file(tmp_path):
    path = tmp_path / 'empty.ckpt'
    path.write_bytes(b'')
    with pytest.raises(ContainerFormatError):
        load_checkpoint(str(path))


def test_checkpoint_declared_dim_mismatch(tmp_path, small_host):
    entries = small_host.to_entries()
    entries['meta.dim'] = np.array([16.0])
    path = str(tmp_path / 'bad.ckpt')
    write_container(path, entries)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_expected_dim(tmp_path, small_host):
    path = str(tmp_path / 'host.ckpt')
    save_checkpoint(small_host, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_dim=32)


def test_checkpoint_without_meta(tmp_path):
    path = str(tmp_path / 'plain.ckpt')
    write_container(path, {'z': np.zeros((2, 2))})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ========== 表示檔 ==========

def test_import_ten_rows(tmp_path):
    path = str(tmp_path / 'reps.fden')
    write_container(path, {'z': np.random.default_rng(0).normal(size=(10, 32))})
    latents = import_representations(path)
    assert latents.z.shape == (10, 32)
    assert latents.x is None


def test_representation_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 4)).astype(np.float32).astype(np.float64)
    x = rng.random((6, 256)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / 'reps.fden')
    export_representations(LatentDataset(z, x, {'shape': np.array([0, 1, 2, 0, 1, 2])}), path)
    latents = import_representations(path)
    assert np.array_equal(latents.z, z)
    assert np.array_equal(latents.x, x)
    assert np.array_equal(latents.labels['shape'], [0, 1, 2, 0, 1, 2])


def test_import_corrupted_magic(tmp_path):
    path = tmp_path / 'reps.fden'
    payload = bytearray(encode_container({'z': np.zeros((2, 3))}))
    payload[0:4] = b'XXXX'
    path.write_bytes(bytes(payload))
    with pytest.raises(ContainerFormatError):
        import_representations(str(path))


def test_import_requires_z_and_matching_rows(tmp_path):
    path = str(tmp_path / 'reps.fden')
    write_container(path, {'x': np.zeros((2, 256))})
    with pytest.raises(ContainerFormatError):
        import_representations(path)
    write_container(path, {'z': np.zeros((3, 4)), 'x': np.zeros((2, 256))})
    with pytest.raises(ContainerFormatError):
        import_representations(path)


def test_latent_dataset_validation():
    with pytest.raises(ShapeMismatchError):
        LatentDataset(np.zeros(5))
    with pytest.raises(ShapeMismatchError):
        LatentDataset(np.zeros((5, 2)), labels={'shape': np.zeros(4)})


def test_latent_subset(small_host, dataset):
    latents = LatentDataset.from_host(small_host, dataset)
    part = latents.subset(np.array([0, 5, 9]))
    assert len(part) == 3 and part.dim == 8
    assert np.array_equal(part.labels['scale'], dataset.labels['scale'][[0, 5, 9]])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v', '-rA']))
