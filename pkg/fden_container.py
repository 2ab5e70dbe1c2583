"""
FDEN 容器格式 (little-endian)

    magic 'FDEN' + 版本位元組 0x01
    u32 條目數
    每個條目：u32 名稱長度、UTF-8 名稱、u32 rank、u32 dims[rank]、f32 payload

檢查點與表示檔共用此格式。
"""

import hashlib
import struct
import numpy as np
from typing import Dict, Mapping

MAGIC = b'FDEN'
VERSION = 1


class ContainerFormatError(ValueError):
    """容器檔格式錯誤（magic、版本、截斷、多餘位元組）"""


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, bytes([VERSION]), struct.pack('<I', len(entries))]
    for name, array in entries.items():
        array = np.asarray(array)
        raw_name = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(chunks)


def decode_container(payload: bytes) -> Dict[str, np.ndarray]:
    """解析容器位元組，回傳名稱 → float32 陣列（保持寫入順序）"""
    if len(payload) < 9:
        raise ContainerFormatError(f"檔案過短 ({len(payload)} bytes)")
    if payload[:4] != MAGIC:
        raise ContainerFormatError(f"magic 錯誤: {payload[:4]!r}")
    if payload[4] != VERSION:
        raise ContainerFormatError(f"不支援的版本: {payload[4]}")

    offset = 5

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise ContainerFormatError(f"內容截斷於位元組 {offset}")
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    count, = struct.unpack('<I', take(4))
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack('<I', take(4))
        try:
            name = take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise ContainerFormatError(f"條目名稱不是 UTF-8: {e}")
        rank, = struct.unpack('<I', take(4))
        dims = struct.unpack(f'<{rank}I', take(4 * rank))
        size = 1
        for d in dims:
            size *= d
        if 4 * size > len(payload) - offset:
            raise ContainerFormatError(f"條目 {name} 宣告 {dims} 超出剩餘 {len(payload) - offset} bytes")
        array = np.frombuffer(take(4 * size), dtype='<f4').reshape(dims)
        if name in entries:
            raise ContainerFormatError(f"重複的條目名稱: {name}")
        entries[name] = array.astype(np.float32)
    if offset != len(payload):
        raise ContainerFormatError(f"結尾多出 {len(payload) - offset} bytes")
    return entries


def write_container(path: str, entries: Mapping[str, np.ndarray]) -> str:
    with open(path, 'wb') as fh:
        fh.write(encode_container(entries))
    return path


def read_container(path: str) -> Dict[str, np.ndarray]:
    with open(path, 'rb') as fh:
        return decode_container(fh.read())


def file_digest(path: str) -> str:
    """檔案內容的 SHA-256（manifest 與唯讀驗證使用）"""
    sha = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 16), b''):
            sha.update(block)
    return sha.hexdigest()
