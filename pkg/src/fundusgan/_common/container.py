# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import json
import zlib
from struct import Struct
from typing import Any, Mapping

import numpy as np

from ..enums import DType
from ..exceptions import CheckpointError

MAGIC = b'FGAN'
FORMAT_VERSION = 1

uint8 = Struct('<B')
uint16 = Struct('<H')
uint32 = Struct('<I')


#  container layout (all integers little-endian):
#
#  char     magic[4];            "FGAN"
#  uint16_t version;
#  uint8_t  role_count;
#  struct { uint8_t length; char tag[length]; } roles[role_count];
#  uint32_t meta_length;
#  char     meta[meta_length];   UTF-8 JSON object
#  uint32_t tensor_count;
#  struct {
#      uint16_t name_length;
#      char     name[name_length];
#      uint8_t  dtype;
#      uint8_t  rank;
#      uint32_t extents[rank];
#      uint8_t  payload[];      row-major scalars
#  } tensors[tensor_count];
#  uint32_t crc32;              over all preceding bytes


def encode_container(roles: list[str], meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    Serialize role tags, metadata and named tensors into the binary container format.
    """
    parts = [MAGIC, uint16.pack(FORMAT_VERSION), uint8.pack(len(roles))]
    for role in roles:
        tag = role.encode('ascii')
        parts += [uint8.pack(len(tag)), tag]

    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    parts += [uint32.pack(len(meta_bytes)), meta_bytes, uint32.pack(len(tensors))]

    for name, array in tensors.items():
        code = DType.from_numpy(array.dtype)
        name_bytes = name.encode('utf-8')
        parts += [uint16.pack(len(name_bytes)), name_bytes, uint8.pack(code), uint8.pack(array.ndim)]
        parts += [uint32.pack(extent) for extent in array.shape]
        parts.append(np.ascontiguousarray(array, dtype=code.to_numpy()).tobytes())

    body = b''.join(parts)
    return body + uint32.pack(zlib.crc32(body))


class ContainerParser(object):
    """
    Sequential parser of the binary container format.

    Each field is validated as it is read. Errors carry the byte offset of the
    offending field.
    """

    @classmethod
    def parse_bytes(cls, buffer: bytes) -> 'ContainerParser':
        return ContainerParser(buffer)

    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0
        self.version: int = 0
        self.roles: list[str] = []
        self.meta: dict[str, Any] = {}
        self.tensors: dict[str, np.ndarray] = {}
        self.parse_header()
        self.parse_meta()
        self.parse_tensors()
        self.parse_checksum()

    def take(self, length: int, what: str) -> bytes:
        if self.offset + length > len(self.buffer):
            raise CheckpointError(f'truncated container: {what} needs {length} bytes', self.offset)
        data = self.buffer[self.offset:self.offset + length]
        self.offset += length
        return data

    def read(self, st: Struct, what: str) -> int:
        return st.unpack(self.take(st.size, what))[0]

    def parse_header(self) -> None:
        if self.take(len(MAGIC), 'magic') != MAGIC:
            raise CheckpointError('invalid magic bytes, not a fundusgan container', 0)

        position = self.offset
        self.version = self.read(uint16, 'version')
        if self.version != FORMAT_VERSION:
            raise CheckpointError(f'unsupported container version {self.version} (expected {FORMAT_VERSION})',
                                  position)

        role_count = self.read(uint8, 'role count')
        for _ in range(role_count):
            length = self.read(uint8, 'role tag length')
            position = self.offset
            try:
                self.roles.append(self.take(length, 'role tag').decode('ascii'))
            except UnicodeDecodeError as e:
                raise CheckpointError('role tag is not ASCII', position) from e

    def parse_meta(self) -> None:
        length = self.read(uint32, 'metadata length')
        position = self.offset
        try:
            meta = json.loads(self.take(length, 'metadata').decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError('metadata is not valid JSON', position) from e
        if not isinstance(meta, dict):
            raise CheckpointError('metadata is not a JSON object', position)
        self.meta = meta

    def parse_tensors(self) -> None:
        count = self.read(uint32, 'tensor count')
        for _ in range(count):
            name_length = self.read(uint16, 'tensor name length')
            position = self.offset
            try:
                name = self.take(name_length, 'tensor name').decode('utf-8')
            except UnicodeDecodeError as e:
                raise CheckpointError('tensor name is not UTF-8', position) from e
            if name in self.tensors:
                raise CheckpointError(f'duplicate tensor {name}', position)

            position = self.offset
            code = self.read(uint8, 'dtype code')
            try:
                dtype = DType(code).to_numpy()
            except ValueError as e:
                raise CheckpointError(f'tensor {name} has unknown dtype code {code}', position) from e

            rank = self.read(uint8, 'tensor rank')
            shape = tuple(self.read(uint32, 'tensor extent') for _ in range(rank))
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            payload = self.take(size, f'payload of tensor {name}')
            self.tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))

    def parse_checksum(self) -> None:
        position = self.offset
        expected = self.read(uint32, 'checksum')
        if self.offset != len(self.buffer):
            raise CheckpointError(f'{len(self.buffer) - self.offset} unexpected trailing bytes', self.offset)
        actual = zlib.crc32(self.buffer[:position])
        if actual != expected:
            raise CheckpointError(f'checksum mismatch (stored {expected:08x}, computed {actual:08x})', position)
