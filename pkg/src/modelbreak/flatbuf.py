"""Bounds-checked reader for the FlatBuffers wire format.

Only reading is supported and no generated code is involved: callers address
fields by their schema slot index.  Every offset that is followed is checked
against the buffer, so hostile input produces :class:`MalformedBufferError`
rather than an ``IndexError`` or a bogus value.

Wire layout (all little-endian)::

    u32 root uoffset | [4-byte file identifier] | ...
    table:  i32 soffset to vtable, then inline fields
    vtable: u16 vtable_len, u16 table_len, u16 field offset per slot
    vector: u32 count, then contiguous elements
    string: u32 byte length, UTF-8 bytes, NUL (not counted)
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import MalformedBufferError

MAX_DEPTH = 128
MAX_TABLE_VISITS = 1_000_000

_U16 = struct.Struct("<H")
_I32 = struct.Struct("<i")
_U32 = struct.Struct("<I")

_SCALARS = {
    fmt: struct.Struct("<" + fmt) for fmt in ("b", "B", "?", "h", "H", "i", "I", "q", "Q", "f", "d")
}
_NUMPY = {
    "b": "<i1", "B": "<u1", "h": "<i2", "H": "<u2", "i": "<i4", "I": "<u4",
    "q": "<i8", "Q": "<u8", "f": "<f4", "d": "<f8",
}


@dataclass(frozen=True)
class TableRef:
    table_pos: int
    vtable_pos: int
    vtable_len: int
    table_len: int
    depth: int = 0


class Vector:
    """A length-prefixed vector; ``pos`` is the first element, not the count."""

    __slots__ = ("view", "pos", "count", "depth")

    def __init__(self, view: FlatBufferView, pos: int, count: int, depth: int):
        self.view = view
        self.pos = pos
        self.count = count
        self.depth = depth

    def __len__(self):
        return self.count

    def scalar(self, index, fmt):
        st = _SCALARS[fmt]
        if not 0 <= index < self.count:
            raise IndexError(index)
        return self.view._unpack(st, self.pos + index * st.size)

    def array(self, fmt) -> np.ndarray:
        size = _SCALARS[fmt].size
        self.view._check(self.pos, self.count * size)
        return np.frombuffer(self.view.data, dtype=_NUMPY[fmt], count=self.count, offset=self.pos).copy()

    def raw(self) -> bytes:
        """Element bytes of a ``[ubyte]`` vector, copied out of the buffer."""
        self.view._check(self.pos, self.count)
        return bytes(self.view.data[self.pos:self.pos + self.count])

    def table(self, index) -> TableRef:
        if not 0 <= index < self.count:
            raise IndexError(index)
        at = self.pos + 4 * index
        return self.view.table_at(at + self.view._unpack(_U32, at), self.depth + 1)

    def string(self, index) -> str:
        if not 0 <= index < self.count:
            raise IndexError(index)
        at = self.pos + 4 * index
        return self.view._string_at(at + self.view._unpack(_U32, at))


class FlatBufferView:
    def __init__(self, data: bytes, root_offset: int, file_identifier: str | None):
        self.data = data
        self.root_offset = root_offset
        self.file_identifier = file_identifier
        self._visits = itertools.count(1)

    @classmethod
    def open(cls, data) -> FlatBufferView:
        data = bytes(data)
        if len(data) < 8:
            raise MalformedBufferError(f"too short ({len(data)} bytes, need at least 8)", 0)
        (root,) = _U32.unpack_from(data, 0)
        if root + 4 > len(data):
            raise MalformedBufferError(f"root out of bounds (offset {root}, size {len(data)})", 0)
        ident = data[4:8]
        identifier = ident.decode("ascii") if all(0x20 <= c < 0x7F for c in ident) else None
        return cls(data, root, identifier)

    def root(self) -> TableRef:
        return self.table_at(self.root_offset, 0)

    # -- primitive reads -------------------------------------------------

    def _check(self, pos, size):
        if pos < 0 or size < 0 or pos + size > len(self.data):
            raise MalformedBufferError(f"read of {size} bytes escapes buffer of {len(self.data)}", pos)

    def _unpack(self, st: struct.Struct, pos):
        self._check(pos, st.size)
        return st.unpack_from(self.data, pos)[0]

    def table_at(self, pos, depth=0) -> TableRef:
        if depth > MAX_DEPTH:
            raise MalformedBufferError(f"table nesting deeper than {MAX_DEPTH}", pos)
        if next(self._visits) > MAX_TABLE_VISITS:
            raise MalformedBufferError(f"more than {MAX_TABLE_VISITS} tables visited", pos)
        vtable = pos - self._unpack(_I32, pos)
        vtable_len = self._unpack(_U16, vtable)
        table_len = self._unpack(_U16, vtable + 2)
        if vtable_len < 4 or vtable_len % 2:
            raise MalformedBufferError(f"bad vtable length {vtable_len}", vtable)
        if table_len < 4:
            raise MalformedBufferError(f"bad table length {table_len}", vtable + 2)
        self._check(vtable, vtable_len)
        self._check(pos, table_len)
        return TableRef(pos, vtable, vtable_len, table_len, depth)

    def _field_pos(self, table: TableRef, field_id: int, size: int):
        slot = 4 + 2 * field_id
        if field_id < 0 or slot + 2 > table.vtable_len:
            return None
        off = self._unpack(_U16, table.vtable_pos + slot)
        if off == 0:
            return None
        if off + size > table.table_len:
            raise MalformedBufferError(
                f"field {field_id} at +{off} overruns table of {table.table_len} bytes",
                table.vtable_pos + slot,
            )
        return table.table_pos + off

    def _deref(self, table, field_id):
        at = self._field_pos(table, field_id, 4)
        if at is None:
            return None
        return at + self._unpack(_U32, at)

    def _string_at(self, pos) -> str:
        n = self._unpack(_U32, pos)
        self._check(pos + 4, n)
        try:
            return self.data[pos + 4:pos + 4 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedBufferError("string is not valid UTF-8", pos) from None

    # -- field access ------------------------------------------------------

    def get_scalar(self, table: TableRef, field_id: int, fmt: str, default=0):
        st = _SCALARS[fmt]
        at = self._field_pos(table, field_id, st.size)
        if at is None:
            return default
        return self._unpack(st, at)

    def get_table(self, table: TableRef, field_id: int) -> TableRef | None:
        target = self._deref(table, field_id)
        if target is None:
            return None
        return self.table_at(target, table.depth + 1)

    def get_vector(self, table: TableRef, field_id: int, elem_size: int = 4) -> Vector | None:
        target = self._deref(table, field_id)
        if target is None:
            return None
        count = self._unpack(_U32, target)
        self._check(target + 4, count * elem_size)
        return Vector(self, target + 4, count, table.depth)

    def get_string(self, table: TableRef, field_id: int) -> str | None:
        target = self._deref(table, field_id)
        if target is None:
            return None
        return self._string_at(target)

    # alias for callers that think of sub-tables as offset fields
    get_offset_field = get_table
