"""Signature scanner for serialized on-device models.

Four container families are recognised anywhere inside a buffer:

    TFLite       FlatBuffers root with file identifier ``TFL3``
    ExecuTorch   FlatBuffers root with identifier ``ET??`` and an ``eh??``
                 extended header shortly after it
    ONNX         protobuf ModelProto skeleton containing the token ``onnx``
    TorchScript  ZIP archive whose central directory lists ``data.pkl`` and
                 ``code/`` or ``data/`` members

TFLite and ExecuTorch carry a fixed identifier and are reported as Definite.
ONNX and TorchScript are structural guesses and are reported as Heuristic.
"""

import enum
import io
import os
import re
import struct
import zipfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ScanError


class Format(enum.Enum):
    TFLITE = "TFLite"
    ONNX = "ONNX"
    TORCHSCRIPT = "TorchScript"
    EXECUTORCH = "ExecuTorch"


class Confidence(enum.Enum):
    DEFINITE = "Definite"
    HEURISTIC = "Heuristic"


@dataclass(frozen=True)
class FormatMatch:
    format: Format
    byte_offset: int
    evidence: tuple
    confidence: Confidence
    source_path: str = ""
    # (offset, bytes) pairs: every anchor can be re-read from the scanned buffer
    anchors: tuple = ()
    length: int = 0

    def shifted(self, delta, source_path=None):
        return replace(
            self,
            byte_offset=self.byte_offset + delta,
            anchors=tuple((o + delta, b) for o, b in self.anchors),
            source_path=self.source_path if source_path is None else source_path,
        )

    def to_json(self):
        return {
            "format": self.format.value,
            "source_path": self.source_path,
            "byte_offset": self.byte_offset,
            "length": self.length,
            "confidence": self.confidence.value,
            "evidence": list(self.evidence),
            "anchors": [{"offset": o, "hex": b.hex()} for o, b in self.anchors],
        }


@dataclass
class ScanReport:
    scanned_count: int = 0
    matches: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def to_json(self):
        return {
            "scanned_count": self.scanned_count,
            "matches": [m.to_json() for m in self.matches],
            "errors": [{"path": p, "reason": r} for p, r in self.errors],
        }


# -- FlatBuffers identifiers -------------------------------------------------


def _root_ok(data, start):
    root = struct.unpack_from("<I", data, start)[0]
    return root, start + root + 4 <= len(data)


def _tflite(data):
    for m in re.finditer(rb"TFL3", data):
        pos = m.start()
        start = pos - 4
        if start < 0:
            continue
        root, ok = _root_ok(data, start)
        if not ok:
            continue
        yield FormatMatch(
            Format.TFLITE, start,
            ("file identifier 'TFL3' at +4", f"root table offset {root}"),
            Confidence.DEFINITE, anchors=((pos, b"TFL3"),), length=8,
        )


EH_WINDOW = 64


def _executorch(data):
    for m in re.finditer(rb"ET[0-9]{2}", data):
        pos = m.start()
        start = pos - 4
        if start < 0:
            continue
        root, ok = _root_ok(data, start)
        if not ok:
            continue
        eh = re.compile(rb"eh[0-9]{2}").search(data, pos + 4, pos + 4 + EH_WINDOW)
        if eh is None:
            continue
        ident, header = m.group(), eh.group()
        gap = eh.start() - (pos + 4)
        yield FormatMatch(
            Format.EXECUTORCH, start,
            (f"file identifier '{ident.decode()}' at +4",
             f"extended header '{header.decode()}' at +{eh.start() - start} (gap {gap} bytes)"),
            Confidence.DEFINITE, anchors=((pos, ident), (eh.start(), header)),
            length=eh.end() - start,
        )


# -- ONNX ----------------------------------------------------------------------

# ModelProto field numbers
ONNX_MODEL_FIELDS = frozenset({1, 2, 3, 4, 5, 6, 7, 8, 14, 20, 25, 26})
ONNX_GRAPH = 7
_ONNX_START = re.compile(rb"\x08[\x01-\x14](?=[\x12\x1a\x22\x28\x32\x3a\x42])")


def _varint(data, pos, end):
    value = shift = 0
    for i in range(10):
        if pos + i >= end:
            return None
        b = data[pos + i]
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos + i + 1
        shift += 7
    return None


def _proto_fields(data, pos, end, allowed=None):
    """Parse protobuf fields from ``pos`` until the first invalid or disallowed one.

    Returns (fields, stop) with fields as (number, wire_type, value_start, value_end).
    """
    fields = []
    while pos < end:
        tag = _varint(data, pos, end)
        if tag is None:
            break
        key, p = tag
        number, wire = key >> 3, key & 7
        if number == 0 or (allowed is not None and number not in allowed):
            break
        if wire == 0:
            v = _varint(data, p, end)
            if v is None:
                break
            vs, ve = p, v[1]
        elif wire == 1:
            vs, ve = p, p + 8
        elif wire == 5:
            vs, ve = p, p + 4
        elif wire == 2:
            n = _varint(data, p, end)
            if n is None:
                break
            vs, ve = n[1], n[1] + n[0]
        else:
            break
        if ve > end:
            break
        fields.append((number, wire, vs, ve))
        pos = ve
    return fields, pos


def _onnx(data):
    if b"onnx" not in data:
        return
    end = len(data)
    for m in _ONNX_START.finditer(data):
        start = m.start()
        fields, stop = _proto_fields(data, start, end, ONNX_MODEL_FIELDS)
        graphs = [f for f in fields if f[0] == ONNX_GRAPH and f[1] == 2]
        if not graphs:
            continue
        _, _, gs, ge = graphs[0]
        inner, gstop = _proto_fields(data, gs, ge)
        if not inner or gstop != ge:
            continue
        token = data.find(b"onnx", start, stop)
        if token < 0:
            continue
        ir_version = _varint(data, start + 1, end)[0]
        yield FormatMatch(
            Format.ONNX, start,
            (f"protobuf skeleton: {len(fields)} ModelProto fields over {stop - start} bytes, "
             f"graph field with {len(inner)} entries",
             f"ir_version {ir_version}",
             f"token 'onnx' at +{token - start}"),
            Confidence.HEURISTIC, anchors=((token, b"onnx"),), length=stop - start,
        )


# -- TorchScript (ZIP) -----------------------------------------------------------

_EOCD = struct.Struct("<4sHHHHIIH")
_EOCD64 = struct.Struct("<4sQHHIIQQQQ")
_LOCATOR64 = 20
_CDIR = struct.Struct("<4sHHHHHHIIIHHHHHII")


def _central_directory(data, eocd):
    """Parse the archive ending at ``eocd``; returns (start, end, [(name, name_offset)]) or None."""
    if eocd + _EOCD.size > len(data):
        return None
    _, _, _, _, count, cd_size, cd_offset, comment = _EOCD.unpack_from(data, eocd)
    cd_end = eocd
    # zip64: locator right before the EOCD, zip64 record right before that
    rec = eocd - _LOCATOR64 - _EOCD64.size
    if rec >= 0 and data[eocd - _LOCATOR64:eocd - _LOCATOR64 + 4] == b"PK\x06\x07" \
            and data[rec:rec + 4] == b"PK\x06\x06":
        _, _, _, _, _, _, _, count, cd_size, cd_offset = _EOCD64.unpack_from(data, rec)
        cd_end = rec
    cd_start = cd_end - cd_size
    start = cd_start - cd_offset
    if cd_start < 0 or start < 0 or data[start:start + 4] != b"PK\x03\x04":
        return None
    names = []
    pos = cd_start
    if count > (cd_end - cd_start) // _CDIR.size:
        return None
    for _ in range(count):
        if pos + _CDIR.size > cd_end:
            return None
        rec = _CDIR.unpack_from(data, pos)
        if rec[0] != b"PK\x01\x02":
            return None
        name_len, extra_len, comment_len = rec[10], rec[11], rec[12]
        name_pos = pos + _CDIR.size
        if name_pos + name_len > cd_end:
            return None
        names.append((data[name_pos:name_pos + name_len], name_pos))
        pos = name_pos + name_len + extra_len + comment_len
    return start, min(len(data), eocd + _EOCD.size + comment), names


def _torchscript_members(names):
    """Find data.pkl plus a code/ or data/ member, directly or under one top-level folder."""
    for strip in (False, True):
        pkl = prefix = None
        for raw, pos in names:
            name = raw.decode("utf-8", "replace")
            cut = 0
            if strip:
                if "/" not in name:
                    continue
                cut = name.index("/") + 1
            rel = name[cut:]
            if rel == "data.pkl" and pkl is None:
                pkl = (raw, pos)
            elif (rel.startswith("code/") or rel.startswith("data/")) and prefix is None:
                prefix = (raw, pos)
        if pkl and prefix:
            return pkl, prefix
    return None


def _torchscript(data):
    pos = data.find(b"PK\x05\x06")
    while pos >= 0:
        cd = _central_directory(data, pos)
        if cd is not None:
            start, end, names = cd
            found = _torchscript_members(names)
            if found:
                (pkl, ppos), (pre, prepos) = found
                yield FormatMatch(
                    Format.TORCHSCRIPT, start,
                    (f"ZIP archive, {len(names)} members",
                     f"member '{pkl.decode('utf-8', 'replace')}'",
                     f"member '{pre.decode('utf-8', 'replace')}'"),
                    Confidence.HEURISTIC,
                    anchors=((start, b"PK\x03\x04"), (pos, b"PK\x05\x06"), (ppos, pkl), (prepos, pre)),
                    length=end - start,
                )
        pos = data.find(b"PK\x05\x06", pos + 1)


_RULES = (_tflite, _executorch, _onnx, _torchscript)


def identify_buffer(data) -> list:
    """All non-overlapping signature matches in ``data``, ordered by offset.

    When candidates overlap, the one starting first wins (ties go to the
    longer extent), so a container's own contents are not reported twice.
    """
    data = bytes(data)
    if len(data) < 4:
        return []
    found = [m for rule in _RULES for m in rule(data)]
    found.sort(key=lambda m: (m.byte_offset, -m.length, m.format.value))
    out, reach = [], 0
    for m in found:
        if m.byte_offset < reach:
            continue
        out.append(m)
        reach = m.byte_offset + max(m.length, 1)
    return out


# -- paths and archives -----------------------------------------------------

MAX_ARCHIVE_DEPTH = 3
MEMBER_CAP = 512 * 2**20
WINDOW_THRESHOLD = 2 * 2**30
WINDOW_SIZE = 64 * 2**20
WINDOW_OVERLAP = 64


def _scan_windows(path, size, window, overlap):
    seen, out = set(), []
    with open(path, "rb") as f:
        start = 0
        while start < size:
            f.seek(start)
            chunk = f.read(window)
            for m in identify_buffer(chunk):
                m = m.shifted(start)
                if (m.format, m.byte_offset) not in seen:
                    seen.add((m.format, m.byte_offset))
                    out.append(m)
            if start + len(chunk) >= size:
                break
            start += window - overlap
    return out


def _member_data_ranges(zf):
    """Byte ranges of each member's stored payload inside the archive file."""
    ranges = []
    fp = zf.fp
    for info in zf.infolist():
        fp.seek(info.header_offset)
        head = fp.read(30)
        if len(head) < 30 or head[:4] != b"PK\x03\x04":
            continue
        name_len, extra_len = struct.unpack_from("<HH", head, 26)
        begin = info.header_offset + 30 + name_len + extra_len
        ranges.append((begin, begin + info.compress_size))
    return ranges


class _Scan:
    def __init__(self, descend, window_threshold, window_size, window_overlap):
        self.descend = descend
        self.window_threshold = window_threshold
        self.window_size = window_size
        self.window_overlap = window_overlap

    def file(self, path):
        """Scan one file; returns (scanned, matches, errors)."""
        name = str(path)
        try:
            size = os.path.getsize(path)
            if size > self.window_threshold:
                matches = _scan_windows(path, size, self.window_size, self.window_overlap)
                data = None
            else:
                with open(path, "rb") as f:
                    data = f.read()
                matches = identify_buffer(data)
        except OSError as e:
            return 1, [], [(name, e.strerror or str(e))]
        matches = [replace(m, source_path=name) for m in matches]
        if not self.descend:
            return 1, matches, []
        if data is not None:
            source = io.BytesIO(data)
        else:
            source = path
        scanned, inner, errors = self.archive(source, name, 1)
        if inner is not None:
            ranges, members = inner
            matches = [m for m in matches if not any(a <= m.byte_offset < b for a, b in ranges)]
            matches += members
        return 1 + scanned, matches, errors

    def archive(self, source, name, depth):
        """Scan ZIP members.  Returns (scanned, (ranges, matches) or None, errors)."""
        try:
            if not zipfile.is_zipfile(source):
                return 0, None, []
            zf = zipfile.ZipFile(source)
        except (zipfile.BadZipFile, OSError, ValueError, EOFError) as e:
            return 0, None, [(name, f"unreadable archive: {e}")]
        scanned, matches, errors = 0, [], []
        with zf:
            try:
                ranges = _member_data_ranges(zf)
            except (OSError, ValueError, struct.error):
                ranges = []
            for info in zf.infolist():
                if info.is_dir():
                    continue
                member = f"{name}!{info.filename}"
                if info.file_size > MEMBER_CAP:
                    errors.append((member, f"member larger than {MEMBER_CAP} bytes, skipped"))
                    continue
                try:
                    with zf.open(info) as f:
                        data = f.read(MEMBER_CAP + 1)
                except (zipfile.BadZipFile, OSError, ValueError, EOFError, NotImplementedError,
                        RuntimeError, zlib.error) as e:
                    errors.append((member, f"unreadable member: {e}"))
                    continue
                scanned += 1
                found = [replace(m, source_path=member) for m in identify_buffer(data)]
                if depth < MAX_ARCHIVE_DEPTH:
                    n, inner, errs = self.archive(io.BytesIO(data), member, depth + 1)
                    scanned += n
                    errors += errs
                    if inner is not None:
                        r, sub = inner
                        found = [m for m in found if not any(a <= m.byte_offset < b for a, b in r)]
                        found += sub
                matches += found
        return scanned, (ranges, matches), errors


def _collect(root: Path, recursive):
    if root.is_file():
        return [root]
    if recursive:
        files = []
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            files += [Path(dirpath) / f for f in sorted(filenames)]
        return [p for p in files if p.is_file()]
    return sorted(p for p in root.iterdir() if p.is_file())


def scan_path(root, recursive=False, descend_archives=False, *, workers=None,
              window_threshold=WINDOW_THRESHOLD, window_size=WINDOW_SIZE,
              window_overlap=WINDOW_OVERLAP) -> ScanReport:
    """Scan a file or directory.  Per-file problems land in ``errors``."""
    root = Path(root)
    if not root.exists():
        raise ScanError(f"no such file or directory: {root}")
    if window_overlap >= window_size:
        raise ScanError("window overlap must be smaller than the window")
    scan = _Scan(descend_archives, window_threshold, window_size, window_overlap)
    files = _collect(root, recursive)
    report = ScanReport()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for scanned, matches, errors in pool.map(scan.file, files):
            report.scanned_count += scanned
            report.matches += matches
            report.errors += errors
    report.matches.sort(key=lambda m: (m.source_path, m.byte_offset, m.format.value))
    report.errors.sort()
    return report


def format_report(report: ScanReport) -> str:
    lines = []
    for m in report.matches:
        lines.append(f"{m.source_path}@{m.byte_offset}: {m.format.value} ({m.confidence.value})")
        lines += [f"    {e}" for e in m.evidence]
    for path, reason in report.errors:
        lines.append(f"error: {path}: {reason}")
    lines.append(f"{report.scanned_count} scanned, {len(report.matches)} matches, "
                 f"{len(report.errors)} errors")
    return "\n".join(lines)
