"""Minimal PLY reader/writer for point clouds and triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MalformedHeader, TruncatedFile, UnsupportedElement

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class Element:
    name: str
    count: int
    # (name, dtype) for scalars, (name, count_dtype, item_dtype) for lists
    props: list = field(default_factory=list)

    @property
    def has_list(self) -> bool:
        return any(len(p) == 3 for p in self.props)

    def scalar_dtype(self, endian: str) -> np.dtype:
        return np.dtype([(p[0], endian + p[1]) for p in self.props])


@dataclass
class Header:
    fmt: str
    elements: list
    data_offset: int

    def element(self, name: str):
        for el in self.elements:
            if el.name == name:
                return el
        return None


def parse_header(data: bytes) -> Header:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader("missing 'ply' magic or 'end_header'", offset=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("no newline after end_header", offset=end)
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[Element] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format" and len(tok) == 3:
            fmt = tok[1]
        elif tok[0] == "element" and len(tok) == 3:
            try:
                elements.append(Element(tok[1], int(tok[2])))
            except ValueError as exc:
                raise MalformedHeader(f"bad element count {tok[2]!r}", offset=f"line {lineno}") from exc
        elif tok[0] == "property" and elements:
            try:
                if tok[1] == "list" and len(tok) == 5:
                    elements[-1].props.append((tok[4], _TYPES[tok[2]], _TYPES[tok[3]]))
                elif len(tok) == 3:
                    elements[-1].props.append((tok[2], _TYPES[tok[1]]))
                else:
                    raise KeyError(raw)
            except KeyError as exc:
                raise MalformedHeader(f"bad property line {raw!r}", offset=f"line {lineno}") from exc
        else:
            raise MalformedHeader(f"unexpected header line {raw!r}", offset=f"line {lineno}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MalformedHeader(f"unknown or missing format {fmt!r}")
    if fmt == "binary_big_endian":
        raise FormatError("unsupported-format: binary_big_endian PLY")
    return Header(fmt, elements, nl + 1)


def _read_binary(data: bytes, header: Header, wanted: set) -> dict:
    pos = header.data_offset
    out = {}
    for el in header.elements:
        if not el.has_list:
            dt = el.scalar_dtype("<")
            nbytes = dt.itemsize * el.count
            if pos + nbytes > len(data):
                raise TruncatedFile(f"element '{el.name}' needs {nbytes} bytes, file ends early", offset=pos)
            if el.name in wanted:
                out[el.name] = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            pos += nbytes
            continue
        if el.name not in wanted:
            if not (wanted - out.keys()):
                break
            raise UnsupportedElement(f"cannot skip list element '{el.name}'", offset=pos)
        out[el.name], pos = _read_binary_lists(data, el, pos)
    missing = wanted - out.keys()
    if missing:
        raise UnsupportedElement(f"missing element(s) {sorted(missing)}")
    return out


def _read_binary_lists(data: bytes, el: Element, pos: int):
    """Faces: a fast path for triangle-only files, a per-row loop otherwise."""
    if len(el.props) == 1:
        _, ct, it = el.props[0]
        fast = np.dtype([("n", "<" + ct), ("idx", "<" + it, (3,))])
        nbytes = fast.itemsize * el.count
        if pos + nbytes <= len(data):
            arr = np.frombuffer(data, dtype=fast, count=el.count, offset=pos)
            if np.all(arr["n"] == 3):
                return arr["idx"].astype(np.int64), pos + nbytes
    rows = []
    for _ in range(el.count):
        row = {}
        for prop in el.props:
            if len(prop) == 2:
                dt = np.dtype("<" + prop[1])
                if pos + dt.itemsize > len(data):
                    raise TruncatedFile(f"element '{el.name}' truncated", offset=pos)
                row[prop[0]] = np.frombuffer(data, dtype=dt, count=1, offset=pos)[0]
                pos += dt.itemsize
            else:
                cdt, idt = np.dtype("<" + prop[1]), np.dtype("<" + prop[2])
                if pos + cdt.itemsize > len(data):
                    raise TruncatedFile(f"element '{el.name}' truncated", offset=pos)
                n = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
                pos += cdt.itemsize
                if pos + n * idt.itemsize > len(data):
                    raise TruncatedFile(f"element '{el.name}' truncated", offset=pos)
                row[prop[0]] = np.frombuffer(data, dtype=idt, count=n, offset=pos).astype(np.int64)
                pos += n * idt.itemsize
        lists = [v for v in row.values() if isinstance(v, np.ndarray)]
        rows.append(lists[0] if lists else np.zeros(0, dtype=np.int64))
    return rows, pos


def _read_ascii(data: bytes, header: Header, wanted: set) -> dict:
    text = data[header.data_offset:].decode("ascii", errors="replace").splitlines()
    line = 0
    out = {}
    for el in header.elements:
        if el.name not in wanted:
            line += el.count
            continue
        rows = []
        for _ in range(el.count):
            while line < len(text) and not text[line].strip():
                line += 1
            if line >= len(text):
                raise TruncatedFile(f"element '{el.name}' declares {el.count} rows, found {len(rows)}",
                                    offset=f"body line {line + 1}")
            rows.append(text[line].split())
            line += 1
        if el.has_list:
            out[el.name] = [np.array(r[1:1 + int(r[0])], dtype=np.int64) for r in rows]
        else:
            try:
                arr = np.array(rows, dtype=np.float64).reshape(el.count, len(el.props))
            except ValueError as exc:
                raise FormatError(f"bad numeric row in element '{el.name}'") from exc
            rec = np.zeros(el.count, dtype=[(p[0], "f8") for p in el.props])
            for j, p in enumerate(el.props):
                rec[p[0]] = arr[:, j]
            out[el.name] = rec
    return out


def read_ply(path, wanted=("vertex",)) -> dict:
    data = Path(path).read_bytes()
    header = parse_header(data)
    wanted = set(wanted)
    for name in wanted:
        if header.element(name) is None:
            raise UnsupportedElement(f"PLY has no '{name}' element")
    if header.fmt == "ascii":
        return _read_ascii(data, header, wanted)
    return _read_binary(data, header, wanted)


def vertex_xyz(vertex) -> np.ndarray:
    names = vertex.dtype.names or ()
    if not {"x", "y", "z"} <= set(names):
        raise UnsupportedElement("vertex element lacks x/y/z properties")
    return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)


def write_ply(path, vertices, faces=None) -> None:
    """Binary little-endian PLY: float32 xyz vertices, uchar/int32 faces."""
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    body = [vertices.tobytes()]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
        rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = 3
        rec["idx"] = faces
        body.append(rec.tobytes())
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + b"".join(body))
