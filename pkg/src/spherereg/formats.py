"""Text formats for meshes, deformation fields and reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import EulerField
from .fileio import atomic_write_text
from .mesh import FeatureMap, ParcellationMap, SurfaceMesh
from .synth import Subject

MESH_MAGIC = "SUGARMESH 1"
DEFORM_MAGIC = "SUGARDEF 1"


class FormatError(ValueError):
    pass


def _num(x: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(x))


@dataclass
class MeshRecord:
    vertices: np.ndarray
    faces: np.ndarray
    features: np.ndarray  # (N, C), C may be 0
    labels: np.ndarray | None
    parcel_count: int

    @property
    def mesh(self) -> SurfaceMesh:
        return SurfaceMesh(self.vertices, self.faces)

    def subject(self, name: str = "subject") -> Subject:
        mesh = self.mesh
        if self.features.shape[1] == 0:
            raise FormatError(f"{name}: mesh file has no feature channels")
        feats = FeatureMap.on(mesh, self.features)
        parc = None if self.labels is None else ParcellationMap(self.parcel_count, labels=self.labels)
        return Subject(name, mesh, feats, parc)

    @classmethod
    def from_subject(cls, s: Subject) -> "MeshRecord":
        labels = None if s.parc is None else s.parc.hard()
        P = 0 if s.parc is None else s.parc.parcel_count
        return cls(s.mesh.vertices, s.mesh.faces, s.features.values, labels, P)


def format_mesh(rec: MeshRecord) -> str:
    V, F = np.asarray(rec.vertices), np.asarray(rec.faces)
    X = np.asarray(rec.features).reshape(len(V), -1)
    P = rec.parcel_count if rec.labels is not None else 0
    lines = [MESH_MAGIC, f"vertices {len(V)} faces {len(F)} channels {X.shape[1]} parcels {P}"]
    for i in range(len(V)):
        row = [_num(c) for c in V[i]] + [_num(c) for c in X[i]]
        if P:
            row.append(str(int(rec.labels[i])))
        lines.append(" ".join(row))
    lines += [f"{int(a)} {int(b)} {int(c)}" for a, b, c in F]
    return "\n".join(lines) + "\n"


def parse_mesh(text: str) -> MeshRecord:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MESH_MAGIC:
        raise FormatError(f"expected header {MESH_MAGIC!r}")
    head = lines[1].split() if len(lines) > 1 else []
    if len(head) != 8 or head[0::2] != ["vertices", "faces", "channels", "parcels"]:
        raise FormatError("bad counts line")
    try:
        N, T, C, P = (int(x) for x in head[1::2])
    except ValueError as e:
        raise FormatError("bad counts line") from e
    if min(N, T, C, P) < 0:
        raise FormatError("negative count")
    body = lines[2:]
    if len(body) != N + T:
        raise FormatError(f"expected {N + T} data lines, found {len(body)}")
    width = 3 + C + (1 if P else 0)
    try:
        vrows = [ln.split() for ln in body[:N]]
        if any(len(r) != width for r in vrows):
            raise FormatError(f"vertex lines need {width} fields")
        data = np.array([[float(x) for x in r[: 3 + C]] for r in vrows], dtype=np.float64).reshape(N, 3 + C)
        labels = np.array([int(r[-1]) for r in vrows], dtype=np.int64) if P else None
        frows = [ln.split() for ln in body[N:]]
        if any(len(r) != 3 for r in frows):
            raise FormatError("face lines need 3 indices")
        faces = np.array([[int(x) for x in r] for r in frows], dtype=np.int64).reshape(T, 3)
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"unparseable number: {e}") from e
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite value")
    if T and (faces.min() < 0 or faces.max() >= N):
        raise FormatError("face index out of range")
    if labels is not None and N and (labels.min() < 0 or labels.max() >= P):
        raise FormatError("label out of range")
    return MeshRecord(data[:, :3].copy(), faces, data[:, 3:].copy(), labels, P)


def write_mesh(path, rec: MeshRecord | Subject | SurfaceMesh) -> None:
    if isinstance(rec, Subject):
        rec = MeshRecord.from_subject(rec)
    elif isinstance(rec, SurfaceMesh):
        rec = MeshRecord(rec.vertices, rec.faces, np.zeros((rec.n_vertices, 0)), None, 0)
    atomic_write_text(path, format_mesh(rec))


def read_mesh(path) -> MeshRecord:
    with open(path, encoding="utf-8") as fh:
        return parse_mesh(fh.read())


def format_deform(field: EulerField | np.ndarray) -> str:
    a = field.angles if isinstance(field, EulerField) else np.asarray(field, dtype=np.float64)
    lines = [DEFORM_MAGIC, f"vertices {len(a)}"]
    lines += [" ".join(_num(x) for x in row) for row in a]
    return "\n".join(lines) + "\n"


def parse_deform(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].strip() != DEFORM_MAGIC:
        raise FormatError(f"expected header {DEFORM_MAGIC!r}")
    head = lines[1].split() if len(lines) > 1 else []
    if len(head) != 2 or head[0] != "vertices":
        raise FormatError("bad counts line")
    n = int(head[1])
    rows = lines[2:]
    if len(rows) != n:
        raise FormatError(f"expected {n} rows, found {len(rows)}")
    try:
        a = np.array([[float(x) for x in r.split()] for r in rows], dtype=np.float64).reshape(n, 3)
    except ValueError as e:
        raise FormatError(f"bad angle row: {e}") from e
    if not np.all(np.isfinite(a)):
        raise FormatError("non-finite angle")
    return a


def write_deform(path, field) -> None:
    atomic_write_text(path, format_deform(field))


def read_deform(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return parse_deform(fh.read())


def format_report(values: dict) -> str:
    out = []
    for k, v in values.items():
        if isinstance(v, (bool, np.bool_)):
            s = "true" if v else "false"
        elif isinstance(v, (int, np.integer)):
            s = str(int(v))
        elif isinstance(v, (float, np.floating)):
            s = _num(v)
        else:
            s = str(v)
        out.append(f"{k} = {s}")
    return "\n".join(out) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        if not ln.strip():
            continue
        k, sep, v = ln.partition(" = ")
        if not sep:
            raise FormatError(f"bad report line {ln!r}")
        out[k.strip()] = v.strip()
    return out
