"""On-disk data model: EMB1 matrices, quadruplet manifests, prompt sets,
checkpoints, plus a seeded synthetic dataset generator.

EMB1 layout (little-endian)::

    0   4s   magic "EMB1"
    4   u32  version (1)
    8   u32  rows
    12  u32  dim
    16  u8   dtype code (1 = float32)
    17  3x   zero padding
    20  rows*dim float32, row-major
"""
from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadReferenceError,
    CheckpointError,
    ContractError,
    CorruptionError,
    DimensionError,
    FormatError,
    ParameterError,
    SchemaError,
    VersionError,
)

log = logging.getLogger(__name__)

MAGIC = b"EMB1"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sIIIB3x")
HEADER_SIZE = _HEADER.size

K_DIRECTIONS = 4
DIRECTIONS = ("N", "E", "S", "W")
UNIT_TOL = 1e-3

MANIFEST_FORMAT = "crossview.quadruplets/1"
PROMPTS_FORMAT = "crossview.prompts/1"
CHECKPOINT_FORMAT = "crossview.checkpoint/1"


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _read_json(path):
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a UTF-8 JSON document ({exc})") from None


# matrices


def encode_matrix(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ParameterError(f"EMB1 stores 2-d matrices, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("refusing to store non-finite values")
    rows, dim = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, rows, dim, DTYPE_FLOAT32) + payload


def decode_matrix(blob: bytes, source="<bytes>") -> np.ndarray:
    if len(blob) < HEADER_SIZE:
        if not MAGIC.startswith(blob[:4]):
            raise FormatError(f"{source}: bad magic {blob[:4]!r}")
        raise CorruptionError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, rows, dim, dtype = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise VersionError(f"{source}: unsupported dtype code {dtype}")
    if blob[17:20] != b"\0\0\0":
        raise CorruptionError(f"{source}: nonzero header padding")
    expected = rows * dim * 4
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise CorruptionError(
            f"{source}: header declares {rows}x{dim} ({expected} payload bytes), found {actual}"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=HEADER_SIZE)
    arr = arr.astype(np.float32).reshape(rows, dim)
    if not np.all(np.isfinite(arr)):
        raise CorruptionError(f"{source}: payload contains NaN or Inf")
    return arr


def save_matrix(values, path):
    Path(path).write_bytes(encode_matrix(values))


def load_matrix(path) -> np.ndarray:
    """Load an EMB1 file as a float32 ``rows x dim`` array."""
    return decode_matrix(Path(path).read_bytes(), source=str(path))


def _load_any_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.floating):
            raise FormatError(f"{path}: expected a 2-d float array, got {arr.dtype} {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise CorruptionError(f"{path}: contains NaN or Inf")
        return arr.astype(np.float32)
    return load_matrix(path)


def unit_rows(values, tol=UNIT_TOL, source="matrix") -> np.ndarray:
    """Upconvert to float64 and renormalize rows within ``tol`` of unit norm."""
    arr = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise SchemaError(
            f"{source}: row {int(bad[0])} has norm {norms[bad[0]]:.6g}, outside 1 +/- {tol}"
        )
    return arr / norms[:, None]


# quadruplet datasets


@dataclass
class Location:
    id: str
    lat: float
    lon: float
    ground_rows: tuple[int, int, int, int]
    sat_row: int
    labels: tuple[int, ...] | None = None
    split: str = "train"

    def to_json(self):
        d = {
            "id": self.id,
            "lat": self.lat,
            "lon": self.lon,
            "ground_rows": list(self.ground_rows),
            "sat_row": self.sat_row,
            "split": self.split,
        }
        if self.labels is not None:
            d["labels"] = list(self.labels)
        return d


@dataclass
class QuadrupletDataset:
    locations: list[Location]
    ground: np.ndarray  # float64, unit rows
    sat: np.ndarray  # float64
    ground_ref: str = "ground.emb1"
    sat_ref: str = "sat.emb1"
    sat_normalized: bool = True
    class_names: list[str] | None = None
    root: Path | None = None
    # float32 payloads as read from disk; written back verbatim on save
    ground_stored: np.ndarray | None = field(default=None, repr=False)
    sat_stored: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.locations)

    @property
    def dim(self):
        return self.ground.shape[1]

    @property
    def sat_dim(self):
        return self.sat.shape[1]

    @property
    def ids(self):
        return [loc.id for loc in self.locations]

    def quads(self, idx=None) -> np.ndarray:
        """Ground embeddings as an ``(n, 4, D)`` array in N, E, S, W order."""
        locs = self.locations if idx is None else [self.locations[i] for i in idx]
        rows = np.array([loc.ground_rows for loc in locs], dtype=np.int64).reshape(-1, K_DIRECTIONS)
        return self.ground[rows]

    def sat_features(self, idx=None) -> np.ndarray:
        locs = self.locations if idx is None else [self.locations[i] for i in idx]
        return self.sat[np.array([loc.sat_row for loc in locs], dtype=np.int64)]

    def single_labels(self) -> np.ndarray:
        out = []
        for loc in self.locations:
            if not loc.labels or len(loc.labels) != 1:
                raise SchemaError(f"location {loc.id!r} does not carry exactly one label")
            out.append(loc.labels[0])
        return np.array(out, dtype=np.int64)

    def label_sets(self) -> list[set[int]]:
        return [set(loc.labels or ()) for loc in self.locations]

    def manifest(self):
        doc = {
            "format": MANIFEST_FORMAT,
            "directions": list(DIRECTIONS),
            "ground_matrix": {"path": self.ground_ref, "normalized": True},
            "sat_matrix": {"path": self.sat_ref, "normalized": self.sat_normalized},
            "locations": [loc.to_json() for loc in self.locations],
        }
        if self.class_names is not None:
            doc["class_names"] = list(self.class_names)
        return doc


def _req(d, key, kind, where):
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected an object")
    if key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    val = d[key]
    if kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def _parse_labels(raw, where, n_classes):
    if raw is None:
        return None
    if isinstance(raw, int) and not isinstance(raw, bool):
        raw = [raw]
    if not isinstance(raw, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in raw):
        raise SchemaError(f"{where}: labels must be an integer or a list of integers")
    for c in raw:
        if c < 0 or (n_classes is not None and c >= n_classes):
            raise BadReferenceError(f"{where}: label {c} out of range")
    return tuple(raw)


def _matrix_ref(doc, key):
    ref = doc.get(key)
    if isinstance(ref, str):
        return ref, True
    if not isinstance(ref, dict):
        raise SchemaError(f"manifest: missing or malformed {key!r}")
    path = _req(ref, "path", str, key)
    normalized = ref.get("normalized", True)
    if not isinstance(normalized, bool):
        raise SchemaError(f"manifest: {key}.normalized must be a boolean")
    return path, normalized


def parse_manifest(doc, ground, sat, root=None, ground_ref="ground.emb1", sat_ref="sat.emb1",
                   sat_normalized=True, stored=(None, None)) -> QuadrupletDataset:
    if not isinstance(doc, dict):
        raise SchemaError("manifest: expected a JSON object")
    fmt = doc.get("format", MANIFEST_FORMAT)
    if fmt != MANIFEST_FORMAT:
        raise VersionError(f"manifest: unsupported format {fmt!r}")
    directions = doc.get("directions", list(DIRECTIONS))
    if directions != list(DIRECTIONS):
        raise SchemaError(f"manifest: directions must be {list(DIRECTIONS)}")
    class_names = doc.get("class_names")
    if class_names is not None and (
        not isinstance(class_names, list) or not all(isinstance(c, str) for c in class_names)
    ):
        raise SchemaError("manifest: class_names must be a list of strings")
    n_classes = len(class_names) if class_names is not None else None
    raw_locs = _req(doc, "locations", list, "manifest")
    if not raw_locs:
        raise SchemaError("manifest: no locations")
    seen = set()
    locations = []
    for i, raw in enumerate(raw_locs):
        where = f"locations[{i}]"
        loc_id = _req(raw, "id", str, where)
        if loc_id in seen:
            raise SchemaError(f"{where}: duplicate id {loc_id!r}")
        seen.add(loc_id)
        lat = float(_req(raw, "lat", float, where))
        lon = float(_req(raw, "lon", float, where))
        if not -90.0 <= lat <= 90.0:
            raise SchemaError(f"{where}: lat {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise SchemaError(f"{where}: lon {lon} outside [-180, 180]")
        grows = _req(raw, "ground_rows", list, where)
        if len(grows) != K_DIRECTIONS:
            raise SchemaError(f"{where}: expected {K_DIRECTIONS} ground rows (N,E,S,W), got {len(grows)}")
        for r in grows:
            if not isinstance(r, int) or isinstance(r, bool):
                raise SchemaError(f"{where}: ground row {r!r} is not an integer")
            if not 0 <= r < ground.shape[0]:
                raise BadReferenceError(f"{where}: ground row {r} out of range [0, {ground.shape[0]})")
        srow = _req(raw, "sat_row", int, where)
        if not 0 <= srow < sat.shape[0]:
            raise BadReferenceError(f"{where}: sat row {srow} out of range [0, {sat.shape[0]})")
        labels = _parse_labels(raw.get("labels"), where, n_classes)
        split = raw.get("split", "train")
        if not isinstance(split, str):
            raise SchemaError(f"{where}: split must be a string")
        locations.append(Location(loc_id, lat, lon, tuple(grows), srow, labels, split))
    return QuadrupletDataset(
        locations, ground, sat, ground_ref, sat_ref, sat_normalized, class_names,
        Path(root) if root is not None else None, stored[0], stored[1],
    )


def load_dataset(manifest_path) -> QuadrupletDataset:
    """Load and fully validate a quadruplet manifest and its matrices.

    ``manifest_path`` may be the JSON file or a directory containing
    ``manifest.json``.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = _read_json(manifest_path)
    if not isinstance(doc, dict):
        raise SchemaError(f"{manifest_path}: expected a JSON object")
    root = manifest_path.parent
    gref, gnorm = _matrix_ref(doc, "ground_matrix")
    sref, snorm = _matrix_ref(doc, "sat_matrix")
    if not gnorm:
        raise SchemaError("manifest: ground embeddings must be marked normalized")
    ground32 = _load_ref(root, gref)
    sat32 = _load_ref(root, sref)
    ground = unit_rows(ground32, source=gref)
    sat = unit_rows(sat32, source=sref) if snorm else sat32.astype(np.float64)
    return parse_manifest(doc, ground, sat, root, gref, sref, snorm, (ground32, sat32))


def _load_ref(root, ref):
    path = root / ref
    if not path.is_file():
        raise BadReferenceError(f"referenced matrix {ref!r} not found under {root}")
    return _load_any_matrix(path)


def _payload(working, stored):
    """The float32 bytes to write: the on-disk payload if it still describes
    the working matrix, else the working matrix itself."""
    if stored is not None and stored.shape == working.shape:
        s64 = stored.astype(np.float64)
        norms = np.linalg.norm(s64, axis=1, keepdims=True)
        if np.all(norms > 0) and np.allclose(s64 / norms, working, rtol=0, atol=1e-6):
            return stored
    return working


def save_dataset(ds: QuadrupletDataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_matrix(_payload(ds.ground, ds.ground_stored), directory / ds.ground_ref)
    save_matrix(ds.sat if not ds.sat_normalized else _payload(ds.sat, ds.sat_stored), directory / ds.sat_ref)
    dump_json(ds.manifest(), directory / "manifest.json")
    return directory / "manifest.json"


# prompt sets


@dataclass
class Prompt:
    row: int
    text: str | None = None
    score: float | None = None


@dataclass
class PromptClass:
    name: str
    prompts: list[Prompt]


@dataclass
class PromptSet:
    classes: list[PromptClass]
    matrix: np.ndarray  # float64, unit rows
    matrix_ref: str | None = None
    view_tag: str | None = None
    meta: dict = field(default_factory=dict)
    stored: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_classes(self):
        return len(self.classes)

    @classmethod
    def from_tensor(cls, tensor, names=None, **kwargs) -> "PromptSet":
        """Build from a ``(C, T, D)`` array, rows in class-major order."""
        tensor = np.asarray(tensor, dtype=np.float64)
        if tensor.ndim != 3:
            raise DimensionError(f"expected a (C, T, D) prompt tensor, got shape {tensor.shape}")
        C, T, D = tensor.shape
        names = names or [f"class_{c:02d}" for c in range(C)]
        classes = [
            PromptClass(names[c], [Prompt(c * T + t, f"{names[c]} prompt {t}") for t in range(T)])
            for c in range(C)
        ]
        return cls(classes, tensor.reshape(C * T, D), **kwargs)

    @property
    def counts(self):
        return [len(c.prompts) for c in self.classes]

    @property
    def unequal_T(self) -> bool:
        return len(set(self.counts)) > 1

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    def class_rows(self, c) -> np.ndarray:
        return self.matrix[[p.row for p in self.classes[c].prompts]]

    def tensor(self) -> np.ndarray:
        """Prompt embeddings as ``(C, T, D)``; requires equal T."""
        if self.unequal_T:
            raise ContractError(f"prompt counts differ across classes: {self.counts}")
        return np.stack([self.class_rows(c) for c in range(self.n_classes)])

    def to_json(self):
        classes = []
        for c in self.classes:
            prompts = []
            for p in c.prompts:
                d = {"row": p.row}
                if p.text is not None:
                    d["text"] = p.text
                if p.score is not None:
                    d["score"] = p.score
                prompts.append(d)
            classes.append({"name": c.name, "prompts": prompts})
        doc = {"format": PROMPTS_FORMAT, "matrix_ref": self.matrix_ref, "classes": classes}
        if self.view_tag is not None:
            doc["view_tag"] = self.view_tag
        if self.meta:
            doc["meta"] = self.meta
        if self.unequal_T:
            doc["unequal_T"] = True
        return doc

    def subset(self, selection, scores=None) -> "PromptSet":
        """New set with ``selection[c]`` (prompt positions) kept for class c;
        the matrix is compacted to the kept rows."""
        rows, classes = [], []
        for c, keep in enumerate(selection):
            prompts = []
            for t in keep:
                p = self.classes[c].prompts[int(t)]
                score = p.score if scores is None else float(scores[c][int(t)])
                prompts.append(Prompt(len(rows), p.text, score))
                rows.append(p.row)
            classes.append(PromptClass(self.classes[c].name, prompts))
        take = np.array(rows, dtype=np.int64)
        matrix = self.matrix[take].reshape(len(rows), self.matrix.shape[1])
        stored = None if self.stored is None else self.stored[take].reshape(matrix.shape)
        return PromptSet(classes, matrix, None, self.view_tag, dict(self.meta), stored)


def load_prompt_set(path) -> PromptSet:
    path = Path(path)
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    fmt = doc.get("format", PROMPTS_FORMAT)
    if fmt != PROMPTS_FORMAT:
        raise VersionError(f"{path}: unsupported format {fmt!r}")
    ref = _req(doc, "matrix_ref", str, str(path))
    stored = _load_ref(path.parent, ref)
    matrix = stored.astype(np.float64)
    raw_classes = _req(doc, "classes", list, str(path))
    if not raw_classes:
        raise SchemaError(f"{path}: no classes")
    classes = []
    for i, rc in enumerate(raw_classes):
        where = f"classes[{i}]"
        name = _req(rc, "name", str, where)
        rps = _req(rc, "prompts", list, where)
        if not rps:
            raise SchemaError(f"{where}: class {name!r} has no prompts")
        prompts = []
        for j, rp in enumerate(rps):
            pw = f"{where}.prompts[{j}]"
            row = _req(rp, "row", int, pw)
            if not 0 <= row < matrix.shape[0]:
                raise BadReferenceError(f"{pw}: row {row} out of range [0, {matrix.shape[0]})")
            text = rp.get("text")
            if text is not None and not isinstance(text, str):
                raise SchemaError(f"{pw}: text must be a string")
            score = rp.get("score")
            if score is not None:
                score = float(_req(rp, "score", float, pw))
            prompts.append(Prompt(row, text, score))
        classes.append(PromptClass(name, prompts))
    view_tag = doc.get("view_tag")
    if view_tag is not None and not isinstance(view_tag, str):
        raise SchemaError(f"{path}: view_tag must be a string")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise SchemaError(f"{path}: meta must be an object")

    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < 1e-12):
        raise SchemaError(f"{path}: prompt matrix has a zero row")
    off = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if off.size:
        warnings.warn(
            f"{path}: {off.size} prompt row(s) not unit-norm (first: row {int(off[0])}, "
            f"norm {norms[off[0]]:.6g}); renormalized",
            stacklevel=2,
        )
    matrix = matrix / norms[:, None]
    if off.size:
        stored = None
    ps = PromptSet(classes, matrix, ref, view_tag, meta, stored)
    if ps.unequal_T:
        log.warning("%s: unequal prompt counts per class %s", path, ps.counts)
    return ps


def save_prompt_set(ps: PromptSet, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if ps.matrix_ref is None:
        ps.matrix_ref = path.with_suffix(".emb1").name
    save_matrix(_payload(ps.matrix, ps.stored), path.parent / ps.matrix_ref)
    dump_json(ps.to_json(), path)


# checkpoints


@dataclass
class ModelCheckpoint:
    dims: dict
    params: dict  # name -> float64 array
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    pool_mode: str = "avg"
    attention_normalization: str = "softmax"
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    opt_betas: tuple = (0.9, 0.999)
    opt_eps: float = 1e-8


def _as_2d(arr):
    arr = np.asarray(arr)
    return arr.reshape(1, -1) if arr.ndim <= 1 else arr


def _tensor_file(prefix, name):
    return f"{prefix}{name}.emb1"


def save_checkpoint(ck: ModelCheckpoint, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors, moments = {}, {}
    for name in sorted(ck.params):
        arr = np.asarray(ck.params[name])
        fname = _tensor_file("", name)
        save_matrix(_as_2d(arr), directory / fname)
        tensors[name] = {"file": fname, "shape": list(arr.shape)}
    for name in sorted(ck.opt_m):
        mf, vf = _tensor_file("opt_m.", name), _tensor_file("opt_v.", name)
        save_matrix(_as_2d(ck.opt_m[name]), directory / mf)
        save_matrix(_as_2d(ck.opt_v[name]), directory / vf)
        moments[name] = {"m": mf, "v": vf, "shape": list(np.shape(ck.opt_m[name]))}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dims": ck.dims,
        "tensors": tensors,
        "optimizer": {
            "step": ck.opt_step,
            "betas": list(ck.opt_betas),
            "eps": ck.opt_eps,
            "moments": moments,
        },
        "hyperparameters": ck.hyperparameters,
        "seed": ck.seed,
        "epoch": ck.epoch,
        "pool_mode": ck.pool_mode,
        "attention_normalization": ck.attention_normalization,
    }
    dump_json(doc, directory / "checkpoint.json")


def _load_tensor(directory, fname, shape, name):
    if not isinstance(fname, str) or not isinstance(shape, list):
        raise SchemaError(f"checkpoint tensor {name!r}: malformed entry")
    path = directory / fname
    if not path.is_file():
        raise BadReferenceError(f"checkpoint tensor {name!r}: file {fname!r} missing")
    arr = load_matrix(path)
    if int(np.prod(shape)) != arr.size:
        raise CorruptionError(f"checkpoint tensor {name!r}: declared shape {shape} vs {arr.shape}")
    return arr.astype(np.float64).reshape(shape)


def load_checkpoint(directory) -> ModelCheckpoint:
    directory = Path(directory)
    doc = _read_json(directory / "checkpoint.json")
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{directory}: not a {CHECKPOINT_FORMAT} checkpoint")
    try:
        params = {
            name: _load_tensor(directory, e.get("file"), e.get("shape"), name)
            for name, e in doc["tensors"].items()
        }
        opt = doc["optimizer"]
        m, v = {}, {}
        for name, e in opt["moments"].items():
            m[name] = _load_tensor(directory, e.get("m"), e.get("shape"), name)
            v[name] = _load_tensor(directory, e.get("v"), e.get("shape"), name)
        return ModelCheckpoint(
            dims=doc["dims"],
            params=params,
            hyperparameters=doc["hyperparameters"],
            seed=doc["seed"],
            epoch=doc["epoch"],
            pool_mode=doc["pool_mode"],
            attention_normalization=doc.get("attention_normalization", "softmax"),
            opt_m=m,
            opt_v=v,
            opt_step=opt["step"],
            opt_betas=tuple(opt["betas"]),
            opt_eps=opt["eps"],
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"{directory}: malformed checkpoint metadata ({exc!r})") from None


# synthetic data


def _rotation(dim, rng):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _normalize_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_dataset(classes=10, per_class=50, dim=32, noise=0.1, seed=0, prompts_per_class=10,
                  prompt_noise=None, test_fraction=0.2):
    """Seeded stand-in for paired ground/satellite embeddings.

    Returns ``(dataset, clean_prompts, corrupted_prompts)``. Class anchors are
    orthonormal when ``classes <= dim``. Ground rows are
    ``normalize(anchor + noise)``; satellite rows are
    ``normalize(R @ anchor + noise)`` for a fixed random rotation ``R``, so the
    satellite space starts out misaligned with the prompts.
    """
    if classes < 2 or dim < 4 or per_class < 2:
        raise ParameterError("synth_dataset needs classes >= 2, dim >= 4, per_class >= 2")
    if noise < 0 or prompts_per_class < 2 or not 0.0 <= test_fraction < 1.0:
        raise ParameterError("synth_dataset needs noise >= 0, prompts_per_class >= 2, test_fraction in [0, 1)")
    prompt_noise = noise if prompt_noise is None else prompt_noise
    rng = np.random.default_rng(seed)

    if classes <= dim:
        anchors = _rotation(dim, rng)[:classes]
    else:
        anchors = _normalize_rows(rng.standard_normal((classes, dim)))
    rot = _rotation(dim, rng)

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    g = anchors[labels][:, None, :] + noise * rng.standard_normal((n, K_DIRECTIONS, dim))
    ground = _normalize_rows(g).reshape(n * K_DIRECTIONS, dim)
    sat = _normalize_rows(anchors[labels] @ rot.T + noise * rng.standard_normal((n, dim)))
    lat = rng.uniform(35.0, 70.0, n)
    lon = rng.uniform(-10.0, 30.0, n)
    n_test = int(round(per_class * test_fraction))

    locations = []
    for i in range(n):
        split = "test" if (i % per_class) >= per_class - n_test else "train"
        locations.append(Location(
            id=f"loc{i:05d}",
            lat=round(float(lat[i]), 6),
            lon=round(float(lon[i]), 6),
            ground_rows=tuple(range(i * K_DIRECTIONS, (i + 1) * K_DIRECTIONS)),
            sat_row=i,
            labels=(int(labels[i]),),
            split=split,
        ))
    names = [f"class_{c:02d}" for c in range(classes)]
    # round-trip through float32 so in-memory data equals what a reload gives
    ground32, sat32 = ground.astype(np.float32), sat.astype(np.float32)
    ds = QuadrupletDataset(
        locations, unit_rows(ground32), unit_rows(sat32), class_names=names,
        ground_stored=ground32, sat_stored=sat32,
    )

    T = prompts_per_class
    clean = _normalize_rows(anchors[:, None, :] + prompt_noise * rng.standard_normal((classes, T, dim)))
    corrupted = clean.copy()
    for c in range(classes):
        swap = rng.choice(T, size=T // 2, replace=False)
        corrupted[c, swap] = _normalize_rows(rng.standard_normal((swap.size, dim)))

    def prompt_set(tensor, tag):
        stored = tensor.reshape(-1, dim).astype(np.float32)
        ps = PromptSet.from_tensor(unit_rows(stored).reshape(tensor.shape), names,
                                   matrix_ref=f"prompts_{tag}.emb1", view_tag=tag)
        ps.stored = stored
        return ps

    return ds, prompt_set(clean, "clean"), prompt_set(corrupted, "corrupted")


def write_synth(directory, ds, clean, corrupted):
    directory = Path(directory)
    save_dataset(ds, directory)
    save_prompt_set(clean, directory / "prompts_clean.json")
    save_prompt_set(corrupted, directory / "prompts_corrupted.json")

