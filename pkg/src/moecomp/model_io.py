"""MoE model containers, synthetic generation and on-disk formats.

Directory layout::

    model.json             manifest: architecture, tensor shapes, SHA-256 sums
    tensors/<name>.bin     raw float32, little-endian, row-major
    compression.json       (compressed artifacts only) plans, ranks, config, report
    train_log.txt          (compressed artifacts only) step / loss / scaled loss lines
    proj/<kind>.rfidproj   (compressed artifacts only) shared sparse projections

Tensors are computed in float64 and stored as float32; values are rounded
to float32 before saving, so a save/load cycle is bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import BasisBank, FactorState, reconstruct_all
from .errors import ArgumentError, FormatError, IntegrityError, ShapeError
from .projection import SparseProjection, decode_projection, encode_projection
from .routing import GroupPlan

__all__ = [
    "MoELayer",
    "MoEModel",
    "SyntheticSpec",
    "CompressedKind",
    "CompressedLayer",
    "CompressedModel",
    "KINDS",
    "FORMAT_VERSION",
    "RATIO_DEFINITION",
    "generate_synthetic",
    "save_model",
    "load_model",
    "save_compressed",
    "load_compressed",
    "decompress",
    "parameter_report",
    "model_hash",
]

KINDS = ("up", "gate")
FORMAT_VERSION = 1
RATIO_DEFINITION = ("1 - compressed/original float parameters, counted over the up and gate "
                    "expert matrices only (A blocks, B rows, mixing coefficients, residual "
                    "vectors); down projections and routers are stored dense and excluded; "
                    "projection index metadata is reported separately")


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class MoELayer:
    up: np.ndarray      # (n, p, d)
    gate: np.ndarray    # (n, p, d)
    down: np.ndarray    # (n, d, p)
    router: np.ndarray  # (n, d)
    top_k: int

    def __post_init__(self):
        n, p, d = self.up.shape
        if self.gate.shape != (n, p, d):
            raise ShapeError(f"gate {self.gate.shape} vs up {self.up.shape}")
        if self.down.shape != (n, d, p):
            raise ShapeError(f"down {self.down.shape}, expected {(n, d, p)}")
        if self.router.shape != (n, d):
            raise ShapeError(f"router {self.router.shape}, expected {(n, d)}")
        if not 1 <= self.top_k <= n:
            raise ShapeError(f"top_k={self.top_k} outside [1, {n}]")

    @property
    def n(self) -> int:
        return self.up.shape[0]

    @property
    def p(self) -> int:
        return self.up.shape[1]

    @property
    def d(self) -> int:
        return self.up.shape[2]

    def kind(self, name: str) -> np.ndarray:
        return {"up": self.up, "gate": self.gate}[name]


@dataclass
class MoEModel:
    layers: list[MoELayer]

    @property
    def shape(self) -> tuple[int, int, int]:
        l0 = self.layers[0]
        return l0.n, l0.p, l0.d

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.up"] = layer.up
            out[f"layer{i}.gate"] = layer.gate
            out[f"layer{i}.down"] = layer.down
            out[f"layer{i}.router"] = layer.router
        return out


@dataclass
class SyntheticSpec:
    n: int = 32
    p: int = 16
    d: int = 32
    layers: int = 2
    top_k: int = 2
    spectral_decay: float = 0.5
    router_skew: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "p", "d", "layers", "top_k"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"synthetic spec: {name} must be positive")
        if self.top_k > self.n:
            raise ArgumentError("synthetic spec: top_k exceeds n")
        if self.spectral_decay < 0 or self.router_skew < 0:
            raise ArgumentError("synthetic spec: decay and skew must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"synthetic spec: unknown fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _spectral_matrix(rng, p, d, decay) -> np.ndarray:
    r = min(p, d)
    sigma = np.exp(-decay * np.arange(r))
    # scale so rows have unit norm on average: W @ x has O(1) entries for x ~ N(0, I)
    sigma *= np.sqrt(p / np.sum(sigma ** 2))
    return (_orthonormal(rng, p, r) * sigma) @ _orthonormal(rng, d, r).T


def generate_synthetic(spec: SyntheticSpec) -> MoEModel:
    """Seeded MoE whose up/gate matrices have known spectra ``sigma_i ~ exp(-decay*i)``.

    Router rows are random unit vectors scaled by ``exp(router_skew * g_e)``
    with ``g_e ~ N(0, 1)`` per expert; larger rows win top-k more often, so the
    skew controls routing imbalance (zero skew gives near-uniform routing).
    """
    layers = []
    for li in range(spec.layers):
        rng = np.random.default_rng([spec.seed, li])
        up = np.stack([_spectral_matrix(rng, spec.p, spec.d, spec.spectral_decay)
                       for _ in range(spec.n)])
        gate = np.stack([_spectral_matrix(rng, spec.p, spec.d, spec.spectral_decay)
                         for _ in range(spec.n)])
        down = rng.standard_normal((spec.n, spec.d, spec.p)) / np.sqrt(spec.p)
        rows = rng.standard_normal((spec.n, spec.d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        popularity = np.exp(spec.router_skew * rng.standard_normal(spec.n))
        router = rows * popularity[:, None]
        layers.append(MoELayer(up=_f32(up), gate=_f32(gate), down=_f32(down),
                               router=_f32(router), top_k=spec.top_k))
    return MoEModel(layers=layers)


def model_hash(model: MoEModel) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.tensors().items()):
        h.update(name.encode())
        h.update(np.asarray(t, dtype="<f4").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- #
# low-level tensor directory I/O
# --------------------------------------------------------------------------- #

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _write_tensors(root: Path, tensors: dict[str, np.ndarray]) -> dict:
    entries = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rel = f"tensors/{name}.bin"
        _atomic_write(root / rel, blob)
        entries[name] = {"file": rel, "shape": list(arr.shape), "dtype": "float32",
                         "sha256": hashlib.sha256(blob).hexdigest()}
    return entries


def _read_tensors(root: Path, entries: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, e in entries.items():
        path = root / e["file"]
        if not path.is_file():
            raise FormatError(f"missing blob for tensor {name!r}: {path}")
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise IntegrityError(f"checksum mismatch for tensor {name!r} ({path})")
        shape = tuple(e["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(blob) != expected:
            raise FormatError(f"tensor {name!r}: {len(blob)} bytes, shape {shape} "
                              f"needs {expected}")
        out[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)
    return out


def _read_manifest(root: Path, filename: str, kind: str) -> dict:
    path = root / filename
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: manifest not found")
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})")
    if manifest.get("format") != kind:
        raise FormatError(f"{path}: expected format {kind!r}, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {manifest.get('version')!r}, "
                          f"this build reads version {FORMAT_VERSION}")
    return manifest


def save_model(model: MoEModel, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n, p, d = model.shape
    manifest = {
        "format": "moe-model",
        "version": FORMAT_VERSION,
        "architecture": {"n": n, "p": p, "d": d, "layers": len(model.layers),
                         "top_k": [layer.top_k for layer in model.layers]},
        "tensors": _write_tensors(root, model.tensors()),
    }
    _atomic_write(root / "model.json", _dump_json(manifest))


def load_model(path) -> MoEModel:
    root = Path(path)
    manifest = _read_manifest(root, "model.json", "moe-model")
    arch = manifest["architecture"]
    t = _read_tensors(root, manifest["tensors"])
    layers = []
    for i in range(arch["layers"]):
        try:
            layers.append(MoELayer(up=t[f"layer{i}.up"], gate=t[f"layer{i}.gate"],
                                   down=t[f"layer{i}.down"], router=t[f"layer{i}.router"],
                                   top_k=int(arch["top_k"][i])))
        except KeyError as exc:
            raise FormatError(f"{root}: manifest lacks tensor {exc}")
    model = MoEModel(layers=layers)
    if model.shape != (arch["n"], arch["p"], arch["d"]):
        raise FormatError(f"{root}: tensor shapes {model.shape} contradict architecture")
    return model


# --------------------------------------------------------------------------- #
# compressed artifacts
# --------------------------------------------------------------------------- #

@dataclass
class CompressedKind:
    """Factors of one (layer, matrix kind) problem plus the metadata behind them."""

    plan: GroupPlan
    A: list[np.ndarray]          # per group (k, p, K_g)
    bases: list[np.ndarray]      # per group (K_g, d)
    alpha: np.ndarray            # (n, m)
    eta: Optional[np.ndarray]    # (m, a) or None
    activation: str
    meta: dict = field(default_factory=dict)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(int(b.shape[0]) for b in self.bases)

    def float_parameter_count(self) -> int:
        count = sum(a.size for a in self.A) + sum(b.size for b in self.bases) + self.alpha.size
        return int(count + (0 if self.eta is None else self.eta.size))

    def to_state(self, p: int, d: int,
                 projection: Optional[SparseProjection]) -> FactorState:
        return FactorState(targets=np.zeros((self.plan.n_experts, p, d)), plan=self.plan,
                           A=self.A, bank=BasisBank(self.bases), alpha=self.alpha,
                           eta=self.eta, projection=projection if self.eta is not None else None,
                           activation=self.activation)


@dataclass
class CompressedLayer:
    top_k: int
    router: np.ndarray
    down: np.ndarray
    kinds: dict[str, CompressedKind]


@dataclass
class CompressedModel:
    n: int
    p: int
    d: int
    layers: list[CompressedLayer]
    projections: dict[str, SparseProjection]
    config: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def reconstruct(self, layer: int, kind: str) -> np.ndarray:
        """Decompressed ``(n, p, d)`` weights of one matrix kind."""
        ck = self.layers[layer].kinds[kind]
        return reconstruct_all(ck.to_state(self.p, self.d, self.projections.get(kind)))


def _projection_file(kind: str) -> str:
    return f"proj/{kind}.rfidproj"


def decompress(cm: CompressedModel) -> MoEModel:
    layers = []
    for i, cl in enumerate(cm.layers):
        layers.append(MoELayer(up=cm.reconstruct(i, "up"), gate=cm.reconstruct(i, "gate"),
                               down=cl.down, router=cl.router, top_k=cl.top_k))
    return MoEModel(layers=layers)


def _train_log_text(cm: CompressedModel) -> str:
    lines = []
    for i, cl in enumerate(cm.layers):
        for kind, ck in cl.kinds.items():
            for e in ck.meta.get("training", {}).get("log", []):
                lines.append(f"layer{i}.{kind} step {e['step']} loss {e['loss']:.9e} "
                             f"scaled_loss {e['scaled_loss']:.9e}")
    return "\n".join(lines) + ("\n" if lines else "")


def save_compressed(cm: CompressedModel, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    layer_docs = []
    for i, cl in enumerate(cm.layers):
        tensors[f"layer{i}.down"] = cl.down
        tensors[f"layer{i}.router"] = cl.router
        kinds_doc = {}
        for kind, ck in cl.kinds.items():
            pre = f"layer{i}.{kind}"
            for g, (A, B) in enumerate(zip(ck.A, ck.bases)):
                tensors[f"{pre}.A{g}"] = A
                tensors[f"{pre}.B{g}"] = B
            tensors[f"{pre}.alpha"] = ck.alpha
            if ck.eta is not None:
                tensors[f"{pre}.eta"] = ck.eta
            kinds_doc[kind] = {
                "activation": ck.activation,
                "plan": ck.plan.to_dict(),
                "ranks": list(ck.ranks),
                "residual": ck.eta is not None,
                "projection": _projection_file(kind) if ck.eta is not None else None,
                "float_parameters": ck.float_parameter_count(),
                **ck.meta,
            }
        layer_docs.append({"layer": i, "top_k": cl.top_k, "kinds": kinds_doc})

    proj_docs = {}
    for kind, P in sorted(cm.projections.items()):
        blob = encode_projection(P)
        _atomic_write(root / _projection_file(kind), blob)
        proj_docs[kind] = {"file": _projection_file(kind), "seed": P.seed, "D": P.D, "a": P.a,
                           "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest(),
                           "shared_across": "all groups and layers of this matrix kind"}

    manifest = {
        "format": "moe-compressed",
        "version": FORMAT_VERSION,
        "architecture": {"n": cm.n, "p": cm.p, "d": cm.d, "layers": len(cm.layers),
                         "top_k": [cl.top_k for cl in cm.layers]},
        "tensors": _write_tensors(root, tensors),
    }
    compression = {
        "format": "moe-compression-info",
        "version": FORMAT_VERSION,
        "ratio_definition": RATIO_DEFINITION,
        "config": cm.config,
        "layers": layer_docs,
        "projections": proj_docs,
        "parameter_report": cm.report,
    }
    _atomic_write(root / "compression.json", _dump_json(compression))
    _atomic_write(root / "train_log.txt", _train_log_text(cm).encode())
    _atomic_write(root / "model.json", _dump_json(manifest))


def _kind_order(kind: str):
    return (KINDS.index(kind), "") if kind in KINDS else (len(KINDS), kind)


def load_compressed(path) -> CompressedModel:
    root = Path(path)
    manifest = _read_manifest(root, "model.json", "moe-compressed")
    info = _read_manifest(root, "compression.json", "moe-compression-info")
    arch = manifest["architecture"]
    t = _read_tensors(root, manifest["tensors"])

    projections = {}
    for kind, pd in info["projections"].items():
        ppath = root / pd["file"]
        if not ppath.is_file():
            raise FormatError(f"missing projection blob {ppath}")
        blob = ppath.read_bytes()
        if hashlib.sha256(blob).hexdigest() != pd["sha256"]:
            raise IntegrityError(f"checksum mismatch for projection {kind!r} ({ppath})")
        projections[kind] = decode_projection(blob)

    layers = []
    try:
        for ld in info["layers"]:
            i = ld["layer"]
            kinds = {}
            for kind in sorted(ld["kinds"], key=_kind_order):
                kd = ld["kinds"][kind]
                pre = f"layer{i}.{kind}"
                plan = GroupPlan.from_dict(kd["plan"])
                meta = {k: v for k, v in kd.items()
                        if k not in ("activation", "plan", "ranks", "residual", "projection",
                                     "float_parameters")}
                ck = CompressedKind(
                    plan=plan,
                    A=[t[f"{pre}.A{g}"] for g in range(plan.m)],
                    bases=[t[f"{pre}.B{g}"] for g in range(plan.m)],
                    alpha=t[f"{pre}.alpha"],
                    eta=t[f"{pre}.eta"] if kd["residual"] else None,
                    activation=kd["activation"], meta=meta)
                if list(ck.ranks) != kd["ranks"]:
                    raise FormatError(f"{pre}: stored ranks {kd['ranks']} != blob ranks {ck.ranks}")
                if ck.float_parameter_count() != kd["float_parameters"]:
                    raise FormatError(f"{pre}: parameter count in manifest disagrees with blobs")
                if ck.eta is not None and kind not in projections:
                    raise FormatError(f"{pre}: residual present but projection missing")
                kinds[kind] = ck
            layers.append(CompressedLayer(top_k=ld["top_k"], router=t[f"layer{i}.router"],
                                          down=t[f"layer{i}.down"], kinds=kinds))
    except KeyError as exc:
        raise FormatError(f"{root}: manifest references missing tensor or field {exc}")
    return CompressedModel(n=arch["n"], p=arch["p"], d=arch["d"], layers=layers,
                           projections=projections, config=info["config"],
                           report=info["parameter_report"])


def parameter_report(original: MoEModel, compressed: CompressedModel) -> dict:
    """Float-parameter accounting of the compressed up/gate matrices."""
    n, p, d = original.shape
    if (n, p, d) != (compressed.n, compressed.p, compressed.d) or \
            len(original.layers) != len(compressed.layers):
        raise ShapeError("parameter_report: architectures differ")
    layers = []
    tot_orig = tot_comp = 0
    for i, cl in enumerate(compressed.layers):
        per_kind = {}
        for kind in KINDS:
            ck = cl.kinds[kind]
            orig = n * p * d
            comp = ck.float_parameter_count()
            per_kind[kind] = {
                "original": orig, "compressed": comp,
                "A": int(sum(a.size for a in ck.A)),
                "B": int(sum(b.size for b in ck.bases)),
                "alpha": int(ck.alpha.size),
                "eta": 0 if ck.eta is None else int(ck.eta.size),
                "ratio": 1.0 - comp / orig,
            }
            tot_orig += orig
            tot_comp += comp
        layers.append({"layer": i, "kinds": per_kind})
    index_bytes = {kind: len(encode_projection(P)) for kind, P in compressed.projections.items()}
    return {
        "ratio_definition": RATIO_DEFINITION,
        "layers": layers,
        "original": tot_orig,
        "compressed": tot_comp,
        "ratio": 1.0 - tot_comp / tot_orig,
        "index_metadata_bytes": index_bytes,
    }
