"""Chain checkpoints as protobuf messages.

The schema is built at import time instead of being compiled from a .proto file:

    message NamedArray {
      string name = 1;
      repeated int64 shape = 2;
      repeated double float_values = 3;
      repeated int64 int_values = 4;
      string dtype = 5;       // "float64" or "int64"
    }
    message Checkpoint {
      uint32 version = 1;
      string model_kind = 2;
      string sampler_kind = 3;
      string truncation = 4;
      int64 iteration = 5;
      string rng_state = 6;   // JSON of the bit generator state
      string metadata = 7;    // JSON: scalars, hyperparameters, run config
      repeated NamedArray arrays = 8;
    }

Files ending in .json use the protobuf JSON mapping, anything else the binary wire format.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from google.protobuf import descriptor_pb2, descriptor_pool, json_format, message_factory
from google.protobuf.message import DecodeError, Message

from nbfa.core.distributions import RngStream
from nbfa.core.model import (
    EtaAuxState,
    FactorState,
    GlobalMeasureState,
    Hyperparams,
    LatentCountState,
    ModelState,
    SampleState,
    SparseTriples,
)
from nbfa.errors import SchemaError

logger = logging.getLogger(__name__)

CheckpointFormat = Literal["json", "pb"]
CHECKPOINT_VERSION = 1
_PACKAGE = "nbfa.checkpoint"

_F = descriptor_pb2.FieldDescriptorProto


def _build_file() -> descriptor_pb2.FileDescriptorProto:
    fd = descriptor_pb2.FileDescriptorProto(
        name="nbfa/checkpoint.proto", package=_PACKAGE, syntax="proto3"
    )

    array = fd.message_type.add(name="NamedArray")
    array.field.add(name="name", number=1, type=_F.TYPE_STRING, label=_F.LABEL_OPTIONAL)
    array.field.add(name="shape", number=2, type=_F.TYPE_INT64, label=_F.LABEL_REPEATED)
    array.field.add(name="float_values", number=3, type=_F.TYPE_DOUBLE, label=_F.LABEL_REPEATED)
    array.field.add(name="int_values", number=4, type=_F.TYPE_INT64, label=_F.LABEL_REPEATED)
    array.field.add(name="dtype", number=5, type=_F.TYPE_STRING, label=_F.LABEL_OPTIONAL)

    ckpt = fd.message_type.add(name="Checkpoint")
    for number, (name, ftype) in enumerate(
        [
            ("version", _F.TYPE_UINT32),
            ("model_kind", _F.TYPE_STRING),
            ("sampler_kind", _F.TYPE_STRING),
            ("truncation", _F.TYPE_STRING),
            ("iteration", _F.TYPE_INT64),
            ("rng_state", _F.TYPE_STRING),
            ("metadata", _F.TYPE_STRING),
        ],
        start=1,
    ):
        ckpt.field.add(name=name, number=number, type=ftype, label=_F.LABEL_OPTIONAL)
    ckpt.field.add(
        name="arrays",
        number=8,
        type=_F.TYPE_MESSAGE,
        label=_F.LABEL_REPEATED,
        type_name=f".{_PACKAGE}.NamedArray",
    )
    return fd


_pool = descriptor_pool.DescriptorPool()
_pool.AddSerializedFile(_build_file().SerializeToString())
CheckpointMessage = message_factory.GetMessageClass(
    _pool.FindMessageTypeByName(f"{_PACKAGE}.Checkpoint")
)


def checkpoint_format(path: str | Path) -> CheckpointFormat:
    return "json" if str(path).endswith(".json") else "pb"


def _put(msg: Message, name: str, values: np.ndarray | None) -> None:
    if values is None:
        return
    entry = msg.arrays.add()  # type: ignore[attr-defined]
    entry.name = name
    entry.shape.extend(int(s) for s in values.shape)
    flat = values.ravel()
    if np.issubdtype(values.dtype, np.integer):
        entry.dtype = "int64"
        entry.int_values.extend(int(x) for x in flat)
    else:
        entry.dtype = "float64"
        entry.float_values.extend(float(x) for x in flat)


def _triples_array(triples: SparseTriples | None) -> np.ndarray | None:
    if triples is None:
        return None
    return np.stack([triples.cell, triples.k, triples.count])


def _tables_array(tables: list[dict[int, list[int]]] | None) -> np.ndarray | None:
    if tables is None:
        return None
    rows = [
        (cell, k, occ)
        for cell, by_factor in enumerate(tables)
        for k, occupancies in by_factor.items()
        for occ in occupancies
    ]
    # (3, n) in insertion order, with a leading column carrying the cell count
    out = np.zeros((3, len(rows) + 1), dtype=np.int64)
    out[:, 0] = (len(tables), -1, -1)
    if rows:
        out[:, 1:] = np.asarray(rows, dtype=np.int64).T
    return out


def to_message(
    state: ModelState, rng: RngStream | None = None, metadata: dict[str, Any] | None = None
) -> Message:
    measure = state.measure
    scores = state.scores
    latent = state.latent
    meta: dict[str, Any] = {
        "hyper": asdict(state.hyper),
        "eta": state.eta,
        "r_star": measure.r_star,
        "gamma0": measure.gamma0,
        "c0": measure.c0,
        "K_active": measure.K_active,
        "K_star": measure.K_star,
        "seed": rng.seed if rng is not None else None,
        "spawn_key": list(rng.spawn_key) if rng is not None else None,
        **(metadata or {}),
    }
    msg = CheckpointMessage(
        version=CHECKPOINT_VERSION,
        model_kind=state.kind,
        sampler_kind=state.sampler,
        truncation=measure.truncation,
        iteration=state.iteration,
        rng_state=json.dumps(rng.get_state()) if rng is not None else "",
        metadata=json.dumps(meta, sort_keys=True),
    )
    for name, values in [
        ("r", measure.r),
        ("phi", state.factors.phi),
        ("theta", scores.theta),
        ("theta_sum", scores.theta_sum),
        ("p", scores.p),
        ("c", scores.c),
        ("z", latent.z),
        ("b", latent.b),
        ("n_vjk", _triples_array(latent.n_vjk)),
        ("ell_vjk", _triples_array(latent.ell_vjk)),
        ("ell_vj", latent.ell_vj),
        ("ell_tilde_jk", latent.ell_tilde_jk),
        ("tables", _tables_array(latent.tables)),
        ("eta_aux_q", state.eta_aux.q if state.eta_aux is not None else None),
        ("eta_aux_t", state.eta_aux.t if state.eta_aux is not None else None),
    ]:
        _put(msg, name, values)
    return msg


_FLOAT_NAMES = frozenset({"r", "phi", "theta", "theta_sum", "p", "c", "eta_aux_q"})
_EXTRA_PREFIX = "extra:"


def _arrays(msg: Message) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {}
    extras: dict[str, np.ndarray] = {}
    for entry in msg.arrays:  # type: ignore[attr-defined]
        shape = tuple(entry.shape)
        name: str = entry.name
        if name.startswith(_EXTRA_PREFIX):
            # Files without a dtype fall back to whichever value list is filled.
            is_float = entry.dtype == "float64" or (not entry.dtype and bool(entry.float_values))
            values = entry.float_values if is_float else entry.int_values
            dtype = np.float64 if is_float else np.int64
            extras[name.removeprefix(_EXTRA_PREFIX)] = np.asarray(values, dtype=dtype).reshape(
                shape
            )
        elif name in _FLOAT_NAMES:
            arrays[name] = np.asarray(entry.float_values, dtype=np.float64).reshape(shape)
        else:
            arrays[name] = np.asarray(entry.int_values, dtype=np.int64).reshape(shape)
    return arrays, extras


def _triples(values: np.ndarray | None) -> SparseTriples | None:
    if values is None:
        return None
    return SparseTriples(values[0].copy(), values[1].copy(), values[2].copy())


def _tables(values: np.ndarray | None) -> list[dict[int, list[int]]] | None:
    if values is None:
        return None
    tables: list[dict[int, list[int]]] = [{} for _ in range(int(values[0, 0]))]
    for cell, k, occ in values[:, 1:].T:
        tables[int(cell)].setdefault(int(k), []).append(int(occ))
    return tables


@dataclass(eq=False)
class LoadedCheckpoint:
    state: ModelState
    metadata: dict[str, Any]
    rng_state: dict[str, Any] | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def restore_rng(self) -> RngStream | None:
        """Rebuild the chain stream saved alongside the state, positioned where it left off."""
        if self.metadata.get("seed") is None or self.rng_state is None:
            return None
        key = [int(x) for x in self.metadata["spawn_key"]]
        rng = RngStream(int(self.metadata["seed"]), key[-1], tuple(key[:-1]))
        rng.set_state(self.rng_state)
        return rng


def from_message(msg: Message) -> LoadedCheckpoint:
    version = msg.version  # type: ignore[attr-defined]
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"Unsupported checkpoint version {version}")
    try:
        meta: dict[str, Any] = json.loads(msg.metadata)  # type: ignore[attr-defined]
        rng_json = msg.rng_state  # type: ignore[attr-defined]
        rng_state = json.loads(rng_json) if rng_json else None
    except json.JSONDecodeError as e:
        raise SchemaError(f"Corrupt checkpoint metadata: {e}") from e
    arrays, extras = _arrays(msg)
    if "p" not in arrays:
        raise SchemaError("Checkpoint has no p_j array")

    eta_aux = None
    if "eta_aux_q" in arrays and "eta_aux_t" in arrays:
        eta_aux = EtaAuxState(arrays["eta_aux_q"], arrays["eta_aux_t"])
    try:
        state = ModelState(
            kind=msg.model_kind,  # type: ignore[attr-defined]
            sampler=msg.sampler_kind,  # type: ignore[attr-defined]
            hyper=Hyperparams(**meta["hyper"]),
            eta=float(meta["eta"]),
            measure=GlobalMeasureState(
                arrays.get("r"),
                float(meta["r_star"]),
                float(meta["gamma0"]),
                float(meta["c0"]),
                int(meta["K_active"]),
                int(meta["K_star"]),
                msg.truncation,  # type: ignore[attr-defined]
            ),
            factors=FactorState(arrays.get("phi")),
            scores=SampleState(
                arrays.get("theta"), arrays.get("theta_sum"), arrays["p"], arrays.get("c")
            ),
            latent=LatentCountState(
                z=arrays.get("z"),
                b=arrays.get("b"),
                n_vjk=_triples(arrays.get("n_vjk")),
                ell_vjk=_triples(arrays.get("ell_vjk")),
                ell_vj=arrays.get("ell_vj"),
                ell_tilde_jk=arrays.get("ell_tilde_jk"),
                tables=_tables(arrays.get("tables")),
            ),
            eta_aux=eta_aux,
            iteration=int(msg.iteration),  # type: ignore[attr-defined]
        )
    except (KeyError, TypeError) as e:
        raise SchemaError(f"Checkpoint metadata is missing {e}") from e
    return LoadedCheckpoint(state, meta, rng_state, extras)


def save(
    state: ModelState,
    path: str | Path,
    rng: RngStream | None = None,
    metadata: dict[str, Any] | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    msg = to_message(state, rng, metadata)
    for name, values in (extra_arrays or {}).items():
        _put(msg, _EXTRA_PREFIX + name, values)
    if checkpoint_format(path) == "json":
        content = json_format.MessageToJson(msg, indent=1).encode("utf-8")
    else:
        content = msg.SerializeToString()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(content)
    tmp.replace(path)
    logger.info("Wrote checkpoint %s at iteration %d", path, state.iteration)


def load(path: str | Path) -> LoadedCheckpoint:
    content = Path(path).read_bytes()
    msg = CheckpointMessage()
    try:
        if checkpoint_format(path) == "json":
            json_format.Parse(content.decode("utf-8"), msg)
        else:
            msg.ParseFromString(content)
    except (json_format.ParseError, DecodeError, UnicodeDecodeError) as e:
        raise SchemaError(f"Unreadable checkpoint {path}: {e}") from e
    return from_message(msg)
