"""Versioned binary checkpoint format.

Bit-exact persistence is a hard requirement (resumed training must equal an
uninterrupted run), so parameter arrays are stored as raw little-endian
float64 bytes rather than text. Layout:

    8-byte magic | uint32 format version | 32-byte manifest fingerprint |
    uint64 header length | header JSON (utf-8) |
    one length-prefixed float64 array per parameter, in canonical order |
    optional optimizer block: uint64 step count, then first- and
    second-moment arrays in the same order

The header carries the class names, cue declarations, model hyperparameters
and training progress, so a checkpoint is self-describing for prediction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .data import dataset_fingerprint
from .errors import CheckpointError
from .model import CueSpec, ModelParams
from .training import AdamState

MAGIC = b"CUEGNNCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    classes: tuple[str, ...]
    params: ModelParams
    optimizer: Optional[AdamState] = None
    epochs_completed: int = 0
    train_seed: Optional[int] = None
    created_at: str = ""

    def fingerprint(self) -> bytes:
        return dataset_fingerprint(self.classes, self.params.cue_specs)


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<Q", data.size))
    fh.write(data.tobytes())


def _read_array(fh: BinaryIO, shape: tuple[int, ...], name: str) -> np.ndarray:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, name))
    expected = int(np.prod(shape)) if shape else 1
    if count != expected:
        raise CheckpointError(
            f"array '{name}' has {count} values, expected {expected} for shape {shape}"
        )
    raw = _read_exact(fh, count * 8, name)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _read_exact(fh: BinaryIO, size: int, context: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {context}")
    return data


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    params = ckpt.params
    if len(ckpt.classes) != params.n_classes:
        raise CheckpointError(
            f"{len(ckpt.classes)} class names for a {params.n_classes}-class model"
        )
    header = {
        "classes": list(ckpt.classes),
        "cues": [
            [c.name, c.feature_dim, c.cap_train, c.cap_eval] for c in params.cue_specs
        ],
        "hidden_size": params.hidden_size,
        "k_steps": params.k_steps,
        "n_classes": params.n_classes,
        "epochs_completed": ckpt.epochs_completed,
        "train_seed": ckpt.train_seed,
        "created_at": ckpt.created_at or datetime.now(timezone.utc).isoformat(),
        "has_optimizer": ckpt.optimizer is not None,
    }
    if ckpt.optimizer is not None:
        header["optimizer"] = {
            "learning_rate": ckpt.optimizer.learning_rate,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
        }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(ckpt.fingerprint())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in params.named_arrays():
            _write_array(fh, arr)
        if ckpt.optimizer is not None:
            fh.write(struct.pack("<Q", ckpt.optimizer.step_count))
            for arr in ckpt.optimizer.m:
                _write_array(fh, arr)
            for arr in ckpt.optimizer.v:
                _write_array(fh, arr)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        if _read_exact(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a cuegnn checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        stored_fingerprint = _read_exact(fh, 32, "fingerprint")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))

        classes = tuple(header["classes"])
        cue_specs = tuple(
            CueSpec(cue_id=i, name=name, feature_dim=dim, cap_train=ct, cap_eval=ce)
            for i, (name, dim, ct, ce) in enumerate(header["cues"])
        )
        hidden = int(header["hidden_size"])
        n_classes = int(header["n_classes"])
        k_steps = int(header["k_steps"])

        shapes: list[tuple[str, tuple[int, ...]]] = []
        for spec in cue_specs:
            shapes.append((f"proj_w[{spec.name}]", (hidden, spec.feature_dim)))
            shapes.append((f"proj_b[{spec.name}]", (hidden,)))
        for spec in cue_specs:
            shapes.append((f"edge_w[{spec.name}]", (hidden, hidden)))
        for name in ("gru_wz", "gru_wr", "gru_wh", "gru_uz", "gru_ur", "gru_uh"):
            shapes.append((name, (hidden, hidden)))
        shapes.append(("out_w", (n_classes, hidden)))
        shapes.append(("out_b", (n_classes,)))

        arrays = [_read_array(fh, shape, name) for name, shape in shapes]
        t = len(cue_specs)
        params = ModelParams(
            cue_specs=cue_specs,
            hidden_size=hidden,
            n_classes=n_classes,
            k_steps=k_steps,
            proj_w=arrays[0 : 2 * t : 2],
            proj_b=arrays[1 : 2 * t : 2],
            edge_w=arrays[2 * t : 3 * t],
            gru_wz=arrays[3 * t + 0],
            gru_wr=arrays[3 * t + 1],
            gru_wh=arrays[3 * t + 2],
            gru_uz=arrays[3 * t + 3],
            gru_ur=arrays[3 * t + 4],
            gru_uh=arrays[3 * t + 5],
            out_w=arrays[3 * t + 6],
            out_b=arrays[3 * t + 7],
        )

        optimizer = None
        if header.get("has_optimizer"):
            opt_cfg = header.get("optimizer", {})
            (step_count,) = struct.unpack("<Q", _read_exact(fh, 8, "optimizer step"))
            m = [_read_array(fh, shape, f"m:{name}") for name, shape in shapes]
            v = [_read_array(fh, shape, f"v:{name}") for name, shape in shapes]
            optimizer = AdamState(
                learning_rate=float(opt_cfg.get("learning_rate", 1e-4)),
                beta1=float(opt_cfg.get("beta1", 0.9)),
                beta2=float(opt_cfg.get("beta2", 0.999)),
                eps=float(opt_cfg.get("eps", 1e-8)),
                step_count=step_count,
                m=m,
                v=v,
            )

    ckpt = Checkpoint(
        classes=classes,
        params=params,
        optimizer=optimizer,
        epochs_completed=int(header.get("epochs_completed", 0)),
        train_seed=header.get("train_seed"),
        created_at=header.get("created_at", ""),
    )
    if ckpt.fingerprint() != stored_fingerprint:
        raise CheckpointError(f"{path}: stored fingerprint does not match its own header")
    return ckpt


def require_fingerprint_match(ckpt: Checkpoint, manifest_fingerprint: bytes) -> None:
    """Hard error when a checkpoint is paired with a different dataset."""
    if ckpt.fingerprint() != manifest_fingerprint:
        raise CheckpointError(
            "checkpoint manifest fingerprint does not match the dataset; "
            "classes or cue declarations differ"
        )
