"""Binary checkpoint container and training-history CSV.

Checkpoint layout (all little-endian):

    magic   8 bytes  b"BRUCKPT1"
    u32     number of parameter records
    record* u32 name length | name utf-8 | u32 rank | u64 * rank extents
            | float32 * prod(extents) payload
    u32     number of optimizer records (same record scheme; first-moment
            entries are named "m.<param>", infinity-norm entries "u.<param>",
            plus rank-0 scalars "t" and "lr")
    footer  u64 best_epoch | f64 best_val

Payloads are always stored as 32-bit floats regardless of the training
dtype, so a 64-bit run round-trips through a checkpoint with float32
precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"BRUCKPT1"


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", fh.read(4))
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, arr.copy()


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    opt: dict[str, np.ndarray],
    best_epoch: int,
    best_val: float,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            _write_record(fh, name, np.asarray(arr))
        fh.write(struct.pack("<I", len(opt)))
        for name, arr in opt.items():
            _write_record(fh, name, np.asarray(arr))
        fh.write(struct.pack("<Qd", best_epoch, best_val))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], int, float]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_record(fh) for _ in range(n_params))
        (n_opt,) = struct.unpack("<I", fh.read(4))
        opt = dict(_read_record(fh) for _ in range(n_opt))
        best_epoch, best_val = struct.unpack("<Qd", fh.read(16))
    return params, opt, int(best_epoch), float(best_val)


HISTORY_HEADER = "epoch,train_loss,val_loss,lr"


def write_history(path, rows) -> None:
    """Rows of (epoch, train_loss, val_loss, lr); floats via repr so the
    file is byte-stable and exactly round-trippable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [HISTORY_HEADER]
    for epoch, train_loss, val_loss, lr in rows:
        lines.append(f"{epoch},{train_loss!r},{val_loss!r},{lr!r}")
    path.write_text("\n".join(lines) + "\n")


def read_history(path) -> list[tuple[int, float, float, float]]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ConfigError(f"{path}: not a history file")
    out = []
    for line in lines[1:]:
        e, t, v, lr = line.split(",")
        out.append((int(e), float(t), float(v), float(lr)))
    return out
