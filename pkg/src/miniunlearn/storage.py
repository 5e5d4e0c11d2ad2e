"""On-disk layout for training logs and result artifacts.

A log directory holds ``manifest.json``, ``final_w.f64`` and one
``step_<l>/`` directory per recorded step with ``w_before.f64``,
``grad_sum.f64`` and ``batch.u32``. Every binary file is an 8-byte
little-endian element count followed by little-endian elements.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NotFoundError, ParseError
from .objective import LossConfig
from .trainer import PRNG_NAME, StepRecord, TrainConfig, TrainingLog

FORMAT_VERSION = 1
_COUNT = np.dtype("<u8")


def write_array(path, values, dtype: str = "<f8") -> None:
    if dtype == "<u4":
        src = np.asarray(values).reshape(-1)
        if src.size and (src.min() < 0 or src.max() > np.iinfo(np.uint32).max):
            raise ConfigError(f"{path}: indices do not fit in u32")
    a = np.ascontiguousarray(values, dtype=np.dtype(dtype)).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(np.array([a.size], dtype=_COUNT).tobytes())
        fh.write(a.tobytes())


def read_array(path, dtype: str = "<f8") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"missing array file {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated header")
    count = int(np.frombuffer(raw[:8], dtype=_COUNT)[0])
    dt = np.dtype(dtype)
    if len(raw) != 8 + count * dt.itemsize:
        raise ParseError(f"{path}: header says {count} elements, file holds {(len(raw) - 8) / dt.itemsize:g}")
    return np.frombuffer(raw[8:], dtype=dt).copy()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"missing {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def log_manifest(log: TrainingLog, n: int, p: int, data: dict | None = None) -> dict:
    cfg = log.config
    return {
        "format_version": FORMAT_VERSION,
        "loss": cfg.loss.kind,
        "n": n,
        "p": p,
        "T": cfg.epochs,
        "k": log.k,
        "B": cfg.batch_size,
        "eta": cfg.learning_rate,
        "l2": cfg.loss.l2,
        "seed": cfg.seed,
        "strict": cfg.strict,
        "prng": PRNG_NAME,
        "dataset_fingerprint": log.dataset_fingerprint,
        "data": data or {},
        "created_at": now_iso(),
    }


def save_log(log: TrainingLog, directory, n: int, p: int, data: dict | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "final_w.f64", log.final_w)
    for rec in log.history:
        d = out / f"step_{rec.step}"
        d.mkdir(exist_ok=True)
        write_array(d / "w_before.f64", rec.w_before)
        write_array(d / "grad_sum.f64", rec.grad_sum_full)
        write_array(d / "batch.u32", rec.batch_indices, "<u4")
    # Manifest last: its presence marks a complete log.
    write_json(out / "manifest.json", log_manifest(log, n, p, data))
    return out


def load_log(directory) -> tuple[TrainingLog, dict]:
    d = Path(directory)
    if not d.is_dir():
        raise NotFoundError(f"log directory {d} does not exist")
    man = read_json(d / "manifest.json")
    if man.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{d}: unsupported format_version {man.get('format_version')!r}")
    try:
        cfg = TrainConfig(epochs=int(man["T"]), batch_size=int(man["B"]), learning_rate=float(man["eta"]),
                          history_k=int(man["k"]), seed=int(man["seed"]),
                          loss=LossConfig(man["loss"], float(man["l2"])), strict=bool(man.get("strict", False)))
        p = int(man["p"])
        fingerprint = man["dataset_fingerprint"]
    except KeyError as exc:
        raise ParseError(f"{d}/manifest.json: missing field {exc}") from None
    history = []
    for step in range(cfg.epochs - cfg.history_k + 1, cfg.epochs + 1):
        sd = d / f"step_{step}"
        w = read_array(sd / "w_before.f64")
        g = read_array(sd / "grad_sum.f64")
        batch = read_array(sd / "batch.u32", "<u4").astype(np.int64)
        if w.size != p or g.size != p or batch.size != cfg.batch_size:
            raise ParseError(f"{sd}: array sizes do not match the manifest")
        for a in (w, g, batch):
            a.flags.writeable = False
        history.append(StepRecord(step, batch, w, g))
    final_w = read_array(d / "final_w.f64")
    if final_w.size != p:
        raise ParseError(f"{d}/final_w.f64 has {final_w.size} entries, expected {p}")
    final_w.flags.writeable = False
    return TrainingLog(cfg, final_w, tuple(history), fingerprint), man

