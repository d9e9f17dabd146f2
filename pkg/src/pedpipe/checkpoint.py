"""PGPT checkpoint files.

Layout: magic ``PGPT``, format version (u32 LE), manifest byte length
(u32 LE), a UTF-8 ``key=value`` manifest describing tensor names, shapes and
element offsets, then a payload of 32-bit little-endian floats. Tensor entries
are written in sorted-name order so identical weights always serialize to
identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .adapters import AdapterSpec, LoraExpert, MoEAdapterLayer, RoutingGate
from .model import ModelConfig, TransformerWeights

__all__ = [
    "CheckpointError",
    "save_model",
    "load_model",
    "save_adapters",
    "load_adapters",
    "checkpoint_kind",
    "inspect_checkpoint",
]

MAGIC = b"PGPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-format checkpoint file."""


def _write(path: Path, meta: Dict[str, str], tensors: Dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    lines: List[str] = [f"{k}={v}" for k, v in sorted(meta.items())]
    offset = 0
    blobs: List[bytes] = []
    for i, name in enumerate(names):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"tensor.{i}.name={name}")
        lines.append(f"tensor.{i}.shape={shape}")
        lines.append(f"tensor.{i}.offset={offset}")
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def _read(path: Path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a PGPT checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (manifest_len,) = struct.unpack("<I", raw[8:12])
    if 12 + manifest_len > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = raw[12 : 12 + manifest_len].decode("utf-8")
    payload = raw[12 + manifest_len :]

    meta: Dict[str, str] = {}
    entries: Dict[int, Dict[str, str]] = {}
    for line in manifest.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("tensor."):
            _, idx, attr = key.split(".", 2)
            entries.setdefault(int(idx), {})[attr] = value
        else:
            meta[key] = value

    floats = np.frombuffer(payload, dtype="<f4")
    tensors: Dict[str, np.ndarray] = {}
    for idx in sorted(entries):
        entry = entries[idx]
        shape = tuple(int(s) for s in entry["shape"].split("x")) if entry["shape"] else ()
        size = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        if offset + size > floats.size:
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = floats[offset : offset + size].reshape(shape).astype(np.float64)
    return meta, tensors


def _config_meta(cfg: ModelConfig) -> Dict[str, str]:
    return {
        "model.vocab_size": str(cfg.vocab_size),
        "model.d_model": str(cfg.d_model),
        "model.n_layers": str(cfg.n_layers),
        "model.n_heads": str(cfg.n_heads),
        "model.d_ff": str(cfg.d_ff),
        "model.max_seq_len": str(cfg.max_seq_len),
        "model.tie_embeddings": str(int(cfg.tie_embeddings)),
        "model.pad_id": str(cfg.pad_id),
        "model.bos_id": str(cfg.bos_id),
        "model.eos_id": str(cfg.eos_id),
    }


def _config_from_meta(meta: Dict[str, str]) -> ModelConfig:
    try:
        return ModelConfig(
            vocab_size=int(meta["model.vocab_size"]),
            d_model=int(meta["model.d_model"]),
            n_layers=int(meta["model.n_layers"]),
            n_heads=int(meta["model.n_heads"]),
            d_ff=int(meta["model.d_ff"]),
            max_seq_len=int(meta["model.max_seq_len"]),
            tie_embeddings=bool(int(meta["model.tie_embeddings"])),
            pad_id=int(meta["model.pad_id"]),
            bos_id=int(meta["model.bos_id"]),
            eos_id=int(meta["model.eos_id"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"manifest missing model key: {exc}") from exc


def save_model(path, weights: TransformerWeights) -> None:
    meta = {"kind": "model"}
    meta.update(_config_meta(weights.config))
    _write(Path(path), meta, {name: t.data for name, t in weights.tensors.items()})


def load_model(path, requires_grad: bool = False) -> TransformerWeights:
    meta, arrays = _read(Path(path))
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, got kind={meta.get('kind')!r}")
    cfg = _config_from_meta(meta)
    tensors = {name: T.Tensor(arr, requires_grad=requires_grad) for name, arr in arrays.items()}
    return TransformerWeights(config=cfg, tensors=tensors)


def save_adapters(path, adapter_set: Dict[str, MoEAdapterLayer], spec: AdapterSpec) -> None:
    meta = {
        "kind": "adapters",
        "adapters.n_specific": str(spec.n_specific),
        "adapters.rank": str(spec.rank),
        "adapters.alpha": repr(spec.alpha),
        "adapters.dropout": repr(spec.dropout),
        "adapters.placement": spec.placement,
        "adapters.noise_enabled": str(int(spec.noise_enabled)),
        "adapters.sites": ",".join(sorted(adapter_set)),
    }
    tensors: Dict[str, np.ndarray] = {}
    for site, layer in adapter_set.items():
        for j, expert in enumerate(layer.specific):
            tensors[f"{site}.specific{j}.a"] = expert.a.data
            tensors[f"{site}.specific{j}.b"] = expert.b.data
        tensors[f"{site}.universal.a"] = layer.universal.a.data
        tensors[f"{site}.universal.b"] = layer.universal.b.data
        tensors[f"{site}.gate.wg"] = layer.gate.wg.data
        tensors[f"{site}.gate.wn"] = layer.gate.wn.data
    _write(Path(path), meta, tensors)


def load_adapters(path, requires_grad: bool = False) -> Tuple[AdapterSpec, Dict[str, MoEAdapterLayer]]:
    meta, arrays = _read(Path(path))
    if meta.get("kind") != "adapters":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, got kind={meta.get('kind')!r}")
    spec = AdapterSpec(
        n_specific=int(meta["adapters.n_specific"]),
        rank=int(meta["adapters.rank"]),
        alpha=float(meta["adapters.alpha"]),
        dropout=float(meta["adapters.dropout"]),
        placement=meta["adapters.placement"],
        noise_enabled=bool(int(meta.get("adapters.noise_enabled", "1"))),
    )
    sites = [s for s in meta["adapters.sites"].split(",") if s]
    adapter_set: Dict[str, MoEAdapterLayer] = {}
    for site in sites:
        def grab(suffix: str) -> T.Tensor:
            key = f"{site}.{suffix}"
            if key not in arrays:
                raise CheckpointError(f"{path}: manifest missing tensor {key!r}")
            return T.Tensor(arrays[key], requires_grad=requires_grad)

        specific = [
            LoraExpert(a=grab(f"specific{j}.a"), b=grab(f"specific{j}.b"),
                       rank=spec.rank, alpha=spec.alpha, dropout=spec.dropout)
            for j in range(spec.n_specific)
        ]
        universal = LoraExpert(a=grab("universal.a"), b=grab("universal.b"),
                               rank=spec.rank, alpha=spec.alpha, dropout=spec.dropout)
        gate = RoutingGate(wg=grab("gate.wg"), wn=grab("gate.wn"),
                           n_specific=spec.n_specific, noise_enabled=spec.noise_enabled)
        adapter_set[site] = MoEAdapterLayer(
            site=site, universal=universal, specific=specific, gate=gate,
            rank=spec.rank, alpha=spec.alpha, dropout=spec.dropout,
        )
    return spec, adapter_set


def checkpoint_kind(path) -> str:
    meta, _ = _read(Path(path))
    return meta.get("kind", "unknown")


@dataclass
class InspectReport:
    version: int
    kind: str
    tensors: List[Tuple[str, Tuple[int, ...]]]
    parameter_count: int
    meta: Dict[str, str]

    def render(self) -> str:
        lines = [f"format version: {self.version}", f"kind: {self.kind}"]
        for key in sorted(self.meta):
            if key.startswith(("model.", "adapters.")) and key != "adapters.sites":
                lines.append(f"{key}: {self.meta[key]}")
        lines.append(f"tensors: {len(self.tensors)}")
        for name, shape in self.tensors:
            lines.append(f"  {name}  {'x'.join(str(s) for s in shape) or 'scalar'}")
        lines.append(f"total parameters: {self.parameter_count}")
        return "\n".join(lines)


def inspect_checkpoint(path) -> InspectReport:
    meta, arrays = _read(Path(path))
    tensors = [(name, arr.shape) for name, arr in sorted(arrays.items())]
    return InspectReport(
        version=FORMAT_VERSION,
        kind=meta.get("kind", "unknown"),
        tensors=tensors,
        parameter_count=int(sum(arr.size for arr in arrays.values())),
        meta=meta,
    )
