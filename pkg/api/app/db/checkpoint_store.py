"""Binary checkpoint container.

Layout: magic ``DCGMMCK1``, 8-byte little-endian header length, UTF-8 JSON
header (sorted keys, compact separators), raw little-endian float64 blocks
in header order, then a little-endian CRC32 over every preceding byte.
"""
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.errors import FormatError, IntegrityError
from app.core.files import PathLike, atomic_write_bytes
from app.layers.classifier import ClassifierLayer, ClassifierParams
from app.layers.gmm import GmmLayer, GmmParams
from app.layers.model import DcgmmModel
from app.models.architecture import ArchitectureConfig
from app.services.outlier_service import LayerStats, OutlierStats

logger = logging.getLogger(__name__)

MAGIC = b"DCGMMCK1"
FORMAT_VERSION = 1
PREFIX_SIZE = len(MAGIC) + 8


@dataclass
class Checkpoint:
    model: DcgmmModel
    stats: Optional[OutlierStats] = None
    training: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    version: int = FORMAT_VERSION


def _blocks(model: DcgmmModel, stats: Optional[OutlierStats]) -> List[Tuple[str, int, np.ndarray]]:
    blocks = []
    for layer in model.layers:
        if isinstance(layer, GmmLayer):
            g = layer.params
            blocks += [("pi_logits", layer.index, g.pi_logits), ("centroids", layer.index, g.centroids),
                       ("precisions", layer.index, g.precisions)]
        elif isinstance(layer, ClassifierLayer):
            blocks += [("weights", layer.index, layer.params.weights), ("bias", layer.index, layer.params.bias)]
    if stats is not None:
        for index in sorted(stats.layers):
            blocks += [("mean_map", index, stats.layers[index].mean_map),
                       ("var_map", index, stats.layers[index].var_map)]
    return blocks


def encode_checkpoint(model: DcgmmModel, stats: Optional[OutlierStats] = None) -> bytes:
    blocks = _blocks(model, stats)
    entries, payload, offset = [], [], 0
    for name, index, array in blocks:
        data = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append({"name": name, "layer": index, "shape": list(array.shape), "offset": offset})
        payload.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.model_dump(mode="json"),
        "blocks": entries,
        "stats_count": None if stats is None else stats.count,
        "training": model.training_echo,
        "rng_state": model.rng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(payload)
    return body + zlib.crc32(body).to_bytes(4, "little")


def save_checkpoint(model: DcgmmModel, stats: Optional[OutlierStats], path: PathLike) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, stats))
    logger.info(f"Saved checkpoint to {path}")


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < PREFIX_SIZE + 4 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError("not a DCGMM checkpoint", 0)
    body, trailer = raw[:-4], raw[-4:]
    if zlib.crc32(body) != int.from_bytes(trailer, "little"):
        raise IntegrityError("checkpoint checksum mismatch")
    header_size = int.from_bytes(raw[len(MAGIC):PREFIX_SIZE], "little")
    if PREFIX_SIZE + header_size > len(body):
        raise FormatError(f"header length {header_size} runs past the end of the file", len(MAGIC))
    try:
        header = json.loads(body[PREFIX_SIZE:PREFIX_SIZE + header_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header ({e})", PREFIX_SIZE) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header.get('format_version')}")

    payload_start = PREFIX_SIZE + header_size
    arrays: Dict[Tuple[str, int], np.ndarray] = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        start = payload_start + entry["offset"]
        size = 8 * int(np.prod(shape, dtype=np.int64))
        if start + size > len(body):
            raise FormatError(f"block {entry['name']} of layer {entry['layer']} is truncated", start)
        arrays[(entry["name"], entry["layer"])] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=start) \
            .astype(np.float64).reshape(shape)

    arch = ArchitectureConfig.model_validate(header["architecture"])
    model = DcgmmModel.build(arch)
    try:
        for layer in model.layers:
            if isinstance(layer, GmmLayer):
                layer.params = GmmParams(
                    arrays[("pi_logits", layer.index)], arrays[("centroids", layer.index)],
                    arrays[("precisions", layer.index)],
                )
            elif isinstance(layer, ClassifierLayer):
                layer.params = ClassifierParams(arrays[("weights", layer.index)], arrays[("bias", layer.index)])
    except KeyError as e:
        raise FormatError(f"missing parameter block {e.args[0]}", PREFIX_SIZE) from e
    model.training_echo = header.get("training") or {}
    model.rng_state = header.get("rng_state")

    stats = None
    if header.get("stats_count") is not None:
        stats = OutlierStats(
            layers={
                index: LayerStats(arrays[("mean_map", index)], arrays[("var_map", index)])
                for (name, index) in arrays if name == "mean_map"
            },
            count=header["stats_count"],
        )
    return Checkpoint(model=model, stats=stats, training=model.training_echo, rng_state=model.rng_state)


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.info(f"Loaded checkpoint {path} ({checkpoint.model.arch.name or 'unnamed'})")
    return checkpoint
