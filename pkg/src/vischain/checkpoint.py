"""Checkpoint directories: a text manifest plus one raw tensor blob.

Layout of a checkpoint directory:

    manifest.txt   format version, config hash, step, one line per tensor
    tensors.bin    float32 little-endian payloads, concatenated in manifest order
    config.txt     canonical config dump, so the directory is self-describing

Everything round-trips bit-exactly: payloads are the raw bytes of the
float32 tensors, and loading copies them back without conversion.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .config import RunConfig, config_hash, dump_config
from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
TENSORS = "tensors.bin"
CONFIG = "config.txt"


def _named_model_tensors(model) -> list[tuple[str, torch.Tensor]]:
    return [(f"model.{n}", p.detach()) for n, p in sorted(model.named_parameters())]


def save_checkpoint(path: str, model, optimizer, step: int, cfg: RunConfig) -> None:
    """Write a complete checkpoint; ``optimizer`` may be None for export."""
    entries = _named_model_tensors(model)
    if optimizer is not None:
        entries += sorted(optimizer.state_tensors().items())
    os.makedirs(path, exist_ok=True)
    lines = [
        f"format = {FORMAT_VERSION}",
        f"config_hash = {config_hash(cfg)}",
        f"step = {step}",
    ]
    offset = 0
    payloads = []
    for name, tensor in entries:
        if tensor.dtype != torch.float32:
            raise CheckpointError(f"{name}: only float32 tensors are stored")
        data = tensor.detach().contiguous().numpy().astype("<f4", copy=False)
        raw = data.tobytes()
        shape = ",".join(str(s) for s in tensor.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
        payloads.append(raw)
        offset += len(raw)
    with open(os.path.join(path, TENSORS), "wb") as fh:
        for raw in payloads:
            fh.write(raw)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, CONFIG), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def _parse_manifest(path: str):
    manifest_path = os.path.join(path, MANIFEST)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise CheckpointError(f"cannot read {manifest_path}: {err}") from None
    header: dict[str, str] = {}
    tensors: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in lines:
        if not line.strip():
            continue
        if line.startswith("tensor "):
            fields = line.split()
            if len(fields) != 5:
                raise CheckpointError(f"malformed tensor line: {line!r}")
            _, name, shape_text, offset, nbytes = fields
            shape = () if shape_text == "scalar" else tuple(
                int(s) for s in shape_text.split(",")
            )
            tensors.append((name, shape, int(offset), int(nbytes)))
        else:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    for required in ("format", "config_hash", "step"):
        if required not in header:
            raise CheckpointError(f"manifest missing {required!r}")
    if int(header["format"]) != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {header['format']} "
            f"(this build reads {FORMAT_VERSION})"
        )
    return header, tensors


def read_checkpoint(path: str) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    """Load header and all tensors; validates the blob is exactly covered."""
    header, entries = _parse_manifest(path)
    blob_path = os.path.join(path, TENSORS)
    try:
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read {blob_path}: {err}") from None
    expected = 0
    tensors: dict[str, torch.Tensor] = {}
    for name, shape, offset, nbytes in entries:
        if offset != expected:
            raise CheckpointError(
                f"{name}: offset {offset} leaves a gap (expected {expected})"
            )
        count = 1
        for s in shape:
            count *= s
        if nbytes != 4 * count:
            raise CheckpointError(
                f"{name}: {nbytes} bytes does not match float32 shape {shape}"
            )
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{name}: blob truncated")
        array = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        tensors[name] = torch.from_numpy(array)
        expected = offset + nbytes
    if expected != len(blob):
        raise CheckpointError(
            f"blob has {len(blob)} bytes but manifest covers {expected}"
        )
    return header, tensors


def load_checkpoint(
    path: str,
    model,
    optimizer=None,
    cfg: RunConfig | None = None,
) -> int:
    """Restore model (and optionally optimizer) state; returns the step.

    When ``cfg`` is given its hash must match the one recorded at save
    time, which catches resuming under a silently changed config.
    """
    header, tensors = read_checkpoint(path)
    if cfg is not None:
        want = config_hash(cfg)
        got = header["config_hash"]
        if want != got:
            raise CheckpointError(
                f"config hash mismatch: checkpoint has {got}, run has {want}"
            )
    consumed = set()
    with torch.no_grad():
        for name, param in sorted(model.named_parameters()):
            key = f"model.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing {key}")
            if tensors[key].shape != param.shape:
                raise CheckpointError(
                    f"{key}: shape {tuple(tensors[key].shape)} != "
                    f"model {tuple(param.shape)}"
                )
            param.copy_(tensors[key])
            consumed.add(key)
    step = int(header["step"])
    if optimizer is not None:
        opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
        optimizer.load_state_tensors(opt_tensors, step_count=step)
        consumed.update(opt_tensors)
    leftover = set(tensors) - consumed
    if optimizer is not None and leftover:
        raise CheckpointError(f"checkpoint has unclaimed tensors: {sorted(leftover)}")
    return step
