"""
Binary checkpoint codec.

Layout (little-endian):
    magic `CHCKPT`, u16 format version,
    u32 header length + UTF-8 JSON header (config echo, iteration, optimizer step counts, numpy stream state),
    u32 block count, then per block:
        u16 name length, name, u8 dtype code (0 = float32, 1 = uint8), u8 ndim, ndim x u32 shape, row-major data.

Network parameters and Adam moments are float32 blocks; torch generator states are uint8 blocks.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from pathier import Pathier, Pathish
from typing_extensions import Any

from .core import CheckpointError, RandomStreams, TrainConfig

MAGIC = b"CHCKPT"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


@dataclass
class CheckpointData:
    config: TrainConfig
    iteration: int
    header: dict[str, Any]
    blocks: dict[str, np.ndarray]


def _module_blocks(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def _optimizer_blocks(
    prefix: str, optimizer: torch.optim.Optimizer, module: nn.Module
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    names = [name for name, _ in module.named_parameters()]
    blocks: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    state = optimizer.state_dict()["state"]
    for index, param_state in state.items():
        name = names[index]
        steps[name] = float(param_state["step"])
        for key in ("exp_avg", "exp_avg_sq"):
            blocks[f"optim.{prefix}.{name}.{key}"] = (
                param_state[key].detach().cpu().numpy().astype("<f4")
            )
    return blocks, steps


def _encode_block(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    code = 0 if array.dtype.kind == "f" else 1
    encoded_name = name.encode("utf-8")
    return b"".join(
        [
            struct.pack("<H", len(encoded_name)),
            encoded_name,
            struct.pack("<BB", code, array.ndim),
            struct.pack(f"<{array.ndim}I", *array.shape),
            array.tobytes(),
        ]
    )


def save_checkpoint(
    path: Pathish,
    cfg: TrainConfig,
    iteration: int,
    generator: nn.Module,
    descriptor: nn.Module,
    generator_optimizer: torch.optim.Optimizer,
    descriptor_optimizer: torch.optim.Optimizer,
    streams: RandomStreams,
):
    """Write everything needed to resume training bit-for-bit. The file is replaced atomically."""
    blocks = {**_module_blocks("generator", generator), **_module_blocks("descriptor", descriptor)}
    generator_moments, generator_steps = _optimizer_blocks("generator", generator_optimizer, generator)
    descriptor_moments, descriptor_steps = _optimizer_blocks(
        "descriptor", descriptor_optimizer, descriptor
    )
    blocks.update(generator_moments)
    blocks.update(descriptor_moments)
    rng_state = streams.state()
    for name in RandomStreams._torch_streams:
        blocks[f"rng.{name}"] = rng_state.pop(name).numpy().astype("u1")
    header = {
        "config": cfg.to_dict(),
        "iteration": iteration,
        "optimizer_steps": {"generator": generator_steps, "descriptor": descriptor_steps},
        "rng": rng_state,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = b"".join(
        [
            MAGIC,
            struct.pack("<H", FORMAT_VERSION),
            struct.pack("<I", len(header_bytes)),
            header_bytes,
            struct.pack("<I", len(blocks)),
            *(_encode_block(name, array) for name, array in blocks.items()),
        ]
    )
    path = Pathier(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(payload)
    partial.replace(path)


def load_checkpoint(path: Pathish) -> CheckpointData:
    path = Pathier(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint `{path}` does not exist.")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"`{path}` is not a checkpoint file.")
    offset = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<H", data, offset)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version} in `{path}`.")
        offset += 2
        (header_length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        header = json.loads(data[offset : offset + header_length].decode("utf-8"))
        offset += header_length
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            code, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            dtype = DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64))
            blocks[name] = (
                np.frombuffer(data, dtype=dtype, count=size, offset=offset).reshape(shape).copy()
            )
            offset += size * dtype.itemsize
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"`{path}` is truncated or corrupt: {e}") from e
    return CheckpointData(
        TrainConfig.from_dict(header["config"]), int(header["iteration"]), header, blocks
    )


def restore_module(module: nn.Module, prefix: str, checkpoint: CheckpointData):
    reference = module.state_dict()
    state = {}
    for name, tensor in reference.items():
        key = f"{prefix}.{name}"
        if key not in checkpoint.blocks:
            raise CheckpointError(f"Checkpoint is missing parameter block `{key}`.")
        block = checkpoint.blocks[key]
        if tuple(block.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Block `{key}` has shape {tuple(block.shape)}, the network expects {tuple(tensor.shape)}."
            )
        state[name] = torch.from_numpy(block).to(tensor.device, tensor.dtype)
    module.load_state_dict(state)


def restore_optimizer(
    optimizer: torch.optim.Optimizer, module: nn.Module, prefix: str, checkpoint: CheckpointData
):
    steps: dict[str, float] = checkpoint.header["optimizer_steps"][prefix]
    current = optimizer.state_dict()
    state: dict[int, dict[str, torch.Tensor]] = {}
    for index, (name, param) in enumerate(module.named_parameters()):
        if name not in steps:
            continue
        state[index] = {
            "step": torch.tensor(steps[name], dtype=torch.float32),
            **{
                key: torch.from_numpy(checkpoint.blocks[f"optim.{prefix}.{name}.{key}"]).to(
                    param.device, param.dtype
                )
                for key in ("exp_avg", "exp_avg_sq")
            },
        }
    optimizer.load_state_dict({"state": state, "param_groups": current["param_groups"]})


def restore_streams(streams: RandomStreams, checkpoint: CheckpointData):
    state: dict[str, Any] = {"data": checkpoint.header["rng"]["data"]}
    for name in RandomStreams._torch_streams:
        state[name] = torch.from_numpy(checkpoint.blocks[f"rng.{name}"]).to(torch.uint8)
    streams.restore(state)
