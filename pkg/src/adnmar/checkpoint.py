"""Checkpoint archive format (version tag ``adn-ckpt-1``).

A checkpoint is a zip archive holding one ADNARR1 entry per parameter
array (flattened to a single row; true shapes live in the manifest), the
optimizer moment arrays, the torch RNG state, and a JSON manifest with
the config, step counter and seed records. Entry timestamps are pinned so
identical training runs produce bitwise-identical archives.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .errors import FormatError
from .networks import AdnModel, NetworkConfig, build_model

CHECKPOINT_VERSION = "adn-ckpt-1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _adnarr_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    header = {
        "magic": "ADNARR1",
        "shape": list(arr.shape),
        "dtype": "f32le",
        "spacing_mm": 1.0,
        "provenance": "synthetic",
    }
    buf.write(json.dumps(header).encode("utf-8"))
    buf.write(b"\n")
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _adnarr_parse(data: bytes) -> np.ndarray:
    newline = data.index(b"\n")
    header = json.loads(data[:newline].decode("utf-8"))
    if header.get("magic") != "ADNARR1" or header.get("dtype") != "f32le":
        raise FormatError("bad embedded ADNARR1 entry")
    shape = tuple(header["shape"])
    return np.frombuffer(data[newline + 1 :], dtype="<f4").reshape(shape).copy()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _tensor_entry(t: torch.Tensor) -> tuple[bytes, list[int]]:
    arr = t.detach().cpu().numpy().astype(np.float32, copy=False)
    flat = np.ascontiguousarray(arr).reshape(1, -1)
    return _adnarr_bytes(flat), list(arr.shape)


def _optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    arrays: dict[str, torch.Tensor] = {}
    steps: dict[str, int] = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if key == "step":
                steps[str(idx)] = int(value.item() if torch.is_tensor(value) else value)
            elif torch.is_tensor(value):
                arrays[f"{idx}.{key}"] = value
    return arrays, steps


@dataclass
class CheckpointData:
    """Everything needed to rebuild a model and resume training."""

    network_config: NetworkConfig
    step: int
    params: dict[str, np.ndarray]
    optimizer_arrays: dict[str, dict[str, np.ndarray]]
    optimizer_steps: dict[str, dict[str, int]]
    numpy_rng_state: dict | None
    torch_rng_state: bytes | None
    extra_config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    model: AdnModel,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    step: int = 0,
    numpy_rng_state: dict | None = None,
    extra_config: dict | None = None,
    seeds: dict | None = None,
) -> None:
    cfg = model.config
    manifest: dict[str, Any] = {
        "version": CHECKPOINT_VERSION,
        "network_config": {
            "base_channels": cfg.base_channels,
            "n_res_blocks": cfg.n_res_blocks,
            "disc_layers": cfg.disc_layers,
            "padding_mode": cfg.padding_mode,
        },
        "step": int(step),
        "params": {},
        "optimizers": {},
        "numpy_rng_state": numpy_rng_state,
        "extra_config": extra_config or {},
        "seeds": seeds or {},
    }
    # entries are written in sorted order so identical states always
    # produce bitwise-identical archives, whatever dict order callers used
    with zipfile.ZipFile(path, "w") as zf:
        for name, tensor in sorted(model.state_dict().items()):
            data, shape = _tensor_entry(tensor)
            manifest["params"][name] = shape
            _write_entry(zf, f"params/{name}.adnarr", data)
        if optimizers:
            for opt_name, opt in sorted(optimizers.items()):
                arrays, steps = _optimizer_arrays(opt)
                entry_shapes = {}
                for key, tensor in sorted(arrays.items()):
                    data, shape = _tensor_entry(tensor)
                    entry_shapes[key] = shape
                    _write_entry(zf, f"opt/{opt_name}/{key}.adnarr", data)
                manifest["optimizers"][opt_name] = {"steps": steps, "arrays": entry_shapes}
        rng_bytes = torch.get_rng_state().numpy().tobytes()
        _write_entry(zf, "rng/torch.bin", rng_bytes)
        _write_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True).encode("utf-8"))


def load_checkpoint(path) -> CheckpointData:
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise FormatError(f"{path}: not a checkpoint archive (no manifest.json)")
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint version {manifest.get('version')!r}"
            )
        params = {}
        for name, shape in manifest["params"].items():
            flat = _adnarr_parse(zf.read(f"params/{name}.adnarr"))
            params[name] = flat.reshape(shape)
        optimizer_arrays: dict[str, dict[str, np.ndarray]] = {}
        optimizer_steps: dict[str, dict[str, int]] = {}
        for opt_name, info in manifest.get("optimizers", {}).items():
            optimizer_steps[opt_name] = {k: int(v) for k, v in info["steps"].items()}
            optimizer_arrays[opt_name] = {
                key: _adnarr_parse(zf.read(f"opt/{opt_name}/{key}.adnarr")).reshape(shape)
                for key, shape in info["arrays"].items()
            }
        torch_rng = zf.read("rng/torch.bin") if "rng/torch.bin" in names else None
    ncfg = manifest["network_config"]
    return CheckpointData(
        network_config=NetworkConfig(
            base_channels=ncfg["base_channels"],
            n_res_blocks=ncfg["n_res_blocks"],
            disc_layers=ncfg["disc_layers"],
            padding_mode=ncfg["padding_mode"],
        ),
        step=int(manifest["step"]),
        params=params,
        optimizer_arrays=optimizer_arrays,
        optimizer_steps=optimizer_steps,
        numpy_rng_state=manifest.get("numpy_rng_state"),
        torch_rng_state=torch_rng,
        extra_config=manifest.get("extra_config", {}),
        seeds=manifest.get("seeds", {}),
    )


def restore_model(ckpt: CheckpointData) -> AdnModel:
    """Rebuild a model with checkpointed weights (forward-exact restore)."""
    model = build_model(ckpt.network_config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    return model


def restore_optimizer(opt: torch.optim.Optimizer, ckpt: CheckpointData, opt_name: str) -> None:
    """Load moment arrays and step counts into a freshly built optimizer."""
    arrays = ckpt.optimizer_arrays.get(opt_name, {})
    steps = ckpt.optimizer_steps.get(opt_name, {})
    if not arrays and not steps:
        return
    sd = opt.state_dict()
    state: dict[int, dict[str, Any]] = {}
    for key, arr in arrays.items():
        idx_str, field_name = key.split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        entry[field_name] = torch.from_numpy(arr.copy())
    for idx_str, step_val in steps.items():
        entry = state.setdefault(int(idx_str), {})
        entry["step"] = torch.tensor(float(step_val))
    sd["state"] = state
    opt.load_state_dict(sd)


def restore_torch_rng(ckpt: CheckpointData) -> None:
    if ckpt.torch_rng_state is not None:
        torch.set_rng_state(torch.from_numpy(np.frombuffer(ckpt.torch_rng_state, dtype=np.uint8).copy()))
