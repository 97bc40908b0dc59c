"""Checkpoint archive: one zip of named .npy arrays for all five networks.

Array names follow ``<network>/<layer>/<param>``; grouped-BN entries keep the
``<net>/<site>/bn.<group>/<param>`` shape. Optimizer moments are stored per
parameter index under ``<net>/optimizer/...`` and the RNG state plus step
counters under ``meta/...``. Zip entries carry a fixed timestamp so identical
states produce identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _archive_key(net: str, state_key: str) -> str:
    if ".bn." in state_key:
        site, rest = state_key.split(".bn.", 1)
        group, param = rest.rsplit(".", 1)
        return f"{net}/{site}/bn.{group}/{param}"
    if "." in state_key:
        layer, param = state_key.rsplit(".", 1)
        return f"{net}/{layer}/{param}"
    return f"{net}/{state_key}"


def _state_key(parts: list[str]) -> str:
    return ".".join(".".join(p.split("/")) for p in parts).replace("/", ".")


def collect_arrays(state) -> dict[str, np.ndarray]:
    """Flatten a TripletState into named numpy arrays."""
    arrays: dict[str, np.ndarray] = {}
    for net_name, module in state.networks().items():
        for key, tensor in module.state_dict().items():
            arrays[_archive_key(net_name, key)] = tensor.detach().cpu().numpy()
        opt = state.optimizers[net_name]
        opt_sd = opt.state_dict()
        for idx, entry in opt_sd["state"].items():
            for field_name, value in entry.items():
                t = value if isinstance(value, torch.Tensor) else torch.tensor(value)
                arrays[f"{net_name}/optimizer/{idx:04d}/{field_name}"] = t.detach().cpu().numpy()
        groups = json.dumps(opt_sd["param_groups"]).encode()
        arrays[f"{net_name}/optimizer/param_groups"] = np.frombuffer(groups, dtype=np.uint8)
    arrays["meta/step"] = np.int64(state.step)
    arrays["meta/epoch"] = np.int64(state.epoch)
    arrays["meta/step_in_epoch"] = np.int64(state.step_in_epoch)
    arrays["meta/rng_torch"] = torch.get_rng_state().numpy()
    names = json.dumps(sorted(state.networks())).encode()
    arrays["meta/networks"] = np.frombuffer(names, dtype=np.uint8)
    return arrays


def save_checkpoint(path, state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = collect_arrays(state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())
    return path


def read_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    out = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            with zf.open(name) as fh:
                out[name[:-4]] = np.load(io.BytesIO(fh.read()))
    return out


def load_checkpoint(path, state) -> None:
    """Restore networks, optimizers, counters and the torch RNG stream in place."""
    arrays = read_arrays(path)
    saved_nets = json.loads(bytes(arrays["meta/networks"]).decode())
    have_nets = sorted(state.networks())
    if saved_nets != have_nets:
        raise ValueError(
            f"checkpoint networks {saved_nets} do not match configured networks {have_nets}"
        )
    for net_name, module in state.networks().items():
        sd = module.state_dict()
        new_sd = {}
        for key, old in sd.items():
            arr = arrays.get(_archive_key(net_name, key))
            if arr is None:
                raise ValueError(f"checkpoint missing array for {net_name}/{key}")
            t = torch.from_numpy(np.asarray(arr).copy())
            if tuple(t.shape) != tuple(old.shape):
                raise ValueError(
                    f"shape mismatch for {net_name}/{key}: checkpoint {tuple(t.shape)} "
                    f"vs model {tuple(old.shape)}"
                )
            new_sd[key] = t.to(old.dtype)
        module.load_state_dict(new_sd)

        prefix = f"{net_name}/optimizer/"
        opt = state.optimizers[net_name]
        groups_key = prefix + "param_groups"
        saved_groups = json.loads(bytes(arrays[groups_key]).decode())
        opt_state: dict[int, dict] = {}
        for name, arr in arrays.items():
            if not name.startswith(prefix) or name == groups_key:
                continue
            _, _, idx, field_name = name.split("/")
            entry = opt_state.setdefault(int(idx), {})
            entry[field_name] = torch.from_numpy(np.asarray(arr).copy())
        current_groups = opt.state_dict()["param_groups"]
        for cur, saved in zip(current_groups, saved_groups):
            saved["params"] = cur["params"]
        opt.load_state_dict({"state": opt_state, "param_groups": saved_groups})

    state.step = int(arrays["meta/step"])
    state.epoch = int(arrays["meta/epoch"])
    state.step_in_epoch = int(arrays["meta/step_in_epoch"])
    torch.set_rng_state(torch.from_numpy(arrays["meta/rng_torch"].copy()))
