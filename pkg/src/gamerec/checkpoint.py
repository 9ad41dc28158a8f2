"""Model checkpoint format: one JSON header line, then raw little-endian arrays.

The header declares dimensions, the relation order, hyperparameters and every
array's name/dtype/shape; payload arrays follow in header order. Id arrays are
stored alongside the parameters so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .context_graph import RELATION_ORDER
from .model import ForwardConfig, FusionWeights, ModelState

FORMAT_NAME = "gamerec-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    user_ids: np.ndarray,
    game_ids: np.ndarray,
    config: ForwardConfig,
    hyperparams: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = [
        ("user_ids", np.ascontiguousarray(user_ids, dtype="<u8")),
        ("game_ids", np.ascontiguousarray(game_ids, dtype="<u8")),
    ]
    arrays.extend((name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in state.param_items())
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dim": state.dim,
        "n_users": int(user_ids.size),
        "n_games": int(game_ids.size),
        "relation_order": [k.value for k in RELATION_ORDER],
        "forward": {
            "w_context": config.fusion.context,
            "w_social": config.fusion.social,
            "use_context": config.use_context,
            "use_social": config.use_social,
            "normalization": config.normalization,
            "leaky_slope": config.leaky_slope,
        },
        "hyperparams": hyperparams or {},
        "arrays": [
            {"name": name, "dtype": str(arr.dtype.str), "shape": list(arr.shape)} for name, arr in arrays
        ],
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for _, arr in arrays:
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelState, np.ndarray, np.ndarray, ForwardConfig, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a recognized checkpoint file")
        if header["relation_order"] != [k.value for k in RELATION_ORDER]:
            raise ValueError(f"{path}: relation order mismatch")
        loaded: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            n_bytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ValueError(f"{path}: truncated checkpoint array {entry['name']}")
            loaded[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    user_ids = loaded.pop("user_ids")
    game_ids = loaded.pop("game_ids")
    state = ModelState(**loaded)
    fwd = header["forward"]
    config = ForwardConfig(
        fusion=FusionWeights(context=fwd["w_context"], social=fwd["w_social"]),
        use_context=fwd["use_context"],
        use_social=fwd["use_social"],
        normalization=fwd["normalization"],
        leaky_slope=fwd["leaky_slope"],
    )
    return state, user_ids, game_ids, config, header.get("hyperparams", {})
