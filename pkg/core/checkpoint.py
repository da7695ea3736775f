"""
Parameter checkpoints.

<stem>.csv   name,index,value  (row-major flat index, value printed with %.17g)
<stem>.json  format version, ModelConfig, body/head slot names and shapes,
             plus optional extras (e.g. the target normalizer)

Values round-trip exactly: 17 significant digits identify a float64 uniquely.
"""
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from core.exceptions import IngestionError
from core.numerics import DTYPE
from db.models import ModelConfig, ParameterSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, params: ParameterSet, config: ModelConfig, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["name,index,value"]
    for name, tensor in params.merged().items():
        for i, value in enumerate(tensor.detach().reshape(-1).tolist()):
            lines.append(f"{name},{i},{value:.17g}")
    path.write_text("\n".join(lines) + "\n")

    sidecar = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(config),
        "body": {k: list(v.shape) for k, v in params.body.items()},
        "head": {k: list(v.shape) for k, v in params.head.items()},
        "extra": extra or {},
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    logger.info(f"Checkpoint written to {path} ({len(lines) - 1} values)")
    return path


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig, dict]:
    path = Path(path)
    try:
        sidecar = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"{sidecar_path(path)}: unreadable checkpoint sidecar ({e})")
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint format {sidecar.get('format_version')!r}")

    df = pd.read_csv(path, dtype={"name": str, "index": np.int64}, float_precision="round_trip")
    groups = {name: g.sort_values("index") for name, g in df.groupby("name", sort=False)}

    def tensors(shapes: dict) -> dict:
        out = {}
        for name, shape in shapes.items():
            if name not in groups:
                raise IngestionError(f"{path}: tensor {name!r} missing")
            flat = groups[name]["value"].to_numpy()
            if flat.size != int(np.prod(shape)):
                raise IngestionError(f"{path}: tensor {name!r} has {flat.size} values, shape {shape}")
            out[name] = torch.as_tensor(flat.reshape(shape), dtype=DTYPE)
        return out

    cfg = dict(sidecar["model_config"])
    cfg["image_shape"] = tuple(cfg["image_shape"])
    params = ParameterSet(body=tensors(sidecar["body"]), head=tensors(sidecar["head"]))
    return params, ModelConfig(**cfg), sidecar.get("extra", {})
