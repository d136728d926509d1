"""
Versioned single-file weight container written with torch.save.

The payload is a dict holding the format version, a JSON header with free-form
metadata (kind, architecture, hyperparameters, seeds) and the state dict.
"""
import json
import pickle
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import torch

from epsam.errors import ConfigurationError

FORMAT_VERSION = 1


def save(path: Union[str, Path], state_dict: Mapping[str, torch.Tensor], metadata: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "header": json.dumps(metadata, sort_keys=True),
        "state_dict": OrderedDict((name, tensor.detach().cpu().clone()) for name, tensor in state_dict.items()),
    }
    torch.save(payload, path)
    return path


def load(path: Union[str, Path]) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise ConfigurationError(f"{path} is not an epsam checkpoint: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigurationError(f"{path} is not an epsam checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload['format_version']}")
    return OrderedDict(payload["state_dict"]), json.loads(payload["header"])
