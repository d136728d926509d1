import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


def _ensure_parent(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_rgb(path: PathLike, pixels: np.ndarray) -> None:
    """
    Writes an H×W×3 float image in [0, 1] as an 8-bit RGB PNG.
    """
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(_ensure_parent(path), format="PNG")


def load_rgb(path: PathLike) -> np.ndarray:
    with Image.open(path) as image:
        data = np.asarray(image.convert("RGB"), dtype=np.uint8)
    return data.astype(np.float64) / 255.0


def save_mask(path: PathLike, mask: np.ndarray) -> None:
    """
    Writes a {0,1} mask as an 8-bit {0,255} grayscale PNG.
    """
    data = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(_ensure_parent(path), format="PNG")


def load_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as image:
        data = np.asarray(image.convert("L"), dtype=np.uint8)
    return (data > 127).astype(np.uint8)


def quantize16(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 65535.0), 0, 65535).astype(np.uint16)


def save_map16(path: PathLike, values: np.ndarray) -> None:
    """
    Writes a [0, 1] float map as a 16-bit grayscale PNG scaled by 65535.
    """
    data = quantize16(values)
    Image.fromarray(data).save(_ensure_parent(path), format="PNG")


def load_map16(path: PathLike) -> np.ndarray:
    with Image.open(path) as image:
        data = np.asarray(image, dtype=np.uint16)
    return data.astype(np.float64) / 65535.0


def write_json(path: PathLike, payload: Any) -> None:
    path = _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: PathLike, rows: Iterable[Dict[str, Any]]) -> None:
    path = _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
