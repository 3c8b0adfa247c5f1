"""Datasets, PNG output, checkpoints and run configuration files.

Checkpoint layout (little-endian)::

    b"MGCD"  u16 version  u32 header_len  header(JSON, utf-8)  payload

The JSON header holds the config snapshot, iteration counter, RNG state,
diagnostic history and, per grid, the network spec plus the name and shape of
every stored array.  The payload is those arrays as float32 in header order,
followed by the optional persistent chain store.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import tempfile
import warnings
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .langevin import LangevinConfig
from .network import BatchNorm, Conv, FullyConnected, NetworkSpec, ParamSet, ReLU, SumHead
from .pyramid import HistogramModel, downscale
from .tensor import RunningStats
from .trainer import HISTORY_FIELDS, HISTORY_LEN, TrainConfig, TrainState

log = logging.getLogger(__name__)

MAGIC = b"MGCD"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- images -----------------------------------------------------------------


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """8-bit intensities to [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class ImageSet:
    images: np.ndarray  # (n, C, side, side) in [-1, 1]
    paths: list
    skipped: int = 0


def _fit_square(arr: np.ndarray, target: int) -> np.ndarray:
    """Center-crop an (H, W, C) uint8 array to a square and bring it to ``target`` pixels per side."""
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top:top + side, left:left + side]
    if side == target:
        return to_unit_range(arr)
    if side % target == 0:
        chw = to_unit_range(arr).transpose(2, 0, 1)[None]
        return downscale(chw, side // target)[0].transpose(1, 2, 0)
    img = Image.fromarray(arr.squeeze(-1) if arr.shape[2] == 1 else arr)
    out = np.asarray(img.resize((target, target), Image.BILINEAR))
    return to_unit_range(out.reshape(target, target, -1))


def load_dataset(path, target_size: int, channels: int | None = None) -> ImageSet:
    """Every PNG in a directory, center-cropped, resized to ``target_size`` and mapped to [-1, 1].

    ``channels`` forces 1 (grayscale) or 3 (RGB); by default RGB is used unless
    every readable file is grayscale.  Unreadable files are skipped with a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    raw, paths, skipped = [], [], 0
    for p in files:
        try:
            with Image.open(p) as im:
                im.load()
                raw.append(im.copy())
                paths.append(p)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {p}: {exc}", stacklevel=2)
            skipped += 1
    if not raw:
        raise ValueError(f"no readable PNG images in {root}")
    if channels is None:
        channels = 1 if all(im.mode in ("L", "LA", "I", "I;16", "1") for im in raw) else 3
    mode = "L" if channels == 1 else "RGB"
    out = []
    for im in raw:
        arr = np.asarray(im.convert(mode))
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
        out.append(_fit_square(arr, target_size).transpose(2, 0, 1))
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, root)
    return ImageSet(np.stack(out).astype(np.float32), paths, skipped)


def save_image(image: np.ndarray, path) -> None:
    """Write one (C, H, W) image in [-1, 1] as an 8-bit PNG."""
    arr = to_uint8(image).transpose(1, 2, 0)
    Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr).save(path)


def image_grid(images: np.ndarray, ncol: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile (n, C, H, W) images into a single (C, H', W') array with a white border."""
    n, c, h, w = images.shape
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    out = np.ones((c, nrow * (h + pad) + pad, ncol * (w + pad) + pad), dtype=np.float32)
    for i in range(n):
        r, k = divmod(i, ncol)
        out[:, pad + r * (h + pad):pad + r * (h + pad) + h, pad + k * (w + pad):pad + k * (w + pad) + w] = images[i]
    return out


def save_grid(images: np.ndarray, path, ncol: int | None = None, scale: int = 1) -> None:
    grid = image_grid(images, ncol)
    if scale > 1:
        grid = np.repeat(np.repeat(grid, scale, axis=1), scale, axis=2)
    save_image(grid, path)


def save_mask(mask: np.ndarray, path) -> None:
    """(H, W) or (1, 1, H, W) binary mask as a 1-bit PNG (white = inpaint)."""
    m = np.asarray(mask).reshape(mask.shape[-2], mask.shape[-1]) > 0
    Image.fromarray(m).convert("1").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        m = np.asarray(im.convert("L")) > 127
    return m.astype(np.float32)[None, None]


def write_csv(path, rows: list, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames))
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fieldnames})


def write_history_csv(state: TrainState, path) -> None:
    write_csv(path, list(state.history), HISTORY_FIELDS)


# -- checkpoints ------------------------------------------------------------


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "out_channels": layer.out_channels, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, FullyConnected):
        return {"type": "fc", "out_features": layer.out_features}
    return {"type": {BatchNorm: "batchnorm", ReLU: "relu", SumHead: "sum"}[type(layer)]}


def _layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "conv":
        return Conv(d["out_channels"], d["kernel"], d["stride"], d["padding"])
    if kind == "fc":
        return FullyConnected(d["out_features"])
    return {"batchnorm": BatchNorm, "relu": ReLU, "sum": SumHead}[kind]()


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {"input_shape": list(spec.input_shape), "layers": [_layer_to_dict(l) for l in spec.layers]}


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(tuple(_layer_from_dict(l) for l in d["layers"]), tuple(d["input_shape"]))


def config_to_dict(config: TrainConfig) -> dict:
    out = {f.name: getattr(config, f.name) for f in fields(config) if f.name not in ("langevin", "specs")}
    out["langevin"] = asdict(config.langevin)
    out["specs"] = None if config.specs is None else [spec_to_dict(s) for s in config.specs]
    return out


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    lang = dict(d.pop("langevin"))
    if lang.get("clamp") is not None:
        lang["clamp"] = tuple(lang["clamp"])
    specs = d.pop("specs")
    return TrainConfig(langevin=LangevinConfig(**lang),
                       specs=None if specs is None else tuple(spec_from_dict(s) for s in specs), **d)


def _arrays(state: TrainState):
    for params in state.params:
        for key, value in params.tensors.items():
            yield value
        for idx, st in params.stats.items():
            yield st.mean
            yield st.var
    if state.persistent is not None:
        yield state.persistent


def save_checkpoint(state: TrainState, path) -> None:
    """Atomically write ``state`` (write to a temp file in the same directory, then rename)."""
    header = {
        "config": config_to_dict(state.config),
        "t": state.t,
        "rng": state.rng.bit_generator.state,
        "history": list(state.history),
        "grids": [{
            "grid": p.grid,
            "spec": spec_to_dict(p.spec),
            "tensors": [[k, list(v.shape)] for k, v in p.tensors.items()],
            "stats": [[i, int(s.mean.shape[0])] for i, s in p.stats.items()],
        } for p in state.params],
        "persistent": None if state.persistent is None else list(state.persistent.shape),
        "histogram": None if state.base_histogram is None else {
            "edges": state.base_histogram.edges.tolist(), "probs": state.base_histogram.probs.tolist()},
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", VERSION, len(blob)))
            fh.write(blob)
            for arr in _arrays(state):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise CheckpointFormatError(f"{path}: file too short to be a checkpoint ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < 10 + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if len(shape) else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointFormatError(f"{path}: truncated payload (needs {end} bytes, has {len(data)})")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        offset = end
        return arr

    params = []
    for g in header["grids"]:
        tensors = {k: take(tuple(shape)) for k, shape in g["tensors"]}
        stats = {}
        for idx, c in g["stats"]:
            stats[int(idx)] = RunningStats(take((c,)), take((c,)))
        params.append(ParamSet(spec_from_dict(g["spec"]), g["grid"], tensors, stats))
    persistent = None if header["persistent"] is None else take(tuple(header["persistent"]))
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    history = deque(header["history"], maxlen=HISTORY_LEN)
    hist = header.get("histogram")
    hist = None if hist is None else HistogramModel(np.array(hist["edges"]), np.array(hist["probs"]))
    return TrainState(config_from_dict(header["config"]), params, header["t"], rng, persistent, history, hist)


# -- run configuration ------------------------------------------------------


_LANGEVIN_KEYS = {"langevin_steps": "steps", "step_size": "step_size", "clamp": "clamp",
                  "bn_mode": "bn_mode"}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    dataset: str | None = None
    output_dir: str = "run"
    checkpoint_every: int = 50
    image_size: int = 16
    channels: int | None = None
    normalization: str = "symmetric"  # v / 127.5 - 1
    log_every: int = 10


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    if raw.lower() in ("none", "") and kind is not str:
        return None
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            lo, hi = (float(v) for v in raw.split(","))
            return (lo, hi)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


_TRAIN_TYPES = {"method": str, "batch_size": int, "iterations": int, "lr": float, "decay_every": int,
                "single_steps": int, "cd1_steps": int, "budget_parity": bool, "d": int,
                "channel_scale": float, "sigma": float, "seed": int, "mask_size": int}
_LANGEVIN_TYPES = {"langevin_steps": int, "step_size": float, "clamp": tuple, "bn_mode": str}
_RUN_TYPES = {"dataset": str, "output_dir": str, "checkpoint_every": int, "image_size": int,
              "channels": int, "normalization": str, "log_every": int}


def parse_run_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Flat ``key = value`` lines (``#`` comments); unknown keys and bad values raise ConfigError."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    values.update(overrides or {})
    train_kw, lang_kw, run_kw = {}, {}, {}
    for key, raw in values.items():
        if key in _TRAIN_TYPES:
            train_kw[key] = _parse_value(key, raw, _TRAIN_TYPES[key])
        elif key in _LANGEVIN_TYPES:
            lang_kw[_LANGEVIN_KEYS[key]] = _parse_value(key, raw, _LANGEVIN_TYPES[key])
        elif key in _RUN_TYPES:
            run_kw[key] = _parse_value(key, raw, _RUN_TYPES[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if run_kw.get("normalization", "symmetric") != "symmetric":
        raise ConfigError("normalization: only 'symmetric' (v/127.5 - 1) is supported")
    for key in ("checkpoint_every", "log_every"):
        if key in run_kw and run_kw[key] is not None and run_kw[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if "image_size" in run_kw and (run_kw["image_size"] or 0) < 2:
        raise ConfigError("image_size must be >= 2")
    if run_kw.get("channels") not in (None, 1, 3):
        raise ConfigError("channels must be 1 or 3")
    try:
        langevin = LangevinConfig(**lang_kw)
        train = TrainConfig(langevin=langevin, **{k: v for k, v in train_kw.items() if v is not None or k in ("single_steps", "cd1_steps", "mask_size")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train=train, **{k: v for k, v in run_kw.items() if v is not None or k in ("dataset", "channels")})


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_run_config(Path(path).read_text(), overrides)


def dump_run_config(rc: RunConfig) -> str:
    t = rc.train
    lines = [f"{k} = {getattr(t, k)}" for k in _TRAIN_TYPES]
    lines += [f"langevin_steps = {t.langevin.steps}", f"step_size = {t.langevin.step_size}",
              f"clamp = {'none' if t.langevin.clamp is None else ','.join(map(str, t.langevin.clamp))}",
              f"bn_mode = {t.langevin.bn_mode}"]
    lines += [f"{k} = {getattr(rc, k)}" for k in _RUN_TYPES]
    return "\n".join(lines) + "\n"
