"""Run configuration files and checkpoints.

Config files are flat ``key = value`` text; ``#`` starts a comment.

A checkpoint is a zip archive (fixed timestamps, so equal content gives
equal bytes) holding:

``manifest.json``
    format name and version, the run configuration, the vocabulary hash,
    the step counter, the random generator states and a tensor table of
    ``{name, shape, offset, count}`` entries;
``tensors.bin``
    every tensor, row-major little-endian float64, concatenated in table
    order;
``vocab.txt``
    the vocabulary, one token per line.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .errors import ContractError, DataError
from .tasks import TASKS
from .training import TrainingConfig, TrainState, make_optimizers

FORMAT_NAME = "crossalign-checkpoint"
FORMAT_VERSION = 1
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)
_DTYPE = np.dtype("<f8")

FULL_DIMS = {"d_emb": 100, "d_y": 200, "d_z": 500}


@dataclass
class RunConfig:
    """Training configuration plus task and path settings of a CLI run."""

    train: TrainingConfig = field(default_factory=TrainingConfig)
    task: str = "cipher"
    rate: float = 1.0
    data: str | None = None
    out: str | None = None
    n_vocab: int = 100
    n_train: int = 10000
    n_dev: int = 1000
    n_test: int = 2000
    max_len: int = 15
    concentration: float = 0.05

    def validate(self, check_paths: bool = False) -> None:
        self.train.validate()
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"rate must lie in [0, 1], got {self.rate}")
        if not self.concentration > 0:
            raise ContractError(f"concentration must be positive, got {self.concentration}")
        if check_paths and self.data is not None and not Path(self.data).exists():
            raise ContractError(f"data directory {self.data} does not exist")

    def to_flat(self) -> dict:
        out = {k: v for k, v in self.train.to_dict().items()}
        for f in fields(self):
            if f.name != "train":
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainingConfig)}
        run_keys = {f.name for f in fields(cls)} - {"train"}
        unknown = set(values) - train_keys - run_keys
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(TrainingConfig.from_dict({k: v for k, v in values.items() if k in train_keys}),
                  **{k: v for k, v in values.items() if k in run_keys})
        cfg.validate()
        return cfg


def _field_types() -> dict[str, object]:
    types = {f.name: f.type for f in fields(TrainingConfig)}
    types.update({f.name: f.type for f in fields(RunConfig) if f.name != "train"})
    return types


def parse_value(key: str, raw: str):
    """Convert a config string to the type of the named field."""
    ftype = str(_field_types().get(key, "str"))
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        if "tuple" in ftype:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
    except ValueError:
        raise ContractError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` pairs, typed by field."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ContractError(f"cannot read config {path}: {e}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ContractError(f"{path}:{n}: expected key = value")
        out[key] = parse_value(key, value)
    return out


def write_config_file(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for k, v in cfg.to_flat().items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def merge_config(defaults: dict, file_values: dict, cli_values: dict) -> RunConfig:
    """Command-line values beat file values, which beat defaults.  ``None``
    on the command line means "not given"."""
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    return RunConfig.from_flat(merged)


# --------------------------------------------------------------- checkpoint


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    """Every array a run needs to continue: parameters and optimiser moments."""
    out = {f"param.{k}": v.data for k, v in state.params.named_params().items()}
    for name, opt in state.opt.items():
        out.update(opt.state_arrays(f"opt.{name}"))
    return out


def save_checkpoint(path: str | Path, state: TrainState, vocab: Vocabulary,
                    run: RunConfig | None = None) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    run = run or RunConfig(state.cfg)
    tensors = state_tensors(state)
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in run.to_flat().items()},
        "vocab_hash": vocab.content_hash(),
        "step": state.step,
        "rng": {"data": _rng_state(state.data_rng), "noise": _rng_state(state.noise_rng)},
        "tensors": table,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        _zip_write(zf, "tensors.bin", b"".join(blobs))
        _zip_write(zf, "vocab.txt", ("\n".join(vocab.tokens) + "\n").encode())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    state: TrainState
    vocab: Vocabulary
    run: RunConfig
    manifest: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            raw = zf.read("tensors.bin")
            tokens = zf.read("vocab.txt").decode().splitlines()
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format')} "
                        f"v{manifest.get('version')}")
    vocab = Vocabulary(tokens)
    if vocab.content_hash() != manifest["vocab_hash"]:
        raise DataError(f"{path}: vocabulary does not match its recorded hash")
    flat = np.frombuffer(raw, dtype=_DTYPE)
    arrays = {t["name"]: flat[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).copy()
              for t in manifest["tensors"]}
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["config"].items()}
    run = RunConfig.from_flat(values)
    state = TrainState.create(run.train, len(vocab))
    for k, p in state.params.named_params().items():
        key = f"param.{k}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise DataError(f"{path}: tensor {key} missing or misshapen")
        p.data[...] = arrays[key]
    state.opt = make_optimizers(state.params, run.train)
    for name, opt in state.opt.items():
        opt.load_state_arrays(f"opt.{name}", arrays)
    state.data_rng = _restore_rng(manifest["rng"]["data"])
    state.noise_rng = _restore_rng(manifest["rng"]["noise"])
    state.step = int(manifest["step"])
    return Checkpoint(state, vocab, run, manifest)
