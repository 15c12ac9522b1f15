"""JSON run configuration: strict parsing, documented defaults, round-trip.

A run config has four sections. Unknown keys anywhere are rejected.

    model  sides (required), layers (required), patch=4, embed_dim=32,
           hidden_dim=4*embed_dim, heads=4, num_classes=10, channels=3,
           resize="box"
    train  epochs=20, batch_size=32, lr=1e-3, lr_min=0.0,
           betas=[0.9, 0.999], eps=1e-8, weight_decay=0.1, seed=0,
           augment=false, loss_weights=null (uniform), checkpoint_every=0
    exit   thresholds=0.0 (scalar broadcast or per-branch list of B-1),
           sweep=null (10 points, 0 .. ln(num_classes))
    data   source ("synth" or "cifar10", required), path=null,
           samples=1000, easy_frac=0.5, test_frac=0.2
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .data import Dataset, load_cifar10, synth_dataset
from .errors import ConfigError
from .model import RavitConfig
from .training import TrainConfig


def _require_mapping(obj, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    return obj


def _reject_unknown(obj: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")


def _get(obj: dict, key: str, default, path: str, kind):
    value = obj.get(key, default)
    if value is None:
        return None
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}.{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}.{key}: expected a number, got {value!r}")
        return float(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}.{key}: expected true/false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}.{key}: expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _get_number_list(obj: dict, key: str, default, path: str, kind) -> tuple | None:
    value = obj.get(key, default)
    if value is None:
        return None
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}.{key}: expected a list, got {value!r}")
    out = []
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{path}.{key}[{i}]: expected a number, got {item!r}")
        if kind is int and not isinstance(item, int):
            raise ConfigError(f"{path}.{key}[{i}]: expected an integer, got {item!r}")
        out.append(kind(item))
    return tuple(out)


@dataclass(frozen=True)
class ExitSection:
    thresholds: tuple[float, ...]
    sweep: tuple[float, ...]


@dataclass(frozen=True)
class DataSection:
    source: str
    path: str | None
    samples: int
    easy_frac: float
    test_frac: float


@dataclass(frozen=True)
class RunConfig:
    model: RavitConfig
    train: TrainConfig
    exit: ExitSection
    data: DataSection

    def to_dict(self) -> dict:
        """Full canonical document; parsing it back yields an equal RunConfig."""
        return {
            "model": {
                "sides": list(self.model.sides),
                "layers": list(self.model.layers),
                "patch": self.model.patch,
                "embed_dim": self.model.embed_dim,
                "hidden_dim": self.model.hidden_dim,
                "heads": self.model.heads,
                "num_classes": self.model.num_classes,
                "channels": self.model.channels,
                "resize": self.model.resize_mode,
            },
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "lr_min": self.train.lr_min,
                "betas": [self.train.beta1, self.train.beta2],
                "eps": self.train.eps,
                "weight_decay": self.train.weight_decay,
                "seed": self.train.seed,
                "augment": self.train.augment,
                "loss_weights": list(self.model.loss_weights),
                "checkpoint_every": self.train.checkpoint_every,
            },
            "exit": {
                "thresholds": list(self.model.exit_thresholds),
                "sweep": list(self.exit.sweep),
            },
            "data": {
                "source": self.data.source,
                "path": self.data.path,
                "samples": self.data.samples,
                "easy_frac": self.data.easy_frac,
                "test_frac": self.data.test_frac,
            },
        }


def parse_run_config(source) -> RunConfig:
    """Parse a run config from a path, JSON text, or an already-decoded dict."""
    if isinstance(source, dict):
        doc = source
    else:
        if isinstance(source, (str, Path)) and Path(source).exists():
            text = Path(source).read_text()
        elif isinstance(source, str):
            text = source
        else:
            raise ConfigError(f"config file not found: {source}")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc

    doc = _require_mapping(doc, "config")
    _reject_unknown(doc, {"model", "train", "exit", "data"}, "config")
    model_doc = _require_mapping(doc.get("model", {}), "model")
    train_doc = _require_mapping(doc.get("train", {}), "train")
    exit_doc = _require_mapping(doc.get("exit", {}), "exit")
    data_doc = _require_mapping(doc.get("data", {}), "data")

    _reject_unknown(
        model_doc,
        {"sides", "layers", "patch", "embed_dim", "hidden_dim", "heads", "num_classes", "channels", "resize"},
        "model",
    )
    sides = _get_number_list(model_doc, "sides", None, "model", int)
    layers = _get_number_list(model_doc, "layers", None, "model", int)
    if sides is None or layers is None:
        raise ConfigError("model.sides and model.layers are required")
    embed_dim = _get(model_doc, "embed_dim", 32, "model", int)
    hidden_dim = _get(model_doc, "hidden_dim", 4 * embed_dim, "model", int)

    _reject_unknown(
        train_doc,
        {"epochs", "batch_size", "lr", "lr_min", "betas", "eps", "weight_decay", "seed", "augment",
         "loss_weights", "checkpoint_every"},
        "train",
    )
    betas = _get_number_list(train_doc, "betas", (0.9, 0.999), "train", float)
    if len(betas) != 2:
        raise ConfigError(f"train.betas: expected two values, got {len(betas)}")
    loss_weights = _get_number_list(train_doc, "loss_weights", None, "train", float)

    _reject_unknown(exit_doc, {"thresholds", "sweep"}, "exit")
    raw_th = exit_doc.get("thresholds", 0.0)
    if isinstance(raw_th, list):
        thresholds = _get_number_list(exit_doc, "thresholds", None, "exit", float)
    elif isinstance(raw_th, bool) or not isinstance(raw_th, (int, float)):
        raise ConfigError(f"exit.thresholds: expected a number or list, got {raw_th!r}")
    else:
        thresholds = (float(raw_th),) * (len(sides) - 1)
    sweep = _get_number_list(exit_doc, "sweep", None, "exit", float)

    _reject_unknown(data_doc, {"source", "path", "samples", "easy_frac", "test_frac"}, "data")
    source_name = _get(data_doc, "source", None, "data", str)
    if source_name not in ("synth", "cifar10"):
        raise ConfigError(f"data.source must be 'synth' or 'cifar10', got {source_name!r}")

    try:
        model = RavitConfig(
            sides=sides,
            layers=layers,
            patch=_get(model_doc, "patch", 4, "model", int),
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            heads=_get(model_doc, "heads", 4, "model", int),
            num_classes=_get(model_doc, "num_classes", 10, "model", int),
            channels=_get(model_doc, "channels", 3, "model", int),
            exit_thresholds=thresholds,
            loss_weights=loss_weights,
            resize_mode=_get(model_doc, "resize", "box", "model", str),
        )
        train = TrainConfig(
            epochs=_get(train_doc, "epochs", 20, "train", int),
            batch_size=_get(train_doc, "batch_size", 32, "train", int),
            lr=_get(train_doc, "lr", 1e-3, "train", float),
            lr_min=_get(train_doc, "lr_min", 0.0, "train", float),
            beta1=betas[0],
            beta2=betas[1],
            eps=_get(train_doc, "eps", 1e-8, "train", float),
            weight_decay=_get(train_doc, "weight_decay", 0.1, "train", float),
            seed=_get(train_doc, "seed", 0, "train", int),
            augment=_get(train_doc, "augment", False, "train", bool),
            checkpoint_every=_get(train_doc, "checkpoint_every", 0, "train", int),
        )
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    if sweep is None:
        top = math.log(model.num_classes)
        sweep = tuple(top * i / 9 for i in range(10))

    return RunConfig(
        model=model,
        train=train,
        exit=ExitSection(thresholds=model.exit_thresholds, sweep=sweep),
        data=DataSection(
            source=source_name,
            path=_get(data_doc, "path", None, "data", str),
            samples=_get(data_doc, "samples", 1000, "data", int),
            easy_frac=_get(data_doc, "easy_frac", 0.5, "data", float),
            test_frac=_get(data_doc, "test_frac", 0.2, "data", float),
        ),
    )


def load_dataset(run: RunConfig, seed: int) -> Dataset:
    """Materialize the configured dataset; synth generation uses `seed`."""
    if run.data.source == "cifar10":
        if run.data.path is None:
            raise ConfigError("data.path is required for the cifar10 source")
        ds = load_cifar10(run.data.path)
        if ds.side != run.model.input_side:
            raise ConfigError(
                f"cifar10 images are {ds.side}x{ds.side}, config expects {run.model.input_side}"
            )
        if run.model.num_classes != 10:
            raise ConfigError("cifar10 has 10 classes")
        return ds
    return synth_dataset(
        num_classes=run.model.num_classes,
        samples=run.data.samples,
        side=run.model.input_side,
        easy_frac=run.data.easy_frac,
        seed=seed,
        test_frac=run.data.test_frac,
    )
