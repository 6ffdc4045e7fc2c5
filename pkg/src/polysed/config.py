"""Experiment configuration files.

Plain ``key = value`` lines grouped under bracketed sections; ``#`` starts a
comment.  Errors carry the file name and line number.  Sections:

[dataset]            synthetic corpus recipe and split sizes
[model <tfr_name>]   detector hyperparameters for one feature (the section
                     name, e.g. ``logmel_64`` or ``stft_2048``, defines the
                     feature itself)
[train]              epochs, patience, batch size, numeric precision
[fusion]             which features to fuse and the fitting block length
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .capsnet import CapsNetConfig
from .dataio import ClassSpec, SynthSpec
from .dsp import parse_tfr_name
from .errors import ConfigError


@dataclass
class DatasetConfig:
    synth: SynthSpec
    train_clips: int = 60
    eval_clips: int = 20
    val_fraction: float = 0.2

    @property
    def vocabulary(self) -> list[str]:
        return self.synth.vocabulary


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 20
    batch_size: int = 8
    precision: str = "f64"
    lr: float = 1.0
    rho: float = 0.95
    epsilon: float = 1e-6


@dataclass
class FusionConfig:
    tfrs: list[str] = field(default_factory=list)
    block_len: int = 256


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    models: dict[str, CapsNetConfig]
    train: TrainConfig
    fusion: FusionConfig
    seed: int

    @property
    def vocabulary(self) -> list[str]:
        return self.dataset.vocabulary


def _parse_sections(path: Path) -> list[tuple[str, int, dict[str, tuple[int, str]]]]:
    sections = []
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: unterminated section header")
            current = (line[1:-1].strip(), lineno, {})
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in current[2]:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        current[2][key] = (lineno, value)
    return sections


class _Section:
    def __init__(self, path, name, lineno, entries):
        self.path = path
        self.name = name
        self.lineno = lineno
        self.entries = dict(entries)

    def error(self, key, message):
        lineno = self.entries[key][0] if key in self.entries else self.lineno
        raise ConfigError(f"{self.path}:{lineno}: {message}")

    def take(self, key, convert, default=...):
        if key not in self.entries:
            if default is ...:
                raise ConfigError(
                    f"{self.path}:{self.lineno}: section [{self.name}] is missing key {key!r}")
            return default
        lineno, value = self.entries.pop(key)
        try:
            return convert(value)
        except (ValueError, TypeError):
            raise ConfigError(f"{self.path}:{lineno}: cannot parse {key!r} from {value!r}") from None

    def finish(self):
        if self.entries:
            key = next(iter(self.entries))
            lineno = self.entries[key][0]
            raise ConfigError(
                f"{self.path}:{lineno}: unknown key {key!r} in section [{self.name}]")


def _int_list(value: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in value.split(",") if v.strip())


def _float_pair(value: str) -> tuple[float, float]:
    parts = [float(v.strip()) for v in value.split(",")]
    if len(parts) != 2:
        raise ValueError(value)
    return parts[0], parts[1]


def _int_pair(value: str) -> tuple[int, int]:
    parts = [int(v.strip()) for v in value.split(",")]
    if len(parts) != 2:
        raise ValueError(value)
    return parts[0], parts[1]


def _classes(value: str) -> tuple[ClassSpec, ...]:
    """``label:kind:lo-hi`` entries, comma separated."""
    out = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3 or "-" not in parts[2]:
            raise ValueError(item)
        lo, hi = parts[2].split("-", 1)
        out.append(ClassSpec(parts[0].strip(), parts[1].strip(), float(lo), float(hi)))
    if not out:
        raise ValueError(value)
    return tuple(out)


def _str_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    dataset = None
    train = None
    fusion = None
    models: dict[str, CapsNetConfig] = {}
    model_order: list[str] = []

    for name, lineno, entries in _parse_sections(path):
        sec = _Section(path, name, lineno, entries)
        if name == "dataset":
            classes = sec.take("classes", _classes)
            synth = SynthSpec(
                classes=classes,
                clip_seconds=sec.take("clip_seconds", float, 10.0),
                polyphony=sec.take("polyphony", int, 2),
                events_per_clip=sec.take("events_per_clip", _int_pair, (3, 6)),
                event_seconds=sec.take("event_seconds", _float_pair, (0.6, 2.0)),
                snr_db=sec.take("snr_db", _float_pair, (6.0, 20.0)),
                overlap_fraction=sec.take("overlap_fraction", float, 0.3),
                seed=sec.take("seed", int, 0),
            )
            dataset = DatasetConfig(
                synth=synth,
                train_clips=sec.take("train_clips", int, 60),
                eval_clips=sec.take("eval_clips", int, 20),
                val_fraction=sec.take("val_fraction", float, 0.2),
            )
            sec.finish()
        elif name.startswith("model "):
            tfr_name = name[len("model "):].strip()
            try:
                parse_tfr_name(tfr_name)
            except Exception:
                sec.error(None, f"section [model {tfr_name}] does not name a feature like logmel_64")
            if dataset is None:
                raise ConfigError(f"{path}:{lineno}: [dataset] must come before model sections")
            models[tfr_name] = CapsNetConfig(
                cnn_kernels=sec.take("cnn_kernels", _int_list),
                cnn_kernel_dim=sec.take("cnn_kernel_dim", int),
                pool_dims=sec.take("pool_dims", _int_list),
                n_primary_caps=sec.take("n_primary_caps", int),
                primary_cap_dim=sec.take("primary_cap_dim", int),
                output_cap_dim=sec.take("output_cap_dim", int),
                routing_iters=sec.take("routing_iters", int),
                n_events=len(dataset.vocabulary),
                dropout_rate=sec.take("dropout_rate", float, 0.2),
                l2_weight=sec.take("l2_weight", float, 1e-4),
            )
            model_order.append(tfr_name)
            sec.finish()
        elif name == "train":
            train = TrainConfig(
                epochs=sec.take("epochs", int, 100),
                patience=sec.take("patience", int, 20),
                batch_size=sec.take("batch_size", int, 8),
                precision=sec.take("precision", str, "f64"),
                lr=sec.take("lr", float, 1.0),
                rho=sec.take("rho", float, 0.95),
                epsilon=sec.take("epsilon", float, 1e-6),
            )
            if train.precision not in ("f64", "f32"):
                raise ConfigError(f"{path}:{lineno}: precision must be f64 or f32")
            sec.finish()
        elif name == "fusion":
            fusion = FusionConfig(
                tfrs=sec.take("tfrs", _str_list, []),
                block_len=sec.take("block_len", int, 256),
            )
            sec.finish()
        else:
            raise ConfigError(f"{path}:{lineno}: unknown section [{name}]")

    if dataset is None:
        raise ConfigError(f"{path}: missing [dataset] section")
    if not models:
        raise ConfigError(f"{path}: at least one [model <tfr>] section is required")
    train = train or TrainConfig()
    fusion = fusion or FusionConfig()
    if not fusion.tfrs:
        fusion.tfrs = list(model_order)
    for tfr in fusion.tfrs:
        if tfr not in models:
            raise ConfigError(f"{path}: fusion references {tfr!r} but no [model {tfr}] section exists")
    return ExperimentConfig(dataset=dataset, models=models, train=train,
                            fusion=fusion, seed=dataset.synth.seed)
