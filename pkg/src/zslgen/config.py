"""Experiment configuration: typed INI-style files plus flag overrides.

Files are ``key = value`` lines under section headers. Every key is
declared in the schema below with its type; unknown keys, malformed
values, and out-of-range settings are rejected with the offending key
named. ``parse -> serialize -> parse`` is the identity, and the resolved
configuration is echoed into each run directory for provenance.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .networks import ModulationVariant, NetworkConfig
from .training import TrainConfig, TrainingError


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    features: str = ""
    attributes: str = ""
    labels: str = ""
    split: str = ""


@dataclass(frozen=True)
class ClassifierConfig:
    classifier: str = "weighted-soft"  # softmax | weighted-soft | svm | weighted-svm
    samples_per_class_zsl: int = 100
    samples_per_class_gzsl: int = 300
    gzsl_seen_mode: str = "synthetic"  # synthetic | real
    softmax_epochs: int = 20
    softmax_lr: float = 1e-2
    softmax_hidden: int = 256
    softmax_batch: int = 64
    svm_epochs: int = 100
    svm_lr: float = 0.1
    svm_reg: float = 1.0
    allow_negative_quality: bool = False


@dataclass(frozen=True)
class EvalConfig:
    retrieval_ks: tuple[int, ...] = (5, 10)
    retrieval_metric: str = "euclidean"  # euclidean | cosine
    retrieval_pool: str = "unseen"       # unseen | all


@dataclass(frozen=True)
class SweepConfig:
    sample_counts: tuple[int, ...] = (25, 50, 100, 200)
    sigmas: tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs/out"


# file key -> dataclass field, where the two differ
_RENAMES = {
    ("train", "k_shot_support"): "k_sup",
    ("train", "k_shot_query"): "k_qry",
}
_SECTION_TYPES = {
    "data": DataConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "classifier": ClassifierConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}


def _file_key(section: str, field_name: str) -> str:
    for (sec, fkey), fname in _RENAMES.items():
        if sec == section and fname == field_name:
            return fkey
    return field_name


def _field_for(section: str, key: str):
    cls = _SECTION_TYPES[section]
    name = _RENAMES.get((section, key), key)
    for f in fields(cls):
        if f.name == name:
            return f
    return None


def _parse_value(section: str, key: str, text: str, type_hint: str):
    text = text.strip()
    try:
        if type_hint == "int":
            return int(text)
        if type_hint == "float":
            return float(text)
        if type_hint == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if type_hint == "str":
            return text
        if type_hint.startswith("tuple[int"):
            return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
        if type_hint.startswith("tuple[float"):
            return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {text!r} as {type_hint}"
        ) from None
    raise ConfigError(f"[{section}] {key}: unsupported type {type_hint}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Load a config file (defaults apply for absent keys), then apply
    ``section.key -> value`` overrides (flags win over the file)."""
    sections: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    out_dir = None

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
        for section in parser.sections():
            if section == "output":
                for key, value in parser.items(section):
                    if key != "out_dir":
                        raise ConfigError(f"[output] unknown key {key!r}")
                    out_dir = value.strip()
                continue
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                f = _field_for(section, key)
                if f is None:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                sections[section][f.name] = _parse_value(section, key, value, f.type)

    for dotted, value in (overrides or {}).items():
        if dotted == "output.out_dir":
            out_dir = value
            continue
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTION_TYPES:
            raise ConfigError(f"override {dotted!r}: unknown section")
        f = _field_for(section, key)
        if f is None:
            raise ConfigError(f"override {dotted!r}: unknown key")
        sections[section][f.name] = (
            value if not isinstance(value, str) else _parse_value(section, key, value, f.type)
        )

    cfg = ExperimentConfig(
        data=DataConfig(**sections["data"]),
        network=NetworkConfig(**sections["network"]),
        train=TrainConfig(**sections["train"]),
        classifier=ClassifierConfig(**sections["classifier"]),
        eval=EvalConfig(**sections["eval"]),
        sweep=SweepConfig(**sections["sweep"]),
        out_dir=out_dir if out_dir is not None else ExperimentConfig.out_dir,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    try:
        cfg.train.validate()
    except TrainingError as err:
        raise ConfigError(f"[train] {err}") from err
    try:
        ModulationVariant.parse(cfg.train.modulation_variant)
    except ValueError as err:
        raise ConfigError(f"[train] modulation_variant: {err}") from err
    if cfg.classifier.classifier not in ("softmax", "weighted-soft", "svm", "weighted-svm"):
        raise ConfigError(
            f"[classifier] classifier must be softmax|weighted-soft|svm|weighted-svm, "
            f"got {cfg.classifier.classifier!r}"
        )
    if cfg.classifier.gzsl_seen_mode not in ("synthetic", "real"):
        raise ConfigError("[classifier] gzsl_seen_mode must be synthetic or real")
    if cfg.classifier.samples_per_class_zsl < 1 or cfg.classifier.samples_per_class_gzsl < 1:
        raise ConfigError("[classifier] samples per class must be >= 1")
    if cfg.eval.retrieval_metric not in ("euclidean", "cosine"):
        raise ConfigError("[eval] retrieval_metric must be euclidean or cosine")
    if cfg.eval.retrieval_pool not in ("unseen", "all"):
        raise ConfigError("[eval] retrieval_pool must be unseen or all")
    if not cfg.eval.retrieval_ks:
        raise ConfigError("[eval] retrieval_ks must not be empty")


def serialize_config(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    for section, sub in (
        ("data", cfg.data),
        ("network", cfg.network),
        ("train", cfg.train),
        ("classifier", cfg.classifier),
        ("eval", cfg.eval),
        ("sweep", cfg.sweep),
    ):
        buf.write(f"[{section}]\n")
        for f in fields(sub):
            buf.write(f"{_file_key(section, f.name)} = {_format_value(getattr(sub, f.name))}\n")
        buf.write("\n")
    buf.write("[output]\n")
    buf.write(f"out_dir = {cfg.out_dir}\n")
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects the trained model."""
    relevant = serialize_config(replace(cfg, out_dir=""))
    start = relevant.index("[network]")
    end = relevant.index("[classifier]")
    return hashlib.sha256(relevant[start:end].encode()).hexdigest()[:16]
