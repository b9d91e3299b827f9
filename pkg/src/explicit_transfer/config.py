"""Experiment configuration: a strict ``key = value`` file with ``[section]`` headers."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import ToyConfig

TASKS = ("rotated-images", "toy-sequences", "lane-change")
METHODS = ("finetune", "coral", "imp", "ours-T1", "ours-T2", "mode0-T1", "mode0-T2", "mode2-T1", "mode2-T2")

TASK_DEFAULTS = {
    "rotated-images": {"b_values": [100], "mode": 0},
    "toy-sequences": {"b_values": [100, 500, 2000], "mode": 1, "clip_norm": 5.0},
    "lane-change": {"b_values": [100, 500, 1000], "mode": 1, "clip_norm": 5.0},
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt(conv):
    def parse(text: str):
        return None if text.lower() in ("none", "") else conv(text)
    parse.__name__ = f"optional {conv.__name__}"
    return parse


def _list(conv):
    def parse(text: str):
        items = [t.strip() for t in text.replace(",", " ").split()]
        return [conv(t) for t in items if t]
    parse.__name__ = f"list of {conv.__name__}"
    return parse


def _pair(text: str) -> tuple:
    lo, hi = _list(float)(text)
    return (lo, hi)


_pair.__name__ = "pair of float"
_bool.__name__ = "bool"

# section -> key -> (parser, default, help); None defaults depend on the task
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "task": (str, None, f"one of {', '.join(TASKS)} (required)"),
        "methods": (_list(str), None, f"subset of {', '.join(METHODS)} (required)"),
        "b_values": (_list(int), None, "domain-B training sizes; task default"),
        "seeds": (_list(int), [0], "one grid point per seed"),
        "n_corr": (int, 5, "correspondence partners per target sample"),
        "mode": (int, None, "train mode of the ours-* methods (0, 1, 2); 0 for images, 1 otherwise"),
        "test_fraction": (float, 0.2, "held-out share of domain B"),
        "coral_ridge": (float, 1.0, "ridge added to both covariances"),
        "converted_samples": (int, 4, "test samples per method written to converted_samples.csv"),
    },
    "training": {
        "lr": (float, 1e-3, "Adam learning rate"),
        "base_lr": (_opt(float), None, "learning rate of the base model and B-on-B (defaults to lr)"),
        "finetune_lr": (_opt(float), None, "learning rate of step 3 (defaults to lr)"),
        "base_epochs": (int, 20, "epochs for the base model and the B-on-B reference"),
        "pretrain_epochs": (int, 20, "step 1 epochs"),
        "corr_epochs": (int, 20, "step 2 maximum epochs"),
        "finetune_epochs": (int, 20, "step 3 epochs"),
        "batch_size": (int, 32, "mini-batch size"),
        "lambda_corr": (float, 1.0, "weight of the correspondence loss in mode 1"),
        "patience": (int, 5, "step 2 early-stopping patience"),
        "val_fraction": (float, 0.2, "step 2 held-out share"),
        "clip_norm": (_opt(float), None, "global gradient-norm clip (none to disable); 5 for sequence tasks"),
        "squared_corr": (_bool, False, "use squared distances in the correspondence loss"),
    },
    "model": {
        "hidden": (int, 64, "LSTM hidden size of the base model"),
        "channels": (_list(int), [8, 16, 32], "CNN channels of the base model"),
        "converter_hidden": (int, 16, "LSTM hidden size of the converter"),
        "converter_channels": (_list(int), [8, 16], "CNN channels of the converter"),
        "family": (_opt(str), None, "transform family; euclidean for images, affine for sequences"),
        "activation": (str, "linear", "converter output activation (linear or softmax)"),
        "head_scale": (float, 0.1, "scale of the converter's initial output weights"),
    },
    "data": {
        "data_dir": (_opt(str), None, "directory with MNIST IDX files or A/ and B/ sequence folders"),
        "image_source": (str, "auto", "auto, mnist, mnist-5k or digits"),
        "max_images": (_opt(int), None, "cap on the image pool"),
        "n_a": (int, 2000, "toy sequences generated for domain A"),
        "n_b": (int, 2500, "toy sequences generated for domain B"),
    },
    "toy": {f.name: ((_pair if f.name == "wander_period_s" else _bool if f.type in ("bool", bool) else float),
                     f.default, f"toy generator {f.name}")
            for f in dataclasses.fields(ToyConfig)},
    "output": {
        "out_dir": (str, "out", "output directory"),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str
    methods: list
    b_values: list
    seeds: list = field(default_factory=lambda: [0])
    n_corr: int = 5
    mode: int = 1
    test_fraction: float = 0.2
    coral_ridge: float = 1.0
    converted_samples: int = 4
    lr: float = 1e-3
    base_lr: float | None = None
    finetune_lr: float | None = None
    base_epochs: int = 20
    pretrain_epochs: int = 20
    corr_epochs: int = 20
    finetune_epochs: int = 20
    batch_size: int = 32
    lambda_corr: float = 1.0
    patience: int = 5
    val_fraction: float = 0.2
    clip_norm: float | None = None
    squared_corr: bool = False
    hidden: int = 64
    channels: list = field(default_factory=lambda: [8, 16, 32])
    converter_hidden: int = 16
    converter_channels: list = field(default_factory=lambda: [8, 16])
    family: str | None = None
    activation: str = "linear"
    head_scale: float = 0.1
    data_dir: str | None = None
    image_source: str = "auto"
    max_images: int | None = None
    n_a: int = 2000
    n_b: int = 2500
    toy: ToyConfig = field(default_factory=ToyConfig)
    out_dir: str = "out"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods contain duplicates")
        if not self.b_values or any(b <= 0 for b in self.b_values) \
                or any(b2 <= b1 for b1, b2 in zip(self.b_values, self.b_values[1:])):
            raise ConfigError("b_values must be positive and strictly ascending")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.mode not in (0, 1, 2):
            raise ConfigError("mode must be 0, 1 or 2")
        if self.n_corr <= 0:
            raise ConfigError("n_corr must be positive")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.lambda_corr < 0 or self.coral_ridge < 0:
            raise ConfigError("lambda_corr and coral_ridge must be nonnegative")
        if self.activation not in ("linear", "softmax"):
            raise ConfigError("activation must be linear or softmax")
        if self.image_source not in ("auto", "mnist", "mnist-5k", "digits"):
            raise ConfigError("image_source must be auto, mnist, mnist-5k or digits")
        for name in ("batch_size", "n_a", "n_b", "hidden", "converter_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        try:
            self.toy.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid toy generator settings: {exc}") from exc

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(parser, text: str, where: str):
    if parser is str:
        return text
    try:
        return parser(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: expected {getattr(parser, '__name__', 'value')}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, object] = {}
    toy: dict[str, object] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError(f"{where}: key {key!r} appears before any [section] header")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
        parsed = _convert(SCHEMA[section][key][0], value, f"{where}: key {key!r}")
        target = toy if section == "toy" else values
        if key in target:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        target[key] = parsed
    for req in ("task", "methods"):
        if req not in values:
            raise ConfigError(f"{source}: missing required key {req!r} in section [experiment]")
    task = values["task"]
    if task not in TASKS:
        raise ConfigError(f"{source}: unknown task {task!r}; expected one of {TASKS}")
    for key, default in TASK_DEFAULTS[task].items():
        values.setdefault(key, default)
    for key in [k for k, v in values.items() if v is None]:
        del values[key]
    try:
        toy_cfg = ToyConfig(**toy)
        if task == "lane-change":
            toy_cfg.with_velocity = True
        cfg = ExperimentConfig(toy=toy_cfg, **values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def defaults_help() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, text) in keys.items():
            shown = "task default" if default is None and key in ("b_values", "mode", "clip_norm") else default
            if isinstance(shown, (list, tuple)):
                shown = ", ".join(str(v) for v in shown)
            lines.append(f"  {key} = {shown}    ({text})")
    return "\n".join(lines)
