"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .distill import DistillConfig
from .model import ModelConfig
from .projection import LambdaSchedule

MODES = ("continual", "joint", "vanilla")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "continual"
    er: bool = True
    kd: bool = True
    pro: bool = True
    epochs: int = 4
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.05
    replay_period: int = 4
    seed: int = 0
    data_dir: str | None = None
    memory_capacity: int | None = None  # None: 10% of the first task's training set
    memory_k: int = 5
    temperature: float = 2.0
    tau: float = 0.5
    alpha_max: float = 0.7
    replay_weight: float = 1.0
    lambda0: float = 0.05
    d_proj: int = 32
    d_e: int = 64
    d_h: int = 128
    max_len: int = 32
    init_scale: float = 0.1
    gen_max_len: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.kd and not self.er and self.mode == "continual":
            raise ConfigError("train.kd requires train.er")
        for name in ("epochs", "batch_size", "replay_period", "memory_k", "d_proj", "d_e", "d_h",
                     "max_len", "gen_max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.memory_capacity is not None and self.memory_capacity < 0:
            raise ConfigError("memory.capacity must be >= 0")
        try:
            self.distill_config()
            self.lambda_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def uses_replay(self) -> bool:
        return self.mode == "continual" and self.er

    @property
    def uses_kd(self) -> bool:
        return self.uses_replay and self.kd

    @property
    def uses_pro(self) -> bool:
        return self.mode == "continual" and self.pro

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.temperature, self.tau, self.alpha_max, self.replay_weight)

    def lambda_schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda0)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_e, self.d_h, self.max_len, self.init_scale)

    def label(self) -> str:
        if self.mode != "continual":
            return self.mode
        parts = [n.upper() for n in ("er", "kd", "pro") if getattr(self, n)]
        return "+".join(parts) if parts else "vanilla"


# dotted config key -> RunConfig field
KEYS = {
    "train.mode": "mode",
    "train.er": "er",
    "train.kd": "kd",
    "train.pro": "pro",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.lr": "lr",
    "train.weight_decay": "weight_decay",
    "train.replay_period": "replay_period",
    "train.seed": "seed",
    "train.data": "data_dir",
    "memory.capacity": "memory_capacity",
    "memory.k": "memory_k",
    "distill.temperature": "temperature",
    "distill.tau": "tau",
    "distill.alpha_max": "alpha_max",
    "distill.replay_weight": "replay_weight",
    "pro.lambda0": "lambda0",
    "pro.d_proj": "d_proj",
    "model.d_e": "d_e",
    "model.d_h": "d_h",
    "model.max_len": "max_len",
    "model.init_scale": "init_scale",
    "eval.max_len": "gen_max_len",
}
FIELD_KEYS = {v: k for k, v in KEYS.items()}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    name = KEYS[key]
    kind = _TYPES[name]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "int | None":
            return None if raw.lower() in ("auto", "none") else int(raw)
        if kind == "str | None":
            return None if raw.lower() == "none" else raw
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = asdict(base or RunConfig())
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[KEYS[key]] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_absolute():
        cfg.data_dir = str((Path(path).parent / cfg.data_dir).resolve())
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig, include_data: bool = True) -> str:
    values = asdict(cfg)
    lines = []
    for key, name in KEYS.items():
        if name == "data_dir" and not include_data:
            continue
        v = values[name]
        lines.append(f"{key} = {'none' if (name == 'data_dir' and v is None) else _format_value(v)}")
    return "\n".join(lines) + "\n"
