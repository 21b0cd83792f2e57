"""Line-oriented ``key = value`` run configuration.

Precedence: command-line flags over config-file keys over built-in defaults.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "auto", "") else int(text)


def _levels(text: str) -> tuple[int, ...] | None:
    t = text.strip().lower()
    if t in ("all", "none", ""):
        return None
    return tuple(int(v) for v in t.split(","))


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key(default, parse, doc: str, published: str | None = None, fmt=None):
    meta = {"parse": parse, "doc": doc, "published": published, "fmt": fmt or _fmt}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: default, metadata=meta)
    return field(default=default, metadata=meta)


def _none_fmt(value) -> str:
    return "none" if value is None else _fmt(value)


def _levels_fmt(value) -> str:
    return "all" if value is None else ",".join(str(v) for v in value)


@dataclass(frozen=True)
class RunConfig:
    # model
    levels: int = _key(4, int, "encoder/decoder depth", "four encoder layers")
    base_channels: int = _key(16, int, "channels at the first level; doubles per level")
    input_size: tuple[int, int] = _key((128, 128), _size, "network input HxW", "images resized to 128x128")
    residual: bool = _key(True, _bool, "residual (projected) skips inside conv blocks")
    use_cbam: bool = _key(True, _bool, "CBAM on every skip connection")
    use_hal: bool = _key(True, _bool, "hybrid attention layer on skip connections")
    hal_levels: tuple[int, ...] | None = _key(None, _levels, "levels with HAL ('all' or e.g. 0,1)",
                                              fmt=_levels_fmt)
    patch_size: int = _key(4, int, "HAL patch side M")
    attn_dim: int | None = _key(None, _optional_int, "HAL projection width d ('auto' = channels)")
    reduction: int = _key(2, int, "CBAM MLP reduction ratio r")
    skip_mode: str = _key("series", str, "series = hal(cbam(f)); parallel_sum = cbam(f) + hal(f)",
                          "series connection of CBAM and HAL")
    # training
    epochs: int = _key(150, int, "training epochs", "150 epochs")
    learning_rate: float = _key(1e-5, float, "Adam learning rate", "Adam, lr 1e-5")
    batch_size: int = _key(4, int, "mini-batch size")
    max_steps: int | None = _key(None, _optional_int, "stop after this many optimizer steps ('none' = no cap)",
                                     fmt=_none_fmt)
    loss_alpha: float = _key(1 / 3, float, "Dice loss weight", "average loss weights")
    loss_beta: float = _key(1 / 3, float, "BCE loss weight", "average loss weights")
    loss_lambda: float = _key(1 / 3, float, "focal loss weight", "average loss weights")
    focal_alpha: float = _key(0.25, float, "focal balancing parameter")
    focal_gamma: float = _key(2.0, float, "focal focusing parameter")
    split_train: float = _key(0.7, float, "train fraction", "70% train")
    split_test: float = _key(0.1, float, "test fraction", "10% test")
    split_val: float = _key(0.2, float, "validation fraction", "20% validation")
    threshold: float = _key(0.5, float, "binarization threshold (>=)")
    seed: int = _key(0, int, "RNG seed (falls back to $ASEG_SEED)")
    dtype: str = _key("float32", str, "float32 (fast) or float64 (verification)")

    MODEL_KEYS = ("levels", "base_channels", "input_size", "residual", "use_cbam", "use_hal",
                  "hal_levels", "patch_size", "attn_dim", "reduction", "skip_mode")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def describe(cls) -> list[tuple[str, str, str, str | None]]:
        """(key, default text, doc, published-setting note) for every key."""
        out = []
        for f in fields(cls):
            out.append((f.name, f.metadata["fmt"](f.default), f.metadata["doc"], f.metadata["published"]))
        return out

    def with_overrides(self, values: dict[str, object]) -> RunConfig:
        """Apply overrides; string values are parsed, others taken as-is."""
        meta = {f.name: f.metadata for f in fields(self)}
        changes = {}
        for key, value in values.items():
            if key not in meta:
                raise ConfigError(key, "unknown key")
            if isinstance(value, str):
                try:
                    value = meta[key]["parse"](value)
                except ValueError as exc:
                    raise ConfigError(key, str(exc)) from None
            changes[key] = value
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(_guess_key(str(exc), self.MODEL_KEYS), str(exc)) from None
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")
        try:
            LossWeights(self.loss_alpha, self.loss_beta, self.loss_lambda)
        except ValueError as exc:
            raise ConfigError("loss_alpha", str(exc)) from None
        from .training import TrainConfig

        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(_guess_key(str(exc), [f.name for f in fields(TrainConfig)] + ["split_train"]),
                              str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in self.MODEL_KEYS})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_alpha, self.loss_beta, self.loss_lambda)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            loss_weights=self.loss_weights(), focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma,
            seed=self.seed, split=(self.split_train, self.split_test, self.split_val),
            threshold=self.threshold, max_steps=self.max_steps,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {f.metadata['fmt'](getattr(self, f.name))}\n" for f in fields(self))


def _guess_key(message: str, keys) -> str:
    for key in keys:
        if key in message:
            return key
    return "config"


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Raises on malformed lines."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("", f"line {lineno} has an empty key")
        values[key] = value
    return values


def load_run_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        cfg = cfg.with_overrides(parse_config_text(text))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def model_config_to_text(cfg: ModelConfig) -> str:
    run = RunConfig(**{k: getattr(cfg, k) for k in RunConfig.MODEL_KEYS})
    meta = {f.name: f.metadata for f in fields(RunConfig)}
    lines = [f"{k} = {meta[k]['fmt'](getattr(run, k))}" for k in RunConfig.MODEL_KEYS]
    lines.append(f"in_channels = {cfg.in_channels}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    values = parse_config_text(text)
    in_channels = int(values.pop("in_channels", "1"))
    unknown = set(values) - set(RunConfig.MODEL_KEYS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "not a model key")
    run = RunConfig().with_overrides(values)
    return run.model_config().replace(in_channels=in_channels)
