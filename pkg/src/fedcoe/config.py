"""Run configuration: defaults, JSON loading, key=value overrides, validation."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from .gating import CONFIDENCE_MODES
from .nn_core import MlpSpec, SgdConfig

METHODS = ("fedcoe", "fedavg", "fedprox", "ablation_no_gate", "ablation_single_expert")
SEED_ENV = "FEDCOE_SEED"


class ConfigError(ValueError):
    """Raised with the offending key for malformed, unknown or out-of-range settings."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class SgdSettings:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    # federation
    num_clients: int = 10
    num_experts: int = 4
    k_active: int = 2
    alpha_dirichlet: float = 0.1
    rounds: int = 200
    local_epochs: int = 2
    pretrain_epochs: int = 30
    gate_update_every: int = 10
    gate_finetune_epochs: int = 5
    tau: float = 0.5
    n_top: Optional[int] = None  # resolved to ceil(num_clients / 2)
    seed: int = 0
    method: str = "fedcoe"
    fedprox_mu: float = 0.01
    epsilon: float = 1e-8
    confidence_subsample: Optional[int] = None
    gate_confidence: str = "log_true"
    sgd: SgdSettings = field(default_factory=SgdSettings)
    # synthetic task
    num_classes: int = 8
    input_dim: int = 16
    hidden_dims: Tuple[int, ...] = (3,)
    samples_per_class: int = 300
    test_samples_per_class: int = 150
    spread: float = 0.7
    reserved_fraction: float = 0.2
    test_fraction: float = 0.2
    min_client_size: int = 10

    @property
    def effective_num_experts(self) -> int:
        return 1 if self.method == "ablation_single_expert" else self.num_experts

    @property
    def effective_k_active(self) -> int:
        return min(self.k_active, self.effective_num_experts)

    def sgd_config(self, local_epochs: Optional[int] = None) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.sgd.learning_rate,
            momentum=self.sgd.momentum,
            weight_decay=self.sgd.weight_decay,
            batch_size=self.sgd.batch_size,
            local_epochs=self.local_epochs if local_epochs is None else local_epochs,
        )

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(self.input_dim, tuple(self.hidden_dims), self.num_classes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


_INT_KEYS = {
    "num_clients", "num_experts", "k_active", "rounds", "local_epochs", "pretrain_epochs",
    "gate_update_every", "gate_finetune_epochs", "n_top", "seed", "confidence_subsample",
    "num_classes", "input_dim", "samples_per_class", "test_samples_per_class", "min_client_size",
}  # fmt: skip
_FLOAT_KEYS = {
    "alpha_dirichlet", "tau", "fedprox_mu", "epsilon", "spread", "reserved_fraction",
    "test_fraction",
}  # fmt: skip
_SGD_INT_KEYS = {"batch_size"}
_SGD_FLOAT_KEYS = {"learning_rate", "momentum", "weight_decay"}


def _coerce(key: str, value, kind):
    if value is None and key in ("n_top", "confidence_subsample"):
        return None
    try:
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if isinstance(value, bool):
            raise ValueError
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from None


def _validate(cfg: RunConfig) -> None:
    def need(ok: bool, key: str, msg: str):
        if not ok:
            raise ConfigError(key, msg)

    for key in ("num_clients", "num_experts", "k_active", "rounds", "gate_update_every",
                "num_classes", "input_dim", "samples_per_class", "test_samples_per_class"):  # fmt: skip
        need(getattr(cfg, key) >= 1, key, f"must be >= 1, got {getattr(cfg, key)}")
    for key in ("local_epochs", "pretrain_epochs", "gate_finetune_epochs", "min_client_size"):
        need(getattr(cfg, key) >= 0, key, f"must be >= 0, got {getattr(cfg, key)}")
    need(cfg.alpha_dirichlet > 0, "alpha_dirichlet", f"must be > 0, got {cfg.alpha_dirichlet}")
    need(0 <= cfg.tau <= 1, "tau", f"must be in [0, 1], got {cfg.tau}")
    need(cfg.num_classes >= 2, "num_classes", "must be >= 2")
    need(cfg.k_active <= cfg.num_experts, "k_active", "must not exceed num_experts")
    need(cfg.num_experts <= cfg.num_classes, "num_experts", "must not exceed num_classes")
    need(cfg.n_top is not None and 1 <= cfg.n_top <= cfg.num_clients, "n_top",
         f"must be in [1, num_clients], got {cfg.n_top}")  # fmt: skip
    need(cfg.method in METHODS, "method", f"must be one of {METHODS}, got {cfg.method!r}")
    need(cfg.gate_confidence in CONFIDENCE_MODES, "gate_confidence",
         f"must be one of {CONFIDENCE_MODES}, got {cfg.gate_confidence!r}")  # fmt: skip
    need(cfg.fedprox_mu >= 0, "fedprox_mu", "must be >= 0")
    need(cfg.epsilon > 0, "epsilon", "must be > 0")
    need(cfg.spread >= 0, "spread", "must be >= 0")
    need(0 < cfg.reserved_fraction < 1, "reserved_fraction", "must be in (0, 1)")
    need(0 < cfg.test_fraction < 1, "test_fraction", "must be in (0, 1)")
    need(all(h >= 1 for h in cfg.hidden_dims), "hidden_dims", "must be positive ints")
    need(cfg.confidence_subsample is None or cfg.confidence_subsample >= 1,
         "confidence_subsample", "must be >= 1 or null")  # fmt: skip
    s = cfg.sgd
    need(s.learning_rate > 0, "sgd.learning_rate", "must be > 0")
    need(0 <= s.momentum < 1, "sgd.momentum", "must be in [0, 1)")
    need(s.weight_decay >= 0, "sgd.weight_decay", "must be >= 0")
    need(s.batch_size >= 1, "sgd.batch_size", "must be >= 1")


def _build(values: Dict) -> RunConfig:
    top: Dict = {}
    sgd: Dict = {}
    for key, value in values.items():
        if key == "sgd":
            if not isinstance(value, dict):
                raise ConfigError("sgd", "must be an object")
            for sk, sv in value.items():
                if sk in _SGD_INT_KEYS:
                    sgd[sk] = _coerce(f"sgd.{sk}", sv, int)
                elif sk in _SGD_FLOAT_KEYS:
                    sgd[sk] = _coerce(f"sgd.{sk}", sv, float)
                else:
                    raise ConfigError(f"sgd.{sk}", "unknown key")
        elif key in _INT_KEYS:
            top[key] = _coerce(key, value, int)
        elif key in _FLOAT_KEYS:
            top[key] = _coerce(key, value, float)
        elif key in ("method", "gate_confidence"):
            top[key] = str(value)
        elif key == "hidden_dims":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(key, f"expected a list, got {value!r}")
            top[key] = tuple(_coerce(key, v, int) for v in value)
        else:
            raise ConfigError(key, "unknown key")
    cfg = RunConfig(**top, sgd=SgdSettings(**sgd))
    if cfg.n_top is None and cfg.num_clients >= 1:
        cfg = dataclasses.replace(cfg, n_top=math.ceil(cfg.num_clients / 2))
    _validate(cfg)
    return cfg


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(values: Dict, assignment: str) -> None:
    """Apply one `key=value` (dotted keys reach into `sgd`) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    value = _parse_value(raw.strip())
    if "." in key:
        head, sub = key.split(".", 1)
        if head != "sgd":
            raise ConfigError(key, "unknown key")
        values.setdefault("sgd", {})
        if not isinstance(values["sgd"], dict):
            raise ConfigError("sgd", "must be an object")
        values["sgd"][sub] = value
    else:
        values[key] = value


def load_raw(path: Optional[Union[str, Path]]) -> Dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return data


def parse_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    env: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """Resolve file values, then FEDCOE_SEED, then explicit overrides, over the defaults."""
    values = load_raw(path)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    for assignment in overrides:
        apply_override(values, assignment)
    return _build(values)


def config_from_dict(values: Dict) -> RunConfig:
    return _build(dict(values))


def echo_config(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
