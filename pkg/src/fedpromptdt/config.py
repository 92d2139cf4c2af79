"""Configuration dataclasses and TOML loading.

All defaults follow the simulation/FL settings of the reference setup
(4x4 tiles, 16-frame GoPs, 10 MHz, 15 GHz, 50 ms, ...). Every gap-filling
knob (render scale, noise model, penalties, episode length, MA window) is
a named field so a config file can override it.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

ENV_PREFIX = "FPDT_"

# Tile sizes in bits for one frame tile at the four named resolutions.
B_UHD = 12441600.0
B_FHD = 3110400.0
B_HD = 1382400.0
B_SD = 460800.0

DEFAULT_LEVEL_THRESHOLDS = {
    "premium": (B_HD / 2, B_FHD / 2, B_UHD / 4),
    "advanced": (B_SD / 1.5, B_HD / 2, B_FHD / 2),
    "standard": (B_SD / 2, B_SD / 1.5, B_HD / 2),
}

LEVEL_CODES = {"premium": 0.6, "advanced": 0.4, "standard": 0.2}
LEVELS = ("premium", "advanced", "standard")


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    E: int = 5
    K_max: int = 8
    I: int = 4
    J: int = 4
    F: int = 16
    T_th: float = 0.05
    B_max: float = 10e6
    f_max: float = 15e9
    cycles: tuple[float, float, float] = (800.0, 900.0, 1000.0)
    P: float = 1.0
    alpha: float = 4.0
    # -174 dBm/Hz in W/Hz
    noise_psd: float = 10 ** (-174 / 10) / 1000
    # "psd": noise_psd * B_k ; "flat": noise_psd used directly as a power in W
    noise_model: str = "psd"
    omega: float = 300.0
    interference: float = 0.0
    delta_R_frac: float = 0.0
    delta_f_frac: float = 0.0
    # None -> same as omega
    render_scale: float | None = None
    qoe_th: float = 0.91
    hfqoe_th: float = 0.8
    penalty_1: float = 1.0
    # None -> K_e (keeps the 1:K_e ratio)
    penalty_2: float | None = None
    level_thresholds: dict[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_LEVEL_THRESHOLDS)
    )
    user_box: tuple[tuple[float, float], tuple[float, float]] = ((10.0, 20.0), (0.0, 5.0))
    episode_len: int = 100
    gaze_step_sigma: float = 0.02

    @property
    def N(self) -> int:
        return self.I * self.J

    @property
    def state_dim(self) -> int:
        """Raw state width (before user-info augmentation)."""
        return 11 * self.K_max + 2

    @property
    def aug_state_dim(self) -> int:
        return self.state_dim + self.K_max

    @property
    def action_dim(self) -> int:
        return 5 * self.K_max

    @property
    def effective_render_scale(self) -> float:
        return self.omega if self.render_scale is None else self.render_scale

    def penalty_2_for(self, K_e: int) -> float:
        return float(K_e) if self.penalty_2 is None else self.penalty_2

    def validate(self) -> None:
        c1, c2, c3 = self.cycles
        checks = [
            (self.I > 0 and self.J > 0, "grid must be positive"),
            (self.K_max >= 1, "K_max must be >= 1"),
            (self.T_th > 0, "T_th must be > 0"),
            (self.B_max > 0, "B_max must be > 0"),
            (self.f_max > 0, "f_max must be > 0"),
            (c1 <= c2 <= c3, "cycles must be nondecreasing in attention level"),
            (self.omega >= 1, "omega must be >= 1"),
            (self.effective_render_scale > 0, "render_scale must be > 0"),
            (self.qoe_th > 0 and self.hfqoe_th > 0, "thresholds must be > 0"),
            (self.noise_model in ("psd", "flat"), f"unknown noise_model {self.noise_model!r}"),
            (self.episode_len >= 1, "episode_len must be >= 1"),
            (self.F >= 1, "F must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for name, th in self.level_thresholds.items():
            if not (0 < th[0] < th[1] < th[2]):
                raise ConfigError(f"level {name!r} thresholds must be positive and strictly increasing")


@dataclass
class ModelConfig:
    embed_dim: int = 128
    layers: int = 6
    heads: int = 1
    dropout: float = 0.1
    state_dim: int = 98
    action_dim: int = 40
    rtg_dim: int = 1
    max_timestep: int = 100
    # divides reward-to-go before the return projection
    rtg_scale: float = 100.0
    init_std: float = 0.02
    use_prompt: bool = True

    def validate_against(self, sys_cfg: SystemConfig) -> None:
        if self.state_dim != sys_cfg.aug_state_dim or self.action_dim != sys_cfg.action_dim:
            raise ConfigError(
                f"model dims (state={self.state_dim}, action={self.action_dim}) do not match "
                f"K_max={sys_cfg.K_max}: expected state={sys_cfg.aug_state_dim}, action={sys_cfg.action_dim}"
            )

    @classmethod
    def for_system(cls, sys_cfg: SystemConfig, **kw: Any) -> "ModelConfig":
        kw.setdefault("max_timestep", max(sys_cfg.episode_len, 1))
        return cls(state_dim=sys_cfg.aug_state_dim, action_dim=sys_cfg.action_dim, **kw)


@dataclass
class FLConfig:
    E: int = 5
    rounds: int = 100
    local_epochs: int = 1
    local_iters: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay: float = 0.01
    warmup_steps: int = 3
    L_tr: int = 10
    L_pr: int = 5
    checkpoint_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("E", "local_epochs", "batch_size", "L_tr", "L_pr", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"fl.{name} must be positive")
        if self.rounds < 0 or self.local_iters < 0:
            raise ConfigError("fl.rounds and fl.local_iters must be >= 0")
        if self.lr <= 0 or not (0 <= self.lr_decay < 1):
            raise ConfigError("fl.lr must be > 0 and fl.lr_decay in [0, 1)")


@dataclass
class DataConfig:
    user_counts: list[int] = field(default_factory=lambda: [3, 4, 5, 6, 7, 8])
    envs_per_count: int = 20
    episodes_per_env: int = 100
    # int for every count, or a list aligned with user_counts
    holdout_per_count: int | list[int] = 10
    policy_mix: dict[str, float] = field(
        default_factory=lambda: {"random": 0.3, "proportional": 0.3, "hillclimb": 0.4}
    )
    hillclimb_iters: int = 40
    hillclimb_sigma: float = 0.25
    gaze_csv_dir: str | None = None


@dataclass
class EvalConfig:
    episodes: int = 10
    rtg: float = 900.0
    T_te: int = 100
    # None -> full-episode mean of step rewards
    ma_window: int | None = None
    seed: int = 12345


SECTIONS = {
    "system": SystemConfig,
    "model": ModelConfig,
    "fl": FLConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def validate(self) -> None:
        self.system.validate()
        self.fl.validate()
        self.model.validate_against(self.system)
        if self.fl.E != self.system.E:
            raise ConfigError(f"fl.E={self.fl.E} differs from system.E={self.system.E}")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(cls: type, values: dict[str, Any], section: str) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    kw = dict(values)
    if cls is SystemConfig:
        if "cycles" in kw:
            kw["cycles"] = tuple(float(c) for c in kw["cycles"])
        if "user_box" in kw:
            kw["user_box"] = tuple(tuple(float(v) for v in r) for r in kw["user_box"])
        if "level_thresholds" in kw:
            kw["level_thresholds"] = {k: tuple(float(v) for v in th) for k, th in kw["level_thresholds"].items()}
    return cls(**kw)


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: dict[str, str] | None = None) -> dict[str, dict[str, Any]]:
    """Collect ``FPDT_<SECTION>__<KEY>=value`` overrides (value parsed as JSON when possible)."""
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, Any]] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):]
        if "__" not in path:
            continue
        section, name = path.split("__", 1)
        out.setdefault(section.lower(), {})[name] = _parse_env_value(raw)
    return out


def _match_key(cls: type, name: str) -> str:
    for f in dataclasses.fields(cls):
        if f.name.lower() == name.lower():
            return f.name
    raise ConfigError(f"unknown override key {name!r} for {cls.__name__}")


def build_config(raw: dict[str, Any], environ: dict[str, str] | None = None) -> RunConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    merged = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for section, values in env_overrides(environ).items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown override section {section!r}")
        for name, value in values.items():
            merged[section][_match_key(SECTIONS[section], name)] = value

    system = _coerce(SystemConfig, merged["system"], "system")
    model_kw = merged["model"]
    model_kw.setdefault("state_dim", system.aug_state_dim)
    model_kw.setdefault("action_dim", system.action_dim)
    model_kw.setdefault("max_timestep", system.episode_len)
    model = _coerce(ModelConfig, model_kw, "model")
    fl_kw = merged["fl"]
    fl_kw.setdefault("E", system.E)
    cfg = RunConfig(
        system=system,
        model=model,
        fl=_coerce(FLConfig, fl_kw, "fl"),
        data=_coerce(DataConfig, merged["data"], "data"),
        eval=_coerce(EvalConfig, merged["eval"], "eval"),
    )
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike, environ: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return build_config(raw, environ)
