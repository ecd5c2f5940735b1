"""Experiment configuration: a validated schema read from TOML or JSON."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator, model_validator

from robust_hedge.attack import AttackSpec
from robust_hedge.market_sim import BSSpec, GADSpec, HestonSpec
from robust_hedge.objective import AsianPut, CostSpec, CVaR, Entropic, EuropeanCall
from robust_hedge.training import DEFAULT_ALPHA_GRID, DEFAULT_DELTA_GRID, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# market, claim and risk


class BSModel(_Strict):
    kind: Literal["bs"] = "bs"
    s0: float = 100.0
    drift: float = 0.0
    sigma: float = Field(0.2, ge=0)
    maturity: float = Field(30 / 365, gt=0)
    n_steps: int = Field(30, ge=1)

    def build(self) -> BSSpec:
        return BSSpec(**self.model_dump(exclude={"kind"}))


class HestonModel(_Strict):
    kind: Literal["heston"] = "heston"
    s0: float = 100.0
    v0: float = Field(0.04, ge=0)
    a: float = Field(1.0, gt=0)
    b: float = Field(0.04, ge=0)
    sigma: float = Field(2.0, ge=0)
    rho: float = Field(-0.7, ge=-1, le=1)
    drift: float = 0.0
    maturity: float = Field(30 / 365, gt=0)
    n_steps: int = Field(30, ge=1)

    def build(self) -> HestonSpec:
        return HestonSpec(**self.model_dump(exclude={"kind"}))


class GADModel(_Strict):
    kind: Literal["gad"] = "gad"
    s0: float = 10.0
    a0: tuple[float, float] = (0.0, 0.0)
    a1: tuple[float, float] = (0.2, 0.2)
    b0: tuple[float, float] = (0.0, 0.0)
    b1: tuple[float, float] = (0.0, 0.0)
    gamma: float = Field(1.0, gt=0, le=1)
    maturity: float = Field(30 / 365, gt=0)
    n_steps: int = Field(30, ge=1)
    interval_mode: bool = False

    def build(self) -> GADSpec:
        return GADSpec(**self.model_dump(exclude={"kind", "interval_mode"}))


ModelSection = Annotated[Union[BSModel, HestonModel, GADModel], Field(discriminator="kind")]


class CallPayoff(_Strict):
    kind: Literal["call"] = "call"
    strike: float = Field(100.0, gt=0)

    def build(self):
        return EuropeanCall(self.strike)


class AsianPutPayoff(_Strict):
    kind: Literal["asian_put"] = "asian_put"

    def build(self):
        return AsianPut()


PayoffSection = Annotated[Union[CallPayoff, AsianPutPayoff], Field(discriminator="kind")]


class EntropicMeasure(_Strict):
    kind: Literal["entropic"] = "entropic"
    lam: float = Field(1.0, gt=0)

    def build(self):
        return Entropic(self.lam)


class CVaRMeasure(_Strict):
    kind: Literal["cvar"] = "cvar"
    alpha: float = Field(0.5, ge=0, lt=1)

    def build(self):
        return CVaR(self.alpha)


MeasureSection = Annotated[Union[EntropicMeasure, CVaRMeasure], Field(discriminator="kind")]


class CostSection(_Strict):
    rate: float = Field(0.0, ge=0)


# ---------------------------------------------------------------------------
# training, attack, evaluation


def _parse_tracks(v):
    if isinstance(v, str):
        key = v.lower()
        if key == "s":
            return ("S",)
        if key == "sv":
            return ("S", "v")
        raise ValueError("tracks must be 's', 'sv' or a list of track names")
    return tuple(v)


class AttackSection(_Strict):
    method: Literal["WPGD", "WBPGD", "PointwisePGD"] = "WBPGD"
    delta: float = Field(0.1, ge=0)
    p: float = 2.0
    iterations: int = Field(20, ge=1)
    beta: Optional[float] = Field(None, gt=0)
    weights: Optional[tuple[float, ...]] = None
    tracks: tuple[str, ...] = ("S",)
    freeze_initial: bool = True
    projection: Literal["shrink", "saturate"] = "shrink"
    pointwise_projection: Literal["radial", "clip"] = "radial"

    @field_validator("method", mode="before")
    @classmethod
    def _method(cls, v):
        aliases = {"wpgd": "WPGD", "wbpgd": "WBPGD", "pgd": "PointwisePGD", "pointwisepgd": "PointwisePGD"}
        return aliases.get(str(v).lower(), v)

    @field_validator("p", mode="before")
    @classmethod
    def _p(cls, v):
        if isinstance(v, str) and v.lower() in ("inf", "infinity"):
            return math.inf
        return v

    @field_validator("p")
    @classmethod
    def _p_range(cls, v):
        if not v > 1:
            raise ValueError("Wasserstein order p must lie in (1, inf]")
        return v

    @field_serializer("p")
    def _p_out(self, v):
        return "inf" if v == math.inf else v

    @field_validator("tracks", mode="before")
    @classmethod
    def _tracks(cls, v):
        return _parse_tracks(v)

    @model_validator(mode="after")
    def _weights_len(self):
        if self.weights is not None and len(self.weights) != len(self.tracks):
            raise ValueError("need one weight per attacked track")
        return self

    def build(self, **overrides) -> AttackSpec:
        data = self.model_dump()
        data["p"] = self.p
        data.update(overrides)
        return AttackSpec(**data)


class TrainSection(_Strict):
    mode: Literal["clean", "adversarial", "search"] = "adversarial"
    arch: Literal["NetSim", "NetRec"] = "NetSim"
    n_train: int = Field(5000, ge=2)
    n_val: int = Field(0, ge=0)
    n_test: int = Field(20_000, ge=2)
    clean_epochs: int = Field(100, ge=0)
    adv_epochs: int = Field(50, ge=0)
    batch_size: int = Field(10_000, ge=2)
    lr: Optional[float] = Field(None, gt=0)
    lr_decay: float = Field(0.5, gt=0, le=1)
    decay_every: Optional[int] = Field(None, ge=1)
    alpha: float = Field(1.0, ge=0)
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID

    @field_validator("alpha_grid", "delta_grid")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grid must be non-empty")
        if any(x < 0 for x in v):
            raise ValueError("grid values must be non-negative")
        return v


class OODSection(_Strict):
    configs: int = Field(20, ge=1)
    paths: int = Field(2000, ge=2)
    lo: float = 0.9
    hi: float = 1.1

    @model_validator(mode="after")
    def _order(self):
        if self.lo > self.hi:
            raise ValueError("ood.lo must not exceed ood.hi")
        return self


class EvaluationSection(_Strict):
    deltas: tuple[float, ...] = (0.0, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5)
    methods: tuple[Literal["WPGD", "WBPGD", "PointwisePGD"], ...] = ("WBPGD", "WPGD")
    track_sets: tuple[tuple[str, ...], ...] = (("S",),)
    partition_sizes: tuple[int, ...] = (5000,)
    n_partitions: int = Field(4, ge=1)
    diag_deltas: tuple[float, ...] = (0.01, 0.03, 0.05, 0.1)
    acf_max_lag: int = Field(10, ge=0)
    covariance_track: str = "S"
    ood: Optional[OODSection] = Field(default_factory=OODSection)

    @field_validator("track_sets", mode="before")
    @classmethod
    def _sets(cls, v):
        return tuple(_parse_tracks(x) for x in v)

    @field_validator("methods", mode="before")
    @classmethod
    def _methods(cls, v):
        return tuple(AttackSection._method(x) for x in v)

    @field_validator("deltas", "diag_deltas")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("radii must be non-negative")
        return v


class SeedSection(_Strict):
    data: int = 1
    val: int = 2
    test: int = 3
    ood: int = 4
    train: int = 0


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelSection = Field(default_factory=BSModel)
    payoff: PayoffSection = Field(default_factory=CallPayoff)
    cost: CostSection = Field(default_factory=CostSection)
    measure: Optional[MeasureSection] = None
    train: TrainSection = Field(default_factory=TrainSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    seeds: SeedSection = Field(default_factory=SeedSection)
    output_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _consistency(self):
        tracks = {"bs": ("S",), "gad": ("S",), "heston": ("S", "v", "Vswap")}[self.model.kind]
        sets = [("attack.tracks", self.attack.tracks)]
        sets += [(f"evaluation.track_sets[{i}]", t) for i, t in enumerate(self.evaluation.track_sets)]
        for where, names in sets:
            for name in names:
                if name not in tracks:
                    what = "variance track absent" if name == "v" else f"track {name!r} absent"
                    raise ValueError(f"{where}: {what} for model {self.model.kind!r}")
        if self.evaluation.covariance_track not in tracks:
            raise ValueError(f"evaluation.covariance_track: track {self.evaluation.covariance_track!r} absent")
        for n in self.evaluation.partition_sizes:
            if n < 2:
                raise ValueError("evaluation.partition_sizes: every size must be at least 2")
        explicit_ood = "ood" in self.evaluation.model_fields_set and self.evaluation.ood is not None
        if self.model.kind == "gad" and explicit_ood:
            raise ValueError("evaluation.ood: OOD perturbation supports bs and heston models only")
        return self

    # -- domain objects

    def model_spec(self):
        return self.model.build()

    def measure_spec(self):
        if self.measure is not None:
            return self.measure.build()
        return CVaR(0.5) if self.model.kind == "heston" else Entropic(1.0)

    def train_config(self, n_train: int | None = None, seed: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            model=self.model_spec(),
            payoff=self.payoff.build(),
            cost=CostSpec(self.cost.rate),
            measure=self.measure_spec(),
            arch=t.arch,
            n_train=t.n_train if n_train is None else n_train,
            n_val=t.n_val,
            n_test=t.n_test,
            clean_epochs=t.clean_epochs,
            adv_epochs=t.adv_epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            lr_decay=t.lr_decay,
            decay_every=t.decay_every,
            alpha=t.alpha,
            attack=self.attack.build(),
            alpha_grid=t.alpha_grid,
            delta_grid=t.delta_grid,
            seed=self.seeds.train if seed is None else seed,
        )

    def to_plain(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)


# ---------------------------------------------------------------------------
# reading and writing


def _field_path(err: dict) -> str:
    parts = []
    for loc in err["loc"]:
        if isinstance(loc, int):
            parts[-1:] = [f"{parts[-1]}[{loc}]"] if parts else [f"[{loc}]"]
        elif loc in ("bs", "heston", "gad", "call", "asian_put", "entropic", "cvar"):
            continue  # discriminator tag
        else:
            parts.append(str(loc))
    return ".".join(parts) or "<root>"


def config_from_dict(data: dict[str, Any], base_dir: str | Path | None = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{_field_path(e)}: {e['msg'].removeprefix('Value error, ')}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from None
    if cfg.checkpoint is not None:
        ckpt = Path(cfg.checkpoint)
        if base_dir is not None and not ckpt.is_absolute():
            ckpt = Path(base_dir) / ckpt
        if not ckpt.exists():
            raise ConfigError(f"checkpoint: file {ckpt} does not exist")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a TOML (or ``.json``) experiment file; unknown keys are rejected."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    else:
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)


def dumps_config(cfg: ExperimentConfig, fmt: str = "toml") -> str:
    data = cfg.to_plain()
    if fmt == "json":
        return json.dumps(data, indent=2, sort_keys=True)
    return tomli_w.dumps(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_config(cfg, "json" if path.suffix.lower() == ".json" else "toml"))
    return path
