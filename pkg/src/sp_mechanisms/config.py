from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from loguru import logger

from .errors import ConfigError
from .verify import DEFAULT_SEED

TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def _to_bool(text: str) -> bool:
    word = text.strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    """
    Every tunable of a command-line run

    Attributes:
        mechanism: (str) mechanism id, see cli.MECHANISMS
        grid: (int) two-item grid resolution for verification
        tol: (float, optional) verification tolerance; unset picks the check's own default, 0 is exact
        samples: (int) sampled misreports or profiles for more than two items
        trials: (int) sampled true profiles for the multi-item SP check
        seed: (int) seed of every sampler
        workers: (int) threads sharing grid loops
        m: (int) number of items for sampled checks
        lp_kind: (str) full or partial
        lp_n: (int) LP grid resolution
        prune: (bool) keep only neighbouring SP rows
        delta: (str) Q/R headroom, a number or "auto" for 2.92 / (2n)
        backend: (str) LP backend id; empty means SP_MECHANISMS_BACKEND or highs
        tables: (str) Q/R CSV used by the partial-qr mechanism
        out: (str) output path, where a command writes one
    """

    mechanism: str = "five-sixths"
    grid: int = 200
    tol: float | None = field(default=None, metadata={"kind": float})
    samples: int = 1000
    trials: int = 20
    seed: int = DEFAULT_SEED
    workers: int = 1
    m: int = 2
    lp_kind: str = "full"
    lp_n: int = 50
    prune: bool = False
    delta: str = "auto"
    backend: str = ""
    tables: str = ""
    out: str = ""

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides: Any) -> "RunConfig":
        """
        Reads key=value lines (with # comments) and applies command-line overrides
            :param path: optional config file
            :param overrides: values that win over the file; None means not given
        Raises ConfigError for unknown keys, bad values or failed validation
        """
        raw: dict[str, Any] = {}
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} does not exist")
            raw.update({key.lower(): value for key, value in dotenv_values(path).items()})
            logger.debug(f"Loaded {len(raw)} settings from {path}")
        raw.update({key: value for key, value in overrides.items() if value is not None})

        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")

        values: dict[str, Any] = {}
        for key, value in raw.items():
            kind = known[key].metadata.get("kind", type(known[key].default))
            if value is None:
                raise ConfigError(f"{key} has no value")
            try:
                if isinstance(value, str):
                    values[key] = _to_bool(value) if kind is bool else kind(value.strip())
                else:
                    values[key] = kind(value)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"{key}={value!r} is not a valid {kind.__name__}") from err
        config = replace(cls(), **values)
        config.validate()
        return config

    def validate(self) -> None:
        checks = [
            (self.grid >= 2, f"grid must be at least 2, got {self.grid}"),
            (self.tol is None or self.tol >= 0.0, f"tol must be nonnegative, got {self.tol}"),
            (self.samples >= 1, f"samples must be positive, got {self.samples}"),
            (self.trials >= 1, f"trials must be positive, got {self.trials}"),
            (self.workers >= 1, f"workers must be positive, got {self.workers}"),
            (self.m >= 2, f"m must be at least 2, got {self.m}"),
            (self.lp_kind in ("full", "partial"), f"lp_kind must be full or partial, got {self.lp_kind!r}"),
            (self.lp_n >= 2, f"lp_n must be at least 2, got {self.lp_n}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.delta_value()

    def delta_value(self) -> float | None:
        """Headroom as a number, or None for the 2.92 / (2n) default"""
        if self.delta.strip().lower() == "auto":
            return None
        try:
            delta = float(self.delta)
        except ValueError as err:
            raise ConfigError(f"delta must be a number or auto, got {self.delta!r}") from err
        if not 0.0 <= delta < 1.0:
            raise ConfigError(f"delta must lie in [0, 1), got {delta}")
        return delta
