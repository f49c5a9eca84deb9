"""Model specification: which indicators measure which latent factor.

A model has exactly one latent mediator, one latent outcome, and one or
more latent covariates, each measured by at least two indicators with a
designated reference indicator (loading 1, intercept 0).  Treatment is a
single observed two-level column.  The mediator equation may contain
treatment-covariate interaction terms; at least one is required for the
g-estimation moment matrix to be invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ROLES = ("mediator", "covariate", "outcome")


@dataclass(frozen=True)
class FactorSpec:
    """One latent factor and the indicators that measure it."""

    name: str
    role: str
    indicators: tuple[str, ...]
    reference: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"factor {self.name!r}: role must be one of {ROLES}, got {self.role!r}")
        if len(self.indicators) < 2:
            raise ConfigError(f"factor {self.name!r}: needs at least 2 indicators")
        if len(set(self.indicators)) != len(self.indicators):
            raise ConfigError(f"factor {self.name!r}: duplicate indicator names")
        if self.reference not in self.indicators:
            raise ConfigError(
                f"factor {self.name!r}: reference {self.reference!r} is not one of its indicators"
            )


@dataclass(frozen=True)
class ModelSpec:
    """Full measurement + structural layout.

    Factors are stored in canonical order (mediator, covariates...,
    outcome) regardless of the order they were declared in; the declared
    indicator order is kept for reporting.  ``mediator_interactions``
    holds 0-based indices into the covariate list.
    """

    factors: tuple[FactorSpec, ...]
    treatment: str
    mediator_interactions: tuple[int, ...] = ()
    declared_indicator_order: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        by_role = {role: [f for f in self.factors if f.role == role] for role in ROLES}
        if len(by_role["mediator"]) != 1:
            raise ConfigError("exactly one mediator factor is required")
        if len(by_role["outcome"]) != 1:
            raise ConfigError("exactly one outcome factor is required")
        if not by_role["covariate"]:
            raise ConfigError("at least one covariate factor is required")

        ordered = tuple(by_role["mediator"] + by_role["covariate"] + by_role["outcome"])
        declared = self.declared_indicator_order or tuple(
            name for f in self.factors for name in f.indicators
        )
        object.__setattr__(self, "factors", ordered)
        object.__setattr__(self, "declared_indicator_order", declared)

        seen: dict[str, str] = {}
        for f in self.factors:
            for name in f.indicators:
                if name in seen:
                    raise ConfigError(
                        f"indicator {name!r} assigned to both {seen[name]!r} and {f.name!r}"
                    )
                seen[name] = f.name
        if self.treatment in seen:
            raise ConfigError(f"treatment column {self.treatment!r} is also an indicator")

        n_cov = len(by_role["covariate"])
        ints = tuple(self.mediator_interactions)
        if len(set(ints)) != len(ints):
            raise ConfigError("duplicate mediator interaction indices")
        for j in ints:
            if not 0 <= j < n_cov:
                raise ConfigError(
                    f"mediator interaction index {j} out of range for {n_cov} covariates"
                )
        object.__setattr__(self, "mediator_interactions", ints)

    @property
    def n_covariates(self) -> int:
        return len(self.factors) - 2

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def covariates(self) -> tuple[FactorSpec, ...]:
        return self.factors[1:-1]

    @property
    def mediator(self) -> FactorSpec:
        return self.factors[0]

    @property
    def outcome(self) -> FactorSpec:
        return self.factors[-1]

    @property
    def indicator_names(self) -> tuple[str, ...]:
        return tuple(name for f in self.factors for name in f.indicators)

    def to_dict(self) -> dict:
        return {
            "factors": [
                {
                    "name": f.name,
                    "role": f.role,
                    "indicators": list(f.indicators),
                    "reference": f.reference,
                }
                for f in self.factors
            ],
            "treatment": self.treatment,
            "mediator_interactions": list(self.mediator_interactions),
        }


def model_spec_from_dict(raw: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from a parsed configuration mapping.

    Interaction terms may be given as covariate indices or covariate
    factor names.
    """
    try:
        factors = tuple(
            FactorSpec(
                name=str(f["name"]),
                role=str(f["role"]),
                indicators=tuple(str(i) for i in f["indicators"]),
                reference=str(f["reference"]),
            )
            for f in raw["factors"]
        )
        treatment = str(raw["treatment"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model specification: {exc}") from exc

    cov_names = [f.name for f in factors if f.role == "covariate"]
    interactions = []
    for item in raw.get("mediator_interactions", []):
        if isinstance(item, str):
            if item not in cov_names:
                raise ConfigError(
                    f"interaction covariate {item!r} not found among covariates {cov_names}"
                )
            interactions.append(cov_names.index(item))
        else:
            interactions.append(int(item))

    return ModelSpec(
        factors=factors,
        treatment=treatment,
        mediator_interactions=tuple(interactions),
    )


def load_model_spec(path: str | Path) -> ModelSpec:
    """Read a JSON model specification file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model specification {path}: {exc}") from exc
    return model_spec_from_dict(raw)


def save_model_spec(spec: ModelSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")
