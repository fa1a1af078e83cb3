"""Training formulations: canonical labels, parsing and the 61-variant grid."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass

import numpy as np

from .timesamplers import CosMap, LogitNormal, Mode, ParameterError, TimestepDensity, Uniform
from .trajectories import (
    EDM,
    RF,
    Cosine,
    LDMLinear,
    MatchedEDM,
    Parameterization,
    Schedule,
    Weighting,
    WeightingSpec,
)


class VariantParseError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    label: str
    schedule: Schedule
    density: TimestepDensity
    parameterization: Parameterization
    weighting: WeightingSpec

    @property
    def family(self) -> str:
        return self.label.split("/")[0].split("(")[0]


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def format_label(spec: VariantSpec) -> str:
    return spec.label


def rf_variant(density: TimestepDensity) -> VariantSpec:
    if isinstance(density, Mode):
        s = float(_fmt(density.s))
        density = Mode(s)
        label = "rf" if s == 0.0 else f"rf/mode({_fmt(s)})"
    elif isinstance(density, LogitNormal):
        density = LogitNormal(float(_fmt(density.m)), float(_fmt(density.s)))
        label = f"rf/lognorm({_fmt(density.m)},{_fmt(density.s)})"
    elif isinstance(density, CosMap):
        label = "rf/cosmap"
    elif isinstance(density, Uniform):
        label = "rf"
    else:
        raise VariantParseError(f"no rectified-flow label for density {density!r}")
    return VariantSpec(label, RF(), density, Parameterization.VELOCITY, WeightingSpec(Weighting.DENSITY, density))


def diffusion_variant(pred: str, sched: str) -> VariantSpec:
    schedule = LDMLinear() if sched == "linear" else Cosine()
    param = Parameterization.EPS if pred == "eps" else Parameterization.V
    if sched == "cos":
        kind = Weighting.COSINE_EPS if pred == "eps" else Weighting.COSINE_V
    else:
        kind = Weighting.EPS_MSE if pred == "eps" else Weighting.V_MSE
    return VariantSpec(f"{pred}/{sched}", schedule, Uniform(), param, WeightingSpec(kind))


def edm_variant(p_mean: float, p_std: float) -> VariantSpec:
    pm, ps = float(_fmt(p_mean)), float(_fmt(p_std))
    return VariantSpec(
        f"edm({_fmt(pm)},{_fmt(ps)})",
        EDM(pm, ps),
        Uniform(),
        Parameterization.F,
        WeightingSpec(Weighting.EDM, p_mean=pm, p_std=ps),
    )


def matched_edm_variant(target: str) -> VariantSpec:
    sched = MatchedEDM(RF() if target == "rf" else Cosine())
    return VariantSpec(f"edm/{target}", sched, Uniform(), Parameterization.F, WeightingSpec(Weighting.F_MSE))


_NUM = r"\s*(-?\d+(?:\.\d+)?)\s*"
_PATTERNS = [
    (re.compile(rf"^rf/lognorm\({_NUM},{_NUM}\)$"), lambda m, s: rf_variant(LogitNormal(float(m), float(s)))),
    (re.compile(rf"^rf/lognorm_{_NUM}_{_NUM}$"), lambda m, s: rf_variant(LogitNormal(float(m), float(s)))),
    (re.compile(rf"^rf/mode\({_NUM}\)$"), lambda s: rf_variant(Mode(float(s)))),
    (re.compile(rf"^rf/mode_{_NUM}$"), lambda s: rf_variant(Mode(float(s)))),
    (re.compile(r"^(?:rf|rf/mode)$"), lambda: rf_variant(Mode(0.0))),
    (re.compile(r"^rf/cosmap$"), lambda: rf_variant(CosMap())),
    (re.compile(r"^(eps|v)/(linear|cos)$"), diffusion_variant),
    (re.compile(rf"^(?:edm/)?edm\({_NUM},{_NUM}\)$"), lambda m, s: edm_variant(float(m), float(s))),
    (re.compile(rf"^edm/edm_{_NUM}_{_NUM}$"), lambda m, s: edm_variant(float(m), float(s))),
    (re.compile(r"^edm/(?:edm)?(rf|cos)$"), matched_edm_variant),
]


def parse_variant(label: str) -> VariantSpec:
    """Parse a variant label; accepts the table spellings with spaces or underscores."""
    text = label.strip()
    for pattern, build in _PATTERNS:
        m = pattern.match(text)
        if m:
            try:
                return build(*m.groups())
            except ParameterError as exc:
                raise VariantParseError(f"invalid variant {label!r}: {exc}") from exc
    close = difflib.get_close_matches(text, [v.label for v in variant_grid()], n=1, cutoff=0.0)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise VariantParseError(f"unknown variant label {label!r}{hint}")


# grid -------------------------------------------------------------------------

MODE_GRID = np.linspace(-1.0, 1.75, 7)
LOGNORM_M = np.linspace(-1.0, 1.0, 5)
LOGNORM_S = np.linspace(0.2, 2.2, 6)
EDM_PM = np.linspace(-1.2, 1.2, 5)
EDM_PS = np.linspace(0.6, 1.8, 3)

GRID_NOTE = (
    "mode s: 7 evenly spaced values on [-1, 1.75] plus 1.0 and 0; "
    "lognorm: m in linspace(-1, 1, 5) x s in linspace(0.2, 2.2, 6); "
    "edm: P_m in linspace(-1.2, 1.2, 5) x P_s in linspace(0.6, 1.8, 3); values rounded to 2 decimals"
)


def variant_grid() -> list[VariantSpec]:
    grid = [diffusion_variant(p, s) for p in ("eps", "v") for s in ("linear", "cos")]
    for s in list(MODE_GRID) + [1.0, 0.0]:
        grid.append(rf_variant(Mode(float(_fmt(s)))))
    for m in LOGNORM_M:
        for s in LOGNORM_S:
            grid.append(rf_variant(LogitNormal(float(m), float(s))))
    grid.append(rf_variant(CosMap()))
    for pm in EDM_PM:
        for ps in EDM_PS:
            grid.append(edm_variant(float(pm), float(ps)))
    grid.append(matched_edm_variant("rf"))
    grid.append(matched_edm_variant("cos"))
    return grid
