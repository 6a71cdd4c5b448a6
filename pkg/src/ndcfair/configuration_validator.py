"""Validates the configuration schema"""

from schema import And, Optional, Or, Schema, Use

_NAME = And(str, lambda s: len(s) > 0)
_POSITIVE = And(Use(float), lambda v: v > 0)
_YEAR = And(int, lambda v: 1800 <= v <= 2200)
_HSM_VARIANTS = ["HSM1", "HSM2", "HSM3", "HSM4"]
_VARIANTS = _HSM_VARIANTS + ["GompertzFree", "GompertzConstrained"]

VALUATION_SCHEMA = Schema(
    {
        Optional("discount_rate"): And(Use(float), lambda v: v > -1.0),
        Optional("account_scale"): _POSITIVE,
        Optional("limit_age"): And(int, lambda v: v > 0),
    },
)

AGE_GRID_SCHEMA = Schema(
    And(
        {"x0": int, "x1": int},
        lambda g: g["x0"] < g["x1"],
        error="age_grid needs integer x0 < x1",
    ),
)

MODEL_SCHEMA = Schema(
    {
        Optional("ref_year"): _YEAR,
        Optional("age_grid"): AGE_GRID_SCHEMA,
        Optional("baseline_variant"): Or(*_HSM_VARIANTS),
        Optional("variants"): [Or(*_VARIANTS)],
        Optional("retirement_ages"): [And(int, lambda v: 40 <= v <= 70)],
        Optional("groups"): And(int, lambda v: v >= 1),
        Optional("waves"): {_YEAR: _POSITIVE},
    },
)

PROJECTION_SCHEMA = Schema(
    {
        Optional("horizon"): _YEAR,
        Optional("n_paths"): And(int, lambda v: v >= 1),
    },
)

INPUTS_SCHEMA = Schema(
    {
        Optional("national"): _NAME,
        Optional("subgroup"): _NAME,
        Optional("lee_carter"): _NAME,
        Optional("hermite"): _NAME,
        Optional("anchors"): _NAME,
    },
)

OUTPUT_SCHEMA = Schema(
    {
        Optional("directory"): _NAME,
    },
)

RULES_SCHEMA = Schema(
    {
        Optional("grid"): And(
            {"start": _POSITIVE, "stop": _POSITIVE, "step": _POSITIVE},
            lambda g: g["start"] <= g["stop"],
            error="rules grid needs start <= stop",
        ),
        Optional("marginal_step"): _POSITIVE,
        Optional("official_month"): _POSITIVE,
    },
)

ANCHORS_SCHEMA = Schema(
    {
        "months": [_POSITIVE],
        "means": [_POSITIVE],
        "boundaries": [_POSITIVE],
    },
)

SYNTHETIC_SCHEMA = Schema(
    {
        Optional("exposure_scale"): And(Use(float), lambda v: v >= 0),
        Optional("national_ages"): And([int], lambda a: len(a) == 2 and a[0] < a[1]),
        Optional("years"): And([int], lambda a: len(a) == 2 and a[0] < a[1]),
    },
)

METRICS_SCHEMA = Schema(
    {
        "directory": _NAME,
        Optional("suffix"): _NAME,
    },
)

SCHEMA = Schema(
    Or(
        None,
        {
            Optional("valuation"): VALUATION_SCHEMA,
            Optional("model"): MODEL_SCHEMA,
            Optional("projection"): PROJECTION_SCHEMA,
            Optional("seed"): And(int, lambda v: v >= 0),
            Optional("inputs"): INPUTS_SCHEMA,
            Optional("output"): OUTPUT_SCHEMA,
            Optional("rules"): RULES_SCHEMA,
            Optional("anchors"): ANCHORS_SCHEMA,
            Optional("synthetic"): SYNTHETIC_SCHEMA,
            Optional("logging"): dict,
            Optional("metrics"): METRICS_SCHEMA,
        },
    ),
)


def validate(config):
    """Validate the configuration file.

    Parameters
    ----------
    config : object
        Configuration to validate; an empty document is valid.

    Returns
    -------
    dict
        Validated configuration, ``{}`` for an empty document.
    """

    return SCHEMA.validate(config) or {}
