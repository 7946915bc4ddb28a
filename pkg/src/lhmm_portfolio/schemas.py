"""JSON schemas for the model file and the backtest report."""

from __future__ import annotations

import jsonschema

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "format_version", "mode", "D", "K", "sectors", "tickers", "lambda",
        "Sigma", "observed_spearman", "metadata", "diagnostics",
    ],
    "properties": {
        "format_version": {"const": "lhmm-model/1"},
        "mode": {"enum": ["lhmm", "independent_hmms"]},
        "use_initial": {"type": "boolean"},
        "D": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 1},
        "tickers": {"type": "array", "items": {"type": "string"}},
        "lambda": {"type": "array", "items": _num},
        "Sigma": _matrix,
        "rho_star": {"oneOf": [_matrix, {"type": "null"}]},
        "observed_spearman": _matrix,
        "sectors": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "tickers", "alpha", "Pi", "mu", "sigma2"],
                "properties": {
                    "name": {"type": "string"},
                    "tickers": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "alpha": {"type": "array", "items": _num},
                    "Pi": _matrix,
                    "mu": _matrix,
                    "sigma2": _matrix,
                },
            },
        },
        "metadata": {"type": "object"},
        "diagnostics": {"type": "object", "required": ["bic"]},
    },
}

_ci = {
    "type": "object",
    "required": ["mean", "ci_low", "ci_high"],
    "properties": {"mean": _num, "ci_low": _num_or_null, "ci_high": _num_or_null},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format_version", "config", "test_window", "index_gain_pct", "sectors", "portfolios", "models"],
    "properties": {
        "format_version": {"const": "lhmm-report/1"},
        "config": {"type": "object"},
        "test_window": {
            "type": "object",
            "required": ["start", "end", "n_weeks"],
        },
        "index_gain_pct": _num_or_null,
        "sectors": {"type": "array", "items": {"type": "string"}},
        "models": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["Sigma", "observed_spearman", "bic"],
            },
        },
        "portfolios": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": [
                    "model", "objective", "q", "replicates", "total", "sectors",
                    "transactions", "replicate_gains", "replicate_sector_gains",
                ],
                "properties": {
                    "model": {"enum": ["lhmm", "independent_hmms"]},
                    "objective": {"enum": ["min_variance", "balanced"]},
                    "q": _num_or_null,
                    "replicates": {"type": "integer", "minimum": 1},
                    "total": _ci,
                    "sectors": {"type": "object", "additionalProperties": _ci},
                    "transactions": {
                        "type": "object",
                        "required": ["mean", "sd", "per_replicate"],
                        "properties": {
                            "mean": _num,
                            "sd": _num_or_null,
                            "per_replicate": {"type": "array", "items": {"type": "integer"}},
                        },
                    },
                    "replicate_gains": {"type": "array", "items": _num},
                    "replicate_sector_gains": {
                        "type": "array",
                        "items": {"type": "object", "additionalProperties": _num},
                    },
                },
            },
        },
    },
}


def validate_model(doc: dict) -> None:
    jsonschema.validate(doc, MODEL_SCHEMA)


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)
