"""Explaining regression models output range by output range.

A scalar model output is split into range experts (a thermometer code over
the output axis); any linear combination of experts is a query that can be
explained with Shapley values, integrated gradients or LRP.
"""

__version__ = "0.1.0"

from .attribution import (AttributionMatrix, ConditionalBaseline, Explanation, FixedBaseline, MeanBaseline,
                          attribution_basis, explain_expert, explain_from_basis, explain_model, explain_query)
from .experts import RangeExpertBank, decode, encode, encode_many, fit_bank
from .query import Query, parse_query_spec, sigmoid_query, step_query

__all__ = [
    "AttributionMatrix", "ConditionalBaseline", "Explanation", "FixedBaseline", "MeanBaseline", "Query",
    "RangeExpertBank", "attribution_basis", "decode", "encode", "encode_many", "explain_expert",
    "explain_from_basis", "explain_model", "explain_query", "fit_bank", "parse_query_spec", "sigmoid_query",
    "step_query",
]
