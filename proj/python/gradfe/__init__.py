"""Feature search over expression trees.

    >>> import gradfe
    >>> ds = gradfe.load_csv("data/pima_indian.csv", target="Outcome")
    >>> ds.evaluate("Glucose BMI multiply log")["metric"]
"""

from ._core import (
    BudgetExhausted,
    ConfigError,
    Dataset,
    DataError,
    ParseError,
    from_columns,
    load_csv,
    transformation_names,
)

__all__ = [
    "BudgetExhausted",
    "ConfigError",
    "Dataset",
    "DataError",
    "ParseError",
    "from_columns",
    "load_csv",
    "transformation_names",
]
