"""Cross-argument table checks.

Checks relating a returned or passed table to another argument of the same call,
e.g. per-case scores must carry the index of the feature matrix they were computed
from.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Callable, cast

from sdcnn._lib import get_fn_arg, split_or_list

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Iterable

    import pandas as pd

    from sdcnn.contract import Check, DataCheckFunctionT

__all__ = ["same_index_as", "same_length_as"]


def same_index_as(args_: str | Iterable[str] | None, /) -> Check | None:
    """Check that the table index equals the index of other argument(s).

    :param args_: Argument name, comma-separated names, or an iterable of names.

    >>> import pandas as pd
    >>> from sdcnn import contract
    >>> @contract.result(same_index_as("features"))
    ... def first_column(features: pd.DataFrame) -> pd.Series:
    ...     return features.iloc[:, 0]
    """
    arg_names = split_or_list(args_)
    if not arg_names:
        return None

    def mk_check(
        fn: Callable[..., Any], args: tuple[Any, ...], kwargs: dict[str, Any]
    ) -> DataCheckFunctionT:
        # copy now: the argument may be modified in place by the call
        indices = [
            cast("pd.DataFrame", get_fn_arg(fn, arg, args, kwargs)).index.copy()
            for arg in arg_names
        ]
        return lambda df: (
            f"Index not equal to index of {other_arg}."
            for other_arg, other_idx in zip(arg_names, indices)
            if not df.index.equals(other_idx)
        )

    return mk_check


def same_length_as(args_: str | Iterable[str] | None, /) -> Check | None:
    """Check that the table has as many rows as other argument(s).

    The other arguments may be anything with a length (arrays, lists, tables).
    """
    arg_names = split_or_list(args_)
    if not arg_names:
        return None

    def mk_check(
        fn: Callable[..., Any], args: tuple[Any, ...], kwargs: dict[str, Any]
    ) -> DataCheckFunctionT:
        lengths = [
            (arg, len(cast("pd.DataFrame", get_fn_arg(fn, arg, args, kwargs))))
            for arg in arg_names
        ]
        return lambda df: (
            f"Length of {other_arg} = {other_len} != {len(df)}."
            for other_arg, other_len in lengths
            if len(df) != other_len
        )

    return mk_check
