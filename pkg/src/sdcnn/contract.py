"""Table contracts for functions that exchange pandas objects.

:func:`argument` checks a DataFrame/Series argument before the call, :func:`result`
checks the returned value after it. Checks are either pandera schemas (see
:mod:`sdcnn.schemas`) or cross-argument checks from :mod:`sdcnn.checks`. Violations are
handled according to :mod:`sdcnn.mode`.

>>> import pandas as pd
>>> import pandera.pandas as pa
>>> from sdcnn import contract, mode
>>> @contract.result(pa.DataFrameSchema({"fpr": pa.Column(float)}))
... def curve() -> pd.DataFrame:
...     return pd.DataFrame({"tpr": [0.0]})
>>> with mode.raises():
...     curve()
Traceback (most recent call last):
sdcnn.errors.ContractViolationError: curve: Output: ...
"""

from __future__ import annotations

import functools
from collections.abc import Iterable
from dataclasses import dataclass
from itertools import chain
from typing import TYPE_CHECKING, Any, Callable, Protocol, TypeVar, Union, cast

import pandas as pd
import pandera.errors as pa_errors
from pandera.api.base.schema import BaseSchema

from sdcnn._lib import (
    ORIGINAL_FUNCTION_ATTRIBUTE,
    UNDEFINED,
    get_fn_arg,
    get_function_name,
)
from sdcnn.mode import Modes, get_mode

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Hashable

_WrappedT = TypeVar("_WrappedT", bound=Callable[..., Any])

DataCheckFunctionT = Callable[[Union[pd.DataFrame, pd.Series]], Iterable[str]]


class Check(Protocol):  # pragma: no cover
    """A check factory.

    Called with the decorated function and its call arguments, it returns a
    function that takes the table to check and yields error messages.
    """

    def __call__(
        self, fn: Callable[..., Any], args: tuple[Any, ...], kwargs: dict[str, Any]
    ) -> DataCheckFunctionT:
        """Create the check for one call of *fn*."""
        ...


@dataclass(frozen=True)
class CheckSchema(Check):
    """Validate the table against a pandera schema, collecting all failures."""

    schema: BaseSchema

    def __call__(
        self, fn: Callable[..., Any], args: tuple[Any, ...], kwargs: dict[str, Any]
    ) -> DataCheckFunctionT:
        del fn, args, kwargs

        def check(df: pd.DataFrame | pd.Series | None) -> Iterable[str]:
            if df is None:
                yield "Value is None"
                return
            try:
                validate = cast("Any", self.schema.validate)
                validate(df, lazy=True, inplace=False)
            except (pa_errors.SchemaErrors, pa_errors.SchemaError) as exc:
                yield from map(str, exc.args)
            except pa_errors.BackendNotFoundError:
                yield (
                    f"Backend {type(self.schema).__qualname__} not applicable to"
                    f" {type(df).__qualname__}"
                )

        return check


def _as_checks(checks_: Iterable[Check | BaseSchema | None]) -> list[Check]:
    return [
        CheckSchema(check) if isinstance(check, BaseSchema) else check
        for check in checks_
        if check is not None
    ]


def argument(
    arg: str,
    /,
    *checks_: Check | BaseSchema | None,
    key: Any = UNDEFINED,
) -> Callable[[_WrappedT], _WrappedT]:
    """Check the table passed as argument *arg* before calling the function.

    :param arg: Name of the argument holding the table.
    :param checks_: pandera schemas or checks from :mod:`sdcnn.checks`.
    :param key: Either a callable extracting the table from the argument value, or
        an item key (``value[key]``).
    """
    checks_list = _as_checks(checks_)

    def decorator(fn: _WrappedT) -> _WrappedT:
        if get_mode() == Modes.SKIP:
            return fn

        orig_fn = getattr(fn, ORIGINAL_FUNCTION_ATTRIBUTE, fn)

        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            mode = get_mode()
            if mode.no_handling():
                return fn(*args, **kwargs)

            checkers = [check(orig_fn, args, kwargs) for check in checks_list]
            df = _get_from_key(key, get_fn_arg(orig_fn, arg, args, kwargs))
            errs = chain.from_iterable(check(df) for check in checkers)
            mode.handle(errs, f"{get_function_name(fn)}: Argument {arg}: ")
            return fn(*args, **kwargs)

        setattr(wrapper, ORIGINAL_FUNCTION_ATTRIBUTE, orig_fn)
        return cast("_WrappedT", wrapper)

    return decorator


def result(
    *checks_: Check | BaseSchema | None,
    key: Any = UNDEFINED,
) -> Callable[[_WrappedT], _WrappedT]:
    """Check the table returned by the function.

    :param checks_: pandera schemas or checks from :mod:`sdcnn.checks`.
    :param key: Either a callable extracting the table from the return value, or an
        item key (``value[key]``). Stack several decorators to check several tables
        of one return value.
    """
    checks_list = _as_checks(checks_)

    def decorator(fn: _WrappedT) -> _WrappedT:
        if get_mode() == Modes.SKIP:
            return fn
        orig_fn = getattr(fn, ORIGINAL_FUNCTION_ATTRIBUTE, fn)

        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            mode = get_mode()
            if mode.no_handling():
                return fn(*args, **kwargs)

            checkers = [check(orig_fn, args, kwargs) for check in checks_list]
            res = fn(*args, **kwargs)
            df = _get_from_key(key, res)
            errs = chain.from_iterable(check(df) for check in checkers)
            mode.handle(errs, f"{get_function_name(fn)}: Output: ")
            return res

        setattr(wrapper, ORIGINAL_FUNCTION_ATTRIBUTE, orig_fn)
        return cast("_WrappedT", wrapper)

    return decorator


def _get_from_key(key: Hashable | Callable[[Any], Any], value: Any) -> Any:
    """Get the table out of *value*.

    ``UNDEFINED`` returns the value itself, a callable is applied to it, anything
    else is used as an item key.
    """
    if key is UNDEFINED:
        return value
    if callable(key):
        return key(value)
    return value[key]
