"""Small internal helpers shared by the pipeline modules."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, cast

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    import types
    from collections.abc import Iterable


UNDEFINED = object()
"""Mark a parameter as undefined."""

ORIGINAL_FUNCTION_ATTRIBUTE = "_sdcnn_contract_original_function"
"""Name of attribute to attach to decorated functions."""


def split_or_list(value: str | Iterable[str] | None) -> list[str]:
    """Split the value by comma and return a list of strings.

    >>> split_or_list("FFDM, VIRTUAL")
    ['FFDM', 'VIRTUAL']
    """
    if not value:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def derive_seed(master: int, *stream: int) -> int:
    """Derive an independent 63-bit seed from a master seed and a stream index.

    The same (master, stream) always yields the same seed, whatever order streams
    are requested in.

    >>> derive_seed(7, 0) == derive_seed(7, 0)
    True
    >>> derive_seed(7, 0) != derive_seed(7, 1)
    True
    """
    state = np.random.SeedSequence([master, *stream]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def atomic_write_bytes(path: str | os.PathLike[str], data: bytes) -> Path:
    """Write *data* to *path* through a temporary file and an atomic rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        Path(tmp_name).replace(target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target


def atomic_write_text(path: str | os.PathLike[str], text: str) -> Path:
    """Write UTF-8 text atomically."""
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | os.PathLike[str], obj: object) -> Path:
    """Write JSON with sorted keys so identical content gives identical bytes."""
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def get_fn_arg(
    func: Callable[..., Any],
    arg_name: str,
    args: tuple[Any, ...],
    kwargs: dict[str, Any],
) -> object:
    """Get the named argument from a function call (either *args, **kwargs or
    the defaults).
    """
    if arg_name in kwargs:
        return kwargs[arg_name]
    co = _get_code(func)
    for var_name, arg in zip(co.co_varnames, args):
        if arg_name == var_name:
            return arg
    defaults = getattr(func, "__defaults__", None)
    if defaults:
        for var_name, arg in zip(
            co.co_varnames[co.co_argcount - len(defaults) :],
            defaults,
        ):
            if arg_name == var_name:
                return arg
    kwdefaults: dict[str, Any] = getattr(func, "__kwdefaults__", None) or {}
    if arg_name in kwdefaults:
        return kwdefaults[arg_name]
    msg = f"{get_function_name(func)} requires argument '{arg_name}' for its contract"
    raise ValueError(msg)


def _get_code(func: Callable[..., Any]) -> types.CodeType:
    co = getattr(func, "__code__", None)
    if co is None:
        call = getattr(func, "__call__", None)  # noqa: B004
        co = getattr(call, "__code__", None)
    if co is None:
        msg = f"Function {get_function_name(func)} has no code object."
        raise TypeError(msg)
    return cast("types.CodeType", co)


def get_function_name(fn: Callable[..., Any]) -> str:
    """Get the qualified name of the function."""
    name = getattr(fn, "__qualname__", None)
    if name is not None:
        return cast("str", name)

    return getattr(fn, "__name__", str(fn))
