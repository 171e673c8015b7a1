"""Handling of table-contract violations.

Functions that exchange feature matrices and report tables are decorated with
:func:`sdcnn.contract.argument` and :func:`sdcnn.contract.result`. What happens when a
table violates its contract is decided by a global mode.

.. important::

    By default violations are logged as warnings and processing continues.
    Errors that make a result meaningless (NaN features, a single class, missing
    image sources) are raised by the pipeline itself and do not depend on the mode.

The environment variable :data:`SDCNN_CONTRACT_MODE_ENV` sets the initial mode; the
tests set it to ``"raise"``.

>>> import sdcnn
>>> with sdcnn.mode.as_mode("raise"):
...     sdcnn.mode.get_mode()
<Modes.RAISE: 'raise'>
"""

from __future__ import annotations

import enum
import os
from contextlib import contextmanager
from logging import getLogger
from typing import TYPE_CHECKING, Literal, Union, cast

from sdcnn.errors import ContractViolationError

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Generator, Iterable

#: Environment variable holding the initial contract mode.
SDCNN_CONTRACT_MODE_ENV = "SDCNN_CONTRACT_MODE"

ModesT = Union[
    "Modes",
    Literal["skip", "silent", "debug", "info", "warn", "error", "raise"],
]

logger = getLogger(__name__)
_LOG_LEVELS = {
    "debug": 10,
    "info": 20,
    "warn": 30,
    "error": 40,
}


class Modes(enum.Enum):
    """What to do with a contract violation.

    * **skip** Do not even wrap decorated functions. Fixed at import time.
    * **silent** Wrap, but do not check.
    * **debug, info, warn, error** Log each violation at that level.
    * **raise** Raise :class:`~sdcnn.errors.ContractViolationError`.
    """

    SKIP = "skip"
    SILENT = "silent"
    DEBUG = "debug"
    INFO = "info"
    WARN = "warn"
    ERROR = "error"
    RAISE = "raise"

    def handle(self, msgs: Iterable[str], prefix: str) -> None:
        """Report the violation messages according to the mode."""
        if self.no_handling():
            return
        if self == Modes.RAISE:
            msg = "\n".join(f"{prefix}{m}" for m in msgs)
            if msg:
                raise ContractViolationError(msg)
            return
        for msg in msgs:
            logger.log(_LOG_LEVELS[self.value], "%s%s", prefix, msg)

    def no_handling(self) -> bool:
        """Check whether contracts are not evaluated at all."""
        return self in (Modes.SKIP, Modes.SILENT)

    def __eq__(self, other: object) -> bool:
        """Compare the mode with a string or another mode."""
        if isinstance(other, str):
            return self.value == other
        return super().__eq__(other)

    def __hash__(self) -> int:
        """Hash by value."""
        return hash(self.value)


def get_mode() -> Modes:
    """Get the global contract mode."""
    return _mode


def set_mode(mode: ModesT) -> Modes:
    """Set the global contract mode.

    >>> set_mode("raise")
    <Modes.RAISE: 'raise'>
    """
    global _mode  # noqa: PLW0603
    if isinstance(mode, str):
        mode = Modes(mode)
    _mode = mode
    return mode


@contextmanager
def as_mode(mode: ModesT) -> Generator[None]:
    """Temporarily switch the contract mode. Not thread-safe."""
    prev_mode = _mode
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(prev_mode)


@contextmanager
def raises() -> Generator[None]:
    """Raise on every contract violation within the context."""
    with as_mode(Modes.RAISE):
        yield


@contextmanager
def silent() -> Generator[None]:
    """Skip contract evaluation within the context."""
    with as_mode(Modes.SILENT):
        yield


def _get_mode_from_env() -> Modes:
    """Read the initial mode from :data:`SDCNN_CONTRACT_MODE_ENV`."""
    mode_env = os.getenv(SDCNN_CONTRACT_MODE_ENV)
    if not mode_env:
        logger.debug(
            "No environment variable %s set. Default to warn.",
            SDCNN_CONTRACT_MODE_ENV,
        )
        return set_mode(Modes.WARN)
    try:
        return set_mode(cast("ModesT", mode_env))
    except ValueError:
        logger.warning(
            "Environment variable %s contains invalid value %r. "
            "Setting to default mode: warn",
            SDCNN_CONTRACT_MODE_ENV,
            mode_env,
        )
        return set_mode(Modes.WARN)


_mode: Modes = _get_mode_from_env()
