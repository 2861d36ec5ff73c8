"""Multiply-accumulate counting for cost reports and complexity tests.

Only conv2d and matmul report MACs (elementwise ops, norms and resizes are
not counted). Counters nest; every active counter sees every report, filed
under the current scope path.
"""

from __future__ import annotations

from contextlib import contextmanager

_ACTIVE: list["MacCounter"] = []
_SCOPES: list[str] = []


class MacCounter:
    """Accumulates MAC counts, grouped by the scope active at report time."""

    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = {}

    def __enter__(self) -> "MacCounter":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.remove(self)
        return False

    def _add(self, n: int, scope: str):
        self.total += n
        self.by_scope[scope] = self.by_scope.get(scope, 0) + n


def add_macs(n: int):
    """Report n multiply-accumulates to every active counter."""
    if not _ACTIVE:
        return
    scope = "/".join(_SCOPES) if _SCOPES else "(top)"
    for counter in _ACTIVE:
        counter._add(n, scope)


@contextmanager
def scoped(name: str):
    """Attribute MACs reported inside the block to `name`."""
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()
