"""Shared fixtures: parameterizations are expensive, so build each once per session.

Order-30 expansions take over a minute to build and are kept in the pytest
cache directory between sessions.
"""
from contextlib import contextmanager
from functools import lru_cache

import pytest

from heteroclinic import build_parameterization, libration_context
from heteroclinic.parameterize import context_digest, load_parameterization, save_parameterization

_DISK_ORDER = 25


@lru_cache(maxsize=None)
def _build(j, order):
    return build_parameterization(libration_context(j), order)


@pytest.fixture(scope="session")
def expansion(request):
    """``expansion(j, order)`` -> Parameterization of cs(L1) (j=1) or cu(L2) (j=2)."""
    cache = {}

    def get(j, order):
        key = (j, order)
        if key in cache:
            return cache[key]
        if order < _DISK_ORDER:
            p = _build(j, order)
        else:
            ctx = libration_context(j)
            d = request.config.cache.mkdir(f"expansion-{context_digest(ctx)}-L{j}-N{order}")
            if (d / "manifest.json").is_file():
                p = load_parameterization(d)
            else:
                p = build_parameterization(ctx, order)
                save_parameterization(p, d)
        cache[key] = p
        return p
    return get


@pytest.fixture(scope="session")
def p1(expansion):
    return expansion(1, 12)


@pytest.fixture(scope="session")
def p2(expansion):
    return expansion(2, 12)


# ------------------------------------------------------------------ acceptance report

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as info:`` records PASS/FAIL for the summary.

    Measured values stored in the ``info`` dict are printed next to the verdict.
    """

    @contextmanager
    def record(n, title):
        info = {}
        try:
            yield info
        except BaseException as exc:
            info.setdefault("error", str(exc).splitlines()[0][:120] if str(exc) else
                            type(exc).__name__)
            _CRITERIA[n] = ("FAIL", title, info)
            raise
        _CRITERIA[n] = ("PASS", title, info)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title, info = _CRITERIA[n]
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}  [{detail}]")
