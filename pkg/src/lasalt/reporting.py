"""Markdown summaries of verification and closure reports."""

from __future__ import annotations

import functools
import logging
from typing import TYPE_CHECKING, Any

import fsspec
import jinja2


if TYPE_CHECKING:
    import os

    from lasalt.montecarlo import ClosureReport


logger = logging.getLogger(__name__)


def sci(value: Any, digits: int = 3) -> str:
    """Format a number in scientific notation, pass anything else through."""
    if isinstance(value, bool) or not isinstance(value, int | float):
        return str(value)
    return f"{value:.{digits}e}"


def verdict(passed: bool) -> str:  # noqa: FBT001
    return "PASS" if passed else "FAIL"


@functools.cache
def get_environment() -> jinja2.Environment:
    """Environment loading the packaged ``*.md.jinja`` templates."""
    env = jinja2.Environment(
        loader=jinja2.PackageLoader("lasalt", "resources"),
        undefined=jinja2.StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        autoescape=False,
    )
    env.filters.update(sci=sci, verdict=verdict)
    return env


def render(template: str, **context: Any) -> str:
    return get_environment().get_template(template).render(**context)


def render_verify_report(summary: dict[str, Any]) -> str:
    """Render the summary produced by `lasalt.verify.run_verify`."""
    return render("verify_report.md.jinja", summary=summary)


def render_closure_report(report: ClosureReport) -> str:
    return render("closure_report.md.jinja", report=report.as_dict())


def write_text(text: str, path: str | os.PathLike[str]) -> None:
    with fsspec.open(str(path), mode="w", encoding="utf-8") as f:
        f.write(text)
    logger.info("Wrote %s", path)
