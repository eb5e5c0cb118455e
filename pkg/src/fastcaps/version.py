"""Package version plus a git-describe suffix when running from a checkout."""

from __future__ import annotations

import subprocess
from pathlib import Path

try:
    from importlib.metadata import version as _pkg_version

    __version__ = _pkg_version("fastcaps")
except Exception:  # pragma: no cover - running from a bare source tree
    __version__ = "0+unknown"


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def build_version() -> str:
    """``<version>+g<describe>`` inside a git checkout, otherwise the bare version."""
    desc = _git_describe()
    return f"{__version__}+g{desc}" if desc else __version__


BUILD_VERSION = build_version()
