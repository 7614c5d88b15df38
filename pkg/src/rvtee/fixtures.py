"""Property documents shipped with the package."""

from __future__ import annotations

from importlib import resources

HANDSHAKE = "handshake.prop"
KEY_EGRESS = "key_egress.prop"


def fixture_text(name: str) -> str:
    return resources.files("rvtee").joinpath("data").joinpath(name).read_text()


def fixture_path(name: str):
    return resources.files("rvtee").joinpath("data").joinpath(name)
