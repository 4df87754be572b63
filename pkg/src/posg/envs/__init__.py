"""Environments and the preset registry."""
from __future__ import annotations

from ..errors import ConfigError
from .kdt import KdtLayout, KdtState, KeyDoorTreasure, kdt_observation, kdt_transition
from .pointmass import PointMass, PointMassState

ENV_IDS = ("kdt", "kdt-small", "pointmass")


def make_env(env_id: str, layout_path: str | None = None, **kwargs):
    """Build a fresh environment for a preset id.

    ``kdt`` is the 26x36 grid with a 240-step cap, ``kdt-small`` the 13x18 grid
    with a 120-step cap. ``layout_path`` swaps in a custom grid file.
    """
    if env_id in ("kdt", "kdt-small"):
        max_steps = kwargs.pop("max_steps", 240 if env_id == "kdt" else 120)
        if kwargs:
            raise ConfigError(f"unexpected options for {env_id}: {sorted(kwargs)}")
        if layout_path:
            layout = KdtLayout.load(layout_path, max_steps)
        else:
            layout = KdtLayout.builtin("kdt_full" if env_id == "kdt" else "kdt_small", max_steps)
        return KeyDoorTreasure(layout, env_id)
    if env_id == "pointmass":
        return PointMass(env_id=env_id, **kwargs)
    raise ConfigError(f"unknown env id {env_id!r}; expected one of {ENV_IDS}")


__all__ = [
    "ENV_IDS", "KdtLayout", "KdtState", "KeyDoorTreasure", "PointMass", "PointMassState",
    "kdt_observation", "kdt_transition", "make_env",
]
