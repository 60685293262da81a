"""Versioned prompt templates shipped with the package."""
from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

TEMPLATE_VERSION = "v1"
TEMPLATE_NAMES = ("zero_shot", "ekb", "nkb")


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    path = resources.files("esg_forge").joinpath(f"templates/{name}_{version}.txt")
    return path.read_text(encoding="utf-8")


def template_sha256(name: str, version: str = TEMPLATE_VERSION) -> str:
    return hashlib.sha256(load_template(name, version).encode("utf-8")).hexdigest()


def template_hashes(version: str = TEMPLATE_VERSION) -> dict[str, str]:
    return {f"{n}_{version}": template_sha256(n, version) for n in TEMPLATE_NAMES}


def zero_shot_prompt(question: str, version: str = TEMPLATE_VERSION) -> str:
    return load_template("zero_shot", version).format(question=question)
