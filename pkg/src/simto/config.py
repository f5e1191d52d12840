"""JSON run configuration with dotted ``key=value`` overrides.

Schema (every key optional, defaults shown by ``simto config``)::

    {"domain": {"nelx", "nely", "element_size", "volume_fraction", "input_force_angle", "port_length"},
     "sim":    SimConfig fields,
     "topopt": TopOptConfig fields, with "material": MaterialLaw fields,
     "loop":   LoopConfig fields, with "pose_gripper"/"pose_object": {"rotation", "translation"}}
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .fem import GridSpec, MaterialLaw
from .grasp.sim import Pose, SimConfig
from .loop import LoopConfig
from .topopt import DesignDomain, TopOptConfig


class ConfigError(ValueError):
    pass


DOMAIN_DEFAULTS = {
    "nelx": 60,
    "nely": 28,
    "element_size": 2.5,
    "volume_fraction": 0.3,
    "input_force_angle": 190.0,
    "port_length": 10.0,
}


def _tree(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _tree(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def default_tree() -> dict:
    return {
        "domain": dict(DOMAIN_DEFAULTS),
        "sim": _tree(SimConfig()),
        "topopt": _tree(TopOptConfig()),
        "loop": _tree(LoopConfig()),
    }


def valid_keys(tree: dict | None = None, prefix: str = "") -> list[str]:
    tree = default_tree() if tree is None else tree
    out = []
    for k, v in tree.items():
        if isinstance(v, dict):
            out += valid_keys(v, f"{prefix}{k}.")
        else:
            out.append(f"{prefix}{k}")
    return out


def _coerce(value, like, key):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(like, int):
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(like, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(like, list):
        if isinstance(value, str):
            value = json.loads(value) if value.startswith("[") else [v for v in value.split(",")]
        if not isinstance(value, (list, tuple)) or len(value) != len(like):
            raise ConfigError(f"{key}: expected {len(like)} values")
        return [_coerce(v, l, key) for v, l in zip(value, like)]
    return str(value)


def _set(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
    node[leaf] = _coerce(value, node[leaf], key)


def _merge(tree: dict, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            if not isinstance(tree.get(k), dict):
                raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
            _merge(tree[k], v, key + ".")
        elif k not in tree or isinstance(tree[k], dict):
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        else:
            tree[k] = _coerce(v, tree[k], key)


@dataclass
class RunConfig:
    tree: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        tree = default_tree()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            _merge(tree, data)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            _set(tree, k.strip(), v.strip())
        return cls(tree)

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.tree))

    @property
    def grid(self) -> GridSpec:
        d = self.tree["domain"]
        return GridSpec(d["nelx"], d["nely"], d["element_size"])

    @property
    def domain(self) -> DesignDomain:
        d = self.tree["domain"]
        return DesignDomain.default(self.grid, d["volume_fraction"], d["port_length"], d["input_force_angle"])

    @property
    def sim(self) -> SimConfig:
        return SimConfig(**self.tree["sim"])

    @property
    def topopt(self) -> TopOptConfig:
        t = dict(self.tree["topopt"])
        return TopOptConfig(material=MaterialLaw(**t.pop("material")), **t)

    @property
    def loop(self) -> LoopConfig:
        t = dict(self.tree["loop"])
        poses = {k: Pose(t[k]["rotation"], tuple(t[k]["translation"])) for k in ("pose_gripper", "pose_object")}
        t.update(poses)
        return LoopConfig(**t)

    def validate(self) -> None:
        """Construct every section once so invalid values fail early."""
        try:
            self.domain, self.sim, self.topopt, self.loop
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
