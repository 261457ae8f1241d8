"""Domain specification files (JSON) and schema validation of everything we read or write."""

from __future__ import annotations

import hashlib
import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import SpecError, UsageError
from .geometry import Arc, DomainSpec, NonlocalMap, OperatorCoefficients, WeightProfile
from .library import BUILTIN

SCHEMA_VERSION = 1


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("nonlocal_feller").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def schema_names() -> list[str]:
    d = resources.files("nonlocal_feller").joinpath("schemas")
    return sorted(p.name.removesuffix(".schema.json") for p in d.iterdir() if p.name.endswith(".schema.json"))


def check_schema(obj, name: str):
    try:
        jsonschema.validate(obj, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SpecError(f"{name}: {exc.message} at {path}") from None


def _angle(v) -> float:
    """Angles may be numbers or strings such as "pi/4", "-3*pi/4"."""
    if isinstance(v, (int, float)):
        return float(v)
    s = str(v).replace(" ", "")
    sign = -1.0 if s.startswith("-") else 1.0
    s = s.lstrip("+-")
    num, _, den = s.partition("/")
    if "pi" in num:
        k = num.replace("*pi", "").replace("pi", "") or "1"
        val = float(k) * math.pi
    else:
        val = float(num)
    return sign * val / (float(den) if den else 1.0)


def _arc(obj: dict) -> Arc:
    if "segment" in obj:
        return Arc.segment(*obj["segment"])
    if "circle" in obj:
        c = obj["circle"]
        arc = Arc.circle(c["center"], float(c["radius"]), _angle(c["start"]), _angle(c["end"]), int(c["segments"]))
        return arc
    return Arc(np.asarray(obj["points"], dtype=float))


def _map(obj: dict, corners: np.ndarray) -> NonlocalMap:
    w = WeightProfile.from_json(obj["weight"])
    arc, corner = int(obj["arc"]), int(obj["corner"])
    if "similarity" in obj:
        s = obj["similarity"]
        if not 0 <= corner < len(corners):
            raise SpecError(f"map references corner {corner}, but the spec has {len(corners)} corners")
        target = s.get("target", corners[corner].tolist())
        return NonlocalMap.similarity(arc, corner, corners[corner], target, _angle(s["rotation"]),
                                      float(s.get("ratio", 1.0)), w)
    a = obj["affine"]
    return NonlocalMap(arc, corner, np.asarray(a["matrix"], dtype=float), np.asarray(a["offset"], dtype=float), w)


def spec_from_json(obj: dict) -> DomainSpec:
    check_schema(obj, "domain_spec")
    if "builtin" in obj:
        return builtin_spec(obj["builtin"])
    arcs = [_arc(a) for a in obj["arcs"]]
    # close tiny gaps from decimal round-off so consecutive arcs share endpoints exactly
    for i, a in enumerate(arcs):
        nxt = arcs[(i + 1) % len(arcs)]
        if np.linalg.norm(a.points[-1] - nxt.points[0]) < 1e-9:
            a.points[-1] = nxt.points[0]
    corners = np.asarray(obj.get("corners", []), dtype=float).reshape(-1, 2)
    maps = [_map(m, corners) for m in obj.get("maps", [])]
    return DomainSpec(arcs, corners, maps, OperatorCoefficients.from_json(obj.get("coefficients")),
                      eps=obj.get("eps"), eps1=obj.get("eps1"), samples_per_arc=int(obj.get("samples_per_arc", 256)),
                      name=obj.get("name", "domain"))


def spec_to_json(spec: DomainSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "arcs": [a.to_json() for a in spec.arcs],
        "corners": spec.corners.tolist(),
        "maps": [m.to_json() for m in spec.maps],
        "coefficients": spec.coefficients.to_json(),
        "eps": spec.eps,
        "eps1": spec.eps1,
        "samples_per_arc": spec.samples_per_arc,
    }


def builtin_spec(name: str) -> DomainSpec:
    if name not in BUILTIN:
        raise UsageError(f"unknown built-in spec {name!r}; choose from {', '.join(sorted(BUILTIN))}")
    return BUILTIN[name]()


def read_text(path) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def load_spec(source: str) -> tuple[DomainSpec, str]:
    """Load ``builtin:<name>`` or a JSON file; returns the spec and a content hash."""
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        spec = builtin_spec(name)
        return spec, sha256_text(canonical_json(spec_to_json(spec)))
    text = read_text(source)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{source}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return spec_from_json(obj), sha256_text(text)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj, path):
    """Deterministic, human-readable JSON (sorted keys, trailing newline)."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
