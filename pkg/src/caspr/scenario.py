"""Scenario files: schema, loading, validation, overrides.

A scenario is a YAML document describing one experiment: topology
delays and loss processes, the flow workload, coding and recovery
knobs, and the seed list.  Validation is strict; unknown keys are
rejected so a typo fails loudly instead of silently running with a
default.
"""

from __future__ import annotations

import copy
from importlib import resources

import jsonschema
import yaml


class ScenarioError(Exception):
    """Invalid scenario document; message lists every problem found."""


_LOSS = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "p"],
            "properties": {
                "kind": {"const": "bernoulli"},
                "p": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "p_good_bad", "p_bad_good", "loss_good", "loss_bad"],
            "properties": {
                "kind": {"const": "gilbert_elliott"},
                "p_good_bad": {"type": "number", "minimum": 0, "maximum": 1},
                "p_bad_good": {"type": "number", "minimum": 0, "maximum": 1},
                "loss_good": {"type": "number", "minimum": 0, "maximum": 1},
                "loss_bad": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "google_burst"},
                "p_first": {"type": "number", "minimum": 0, "maximum": 1},
                "p_cont": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    ]
}

_LINK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["delay_ms"],
    "properties": {
        "delay_ms": {"type": "number", "exclusiveMinimum": 0},
        "jitter_ms": {"type": "number", "minimum": 0},
        "loss": _LOSS,
        "bandwidth_mbps": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "duration_s", "seeds", "topology", "flows", "coding"],
    "properties": {
        "name": {"type": "string", "pattern": "^[a-z0-9_]+$"},
        "description": {"type": "string"},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "cooldown_s": {"type": "number", "minimum": 0},
        "seeds": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "integer", "minimum": 0},
        },
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "required": ["direct", "access", "inter_dc", "recovery"],
            "properties": {
                "direct": _LINK,
                "access": _LINK,
                "inter_dc": _LINK,
                "recovery": _LINK,
            },
        },
        "outages": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["flow", "start_s", "end_s"],
                "properties": {
                    "flow": {"type": "integer", "minimum": 0},
                    "start_s": {"type": "number", "minimum": 0},
                    "end_s": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "flows": {
            "type": "object",
            "additionalProperties": False,
            "required": ["count", "packet_size", "interval_ms", "on_s"],
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "packet_size": {"type": "integer", "minimum": 0, "maximum": 65503},
                "interval_ms": {"type": "number", "exclusiveMinimum": 0},
                "on_s": {"type": "number", "exclusiveMinimum": 0},
                "off_mean_s": {"type": "number", "minimum": 0},
                "stagger_ms": {"type": "number", "minimum": 0},
                "duplication": {"enum": ["full", "selective"]},
                "selective_first_n": {"type": "integer", "minimum": 1},
            },
        },
        "coding": {
            "type": "object",
            "additionalProperties": False,
            "required": ["k_max", "parity_cross"],
            "properties": {
                "k_max": {"type": "integer", "minimum": 2, "maximum": 251},
                "parity_cross": {"type": "integer", "minimum": 1, "maximum": 4},
                "parity_in": {"type": "integer", "minimum": 0, "maximum": 4},
                "in_block": {"type": "integer", "minimum": 0, "maximum": 64},
                "cross_flush_ms": {"type": "number", "exclusiveMinimum": 0},
                "in_flush_ms": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "recovery": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "deadline_rtt": {"type": "number", "exclusiveMinimum": 0},
                "store_ttl_rtt": {"type": "number", "exclusiveMinimum": 0},
                "proactive_nacks": {"type": "integer", "minimum": 1},
                "cache_packets": {"type": "integer", "minimum": 1},
                "cache_ttl_rtt": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["two_state", "fixed_small"]},
                "small_ms": {"type": "number", "exclusiveMinimum": 0},
                "long_rtt": {"type": "number", "exclusiveMinimum": 0},
                "burst_factor": {"type": "number", "exclusiveMinimum": 0},
                "giveup_nacks": {"type": "integer", "minimum": 1},
            },
        },
        "straggler": {
            "type": "object",
            "additionalProperties": False,
            "required": ["receiver", "delay_ms"],
            "properties": {
                "receiver": {"type": "integer", "minimum": 0},
                "delay_ms": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "price_per_gb": {"type": "number", "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "cooldown_s": 2.0,
    "outages": [],
    "flows": {
        "off_mean_s": 0.0,
        "stagger_ms": 0.0,
        "duplication": "full",
        "selective_first_n": 1,
    },
    "coding": {
        "parity_in": 1,
        "in_block": 5,
        "cross_flush_ms": 30.0,
        "in_flush_ms": 50.0,
    },
    "recovery": {
        "deadline_rtt": 1.0,
        "store_ttl_rtt": 4.0,
        "proactive_nacks": 3,
        "cache_packets": 2048,
        "cache_ttl_rtt": 4.0,
    },
    "detector": {
        "kind": "two_state",
        "small_ms": 25.0,
        "long_rtt": 1.0,
        "burst_factor": 4.0,
        "giveup_nacks": 8,
    },
    "cost": {
        "price_per_gb": 0.087,
    },
    "topology_link": {
        "jitter_ms": 0.0,
    },
}


def _merge_defaults(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    out.setdefault("cooldown_s", DEFAULTS["cooldown_s"])
    out.setdefault("outages", copy.deepcopy(DEFAULTS["outages"]))
    out.setdefault("description", "")
    for section in ("flows", "coding", "recovery", "detector", "cost"):
        block = out.setdefault(section, {})
        for key, val in DEFAULTS.get(section, {}).items():
            block.setdefault(key, val)
    for link in out.get("topology", {}).values():
        if isinstance(link, dict):
            for key, val in DEFAULTS["topology_link"].items():
                link.setdefault(key, val)
    return out


def _semantic_checks(cfg: dict) -> list[str]:
    problems = []
    flows = cfg["flows"]["count"]
    for i, outage in enumerate(cfg["outages"]):
        if outage["flow"] >= flows:
            problems.append(f"outages[{i}].flow {outage['flow']} out of range "
                            f"(only {flows} flows)")
        if outage["end_s"] <= outage["start_s"]:
            problems.append(f"outages[{i}] is empty or reversed")
    if cfg["coding"]["in_block"] and cfg["coding"]["parity_in"] < 1:
        problems.append("coding.parity_in must be >= 1 when in_block > 0")
    strag = cfg.get("straggler")
    if strag and strag["receiver"] >= flows:
        problems.append(f"straggler.receiver {strag['receiver']} out of range")
    if cfg["cooldown_s"] >= cfg["duration_s"]:
        problems.append("cooldown_s must be shorter than duration_s")
    for link_name, link in cfg["topology"].items():
        if link["jitter_ms"] > link["delay_ms"]:
            problems.append(f"topology.{link_name}: jitter exceeds delay")
    return problems


def validate(cfg: dict) -> dict:
    """Validate a raw scenario dict; returns it with defaults applied."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    msgs = []
    for err in errors:
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        msgs.append(f"{path}: {err.message}")
    if msgs:
        raise ScenarioError("\n".join(msgs))
    merged = _merge_defaults(cfg)
    problems = _semantic_checks(merged)
    if problems:
        raise ScenarioError("\n".join(problems))
    return merged


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides; values parse as YAML."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not of the form path=value")
        path, _, raw = item.partition("=")
        keys = path.strip().split(".")
        if not all(keys):
            raise ScenarioError(f"override {item!r} has an empty path segment")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ScenarioError(f"override {item!r}: unparseable value ({e})")
        node = out
        for key in keys[:-1]:
            if isinstance(node, list):
                key = int(key)
                node = node[key]
            else:
                node = node.setdefault(key, {})
            if not isinstance(node, (dict, list)):
                raise ScenarioError(f"override {path!r} descends through a scalar")
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return out


def load(path: str, overrides: list[str] | None = None) -> dict:
    """Load, override, and validate a scenario file."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path}: YAML parse error: {e}")
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario must be a mapping")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return validate(raw)


def bundled_path(name: str) -> str | None:
    """Resolve a bare scenario name against the packaged scenario set."""
    ref = resources.files("caspr") / "scenarios" / f"{name}.yaml"
    if ref.is_file():
        return str(ref)
    return None


def bundled_names() -> list[str]:
    root = resources.files("caspr") / "scenarios"
    if not root.is_dir():
        return []
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))
