"""Run configuration: JSON schema, validation with line-precise messages,
dotted-path overrides and conversion into the library's parameter objects.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field

import jsonschema

from .errors import ConfigError
from .flow import MixerConfig
from .hardware import ConductanceMap, CostConstants, NoiseModel
from .lattice import make_action
from .samplers import HmcParams
from .training import TrainHyper

__all__ = ["RUN_CONFIG_SCHEMA", "RunConfig", "load_config", "parse_config", "apply_override",
           "parse_value", "sweep_values", "default_config"]

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_BOOL = {"type": "boolean"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "anflow run configuration",
    **_obj({
        "lattice": _obj({"dims": {"type": "array", "items": _POS_INT,
                                  "minItems": 2, "maxItems": 2}}, ["dims"]),
        "action": {
            **_obj({"kind": {"enum": ["phi4", "graphene"]},
                    "params": {"type": "object"}}, ["kind"]),
            "allOf": [
                {"if": {"properties": {"kind": {"const": "phi4"}}},
                 "then": {"properties": {"params": _obj(
                     {"m2": _NUM, "lambda": _NUM, "lam": _NUM})}}},
                {"if": {"properties": {"kind": {"const": "graphene"}}},
                 "then": {"properties": {"params": _obj(
                     {"g": _NUM, "u": _NUM, "mass_sign": {"enum": [-1, 1]}})}}},
            ],
        },
        "flow": _obj({
            "patch_size": _POS_INT, "channels": _POS_INT, "blocks": _POS_INT,
            "token_hidden": _POS_INT, "channel_hidden": _POS_INT, "timesteps": _POS_INT,
            "lora_rank": _POS_INT, "lora_scale": _NUM, "z2_equivariant": _BOOL,
            "bn_momentum": _POS, "bn_eps": _POS}),
        "train": _obj({
            "batch_size": {"type": "integer", "minimum": 2}, "steps": {"type": "integer", "minimum": 0},
            "lr": _POS, "betas": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "ess_target": _POS, "eval_every": _POS_INT, "eval_batch": _POS_INT,
            "lr_floor": {"type": "number", "minimum": 0}}),
        "finetune": _obj({"steps": {"type": "integer", "minimum": 0}, "lr": _POS,
                          "batch_size": {"type": "integer", "minimum": 2},
                          "lr_floor": {"type": "number", "minimum": 0}}),
        "sampler": _obj({
            "hmc": _obj({"step_size": _POS, "n_leapfrog": _POS_INT, "burn_in": {"type": "integer", "minimum": 0},
                         "thin": _POS_INT, "tune": _BOOL, "traj_length": _POS}),
            "flow_mh": _obj({"chunk": _POS_INT}),
        }),
        "hardware": _obj({
            "conductance": _obj({k: _NUM for k in ("g_min", "g_max", "g_ref", "v_min", "v_max")}
                                | {"dac_bits": _POS_INT, "adc_bits": _POS_INT}),
            "noise": _obj({"sigma": {"type": "number", "minimum": 0}}),
            "costs": _obj({k: _POS for k in ("e_digital_mac", "e_cell", "e_dac", "e_tia", "e_adc",
                                              "analog_tflops_mm2", "digital_tflops_mm2", "area_mm2")}
                          | {"flops_per_mac": _POS_INT, "array_size": _POS_INT}),
            "quantize": _BOOL,
        }),
        "observables": _obj({"resamples": _POS_INT, "block": _POS_INT}),
        "seed": {"type": "integer", "minimum": 0},
    }, ["lattice", "action"]),
}


def default_config() -> dict:
    return {"lattice": {"dims": [4, 4]},
            "action": {"kind": "phi4", "params": {"m2": -4.0, "lambda": 5.0}},
            "seed": 0}


# ----------------------------------------------------------------- locating

def _line_of(text: str | None, path) -> int | None:
    """Best-effort line number of the JSON member at ``path`` in ``text``."""
    if not text:
        return None
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if not m:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _describe(err: jsonschema.ValidationError, text: str | None) -> str:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = [k for k in err.instance if k not in err.schema.get("properties", {})]
        key = extra[0] if extra else "?"
        where = ".".join(map(str, path + [key]))
        line = _line_of(text, path + [key])
        msg = f"unknown key {key!r} at {where}"
    elif err.validator == "required":
        where = ".".join(map(str, path)) or "<root>"
        line = _line_of(text, path)
        msg = f"{err.message} in {where}"
    else:
        where = ".".join(map(str, path)) or "<root>"
        line = _line_of(text, path)
        msg = f"invalid value for {where}: {err.message}"
    return f"line {line}: {msg}" if line else msg


def _validate(doc: dict, text: str | None = None) -> None:
    v = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errs = sorted(v.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), str(e.absolute_path)))
    if errs:
        # deepest-first descriptions are the useful ones for nested mistakes
        best = jsonschema.exceptions.best_match(errs)
        raise ConfigError(_describe(best, text))


# ----------------------------------------------------------------- overrides

def parse_value(raw: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(doc: dict, assignment: str) -> dict:
    """Return a copy of ``doc`` with ``a.b.c=value`` applied."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"empty override path in {assignment!r}")
    out = copy.deepcopy(doc)
    node = out
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path {path!r}: {k!r} is not an object")
        node = nxt
    node[keys[-1]] = parse_value(raw.strip())
    return out


def sweep_values(spec: str) -> tuple[str, list[float]]:
    """Parse ``key.path=start:stop:step`` (inclusive) or ``key.path=v1,v2,...``."""
    if "=" not in spec:
        raise ConfigError(f"--vary {spec!r} must look like key.path=start:stop:step")
    path, rng = spec.split("=", 1)
    try:
        if ":" in rng:
            a, b, s = (float(v) for v in rng.split(":"))
            if s <= 0 or b < a:
                raise ValueError
            n = int(round((b - a) / s))
            vals = [a + i * s for i in range(n + 1)]
        else:
            vals = [parse_value(v) for v in rng.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse sweep range {rng!r}") from None
    return path, vals


# ------------------------------------------------------------------ RunConfig

@dataclass
class RunConfig:
    doc: dict
    lattice: tuple[int, int]
    action_kind: str
    action_params: dict
    flow: MixerConfig
    train: TrainHyper
    finetune: TrainHyper
    hmc: HmcParams
    flow_mh: dict = field(default_factory=dict)
    conductance: ConductanceMap = field(default_factory=ConductanceMap)
    noise: NoiseModel = field(default_factory=NoiseModel)
    costs: CostConstants = field(default_factory=CostConstants)
    quantize: bool = True
    observables: dict = field(default_factory=dict)
    seed: int = 0

    def action(self):
        return make_action(self.action_kind, self.action_params)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)


def parse_config(doc: dict, text: str | None = None, overrides=()) -> RunConfig:
    """Validate ``doc`` (after overrides) and build a :class:`RunConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    for o in overrides:
        doc = apply_override(doc, o)
    _validate(doc, text)
    seed = int(doc.get("seed", 0))
    dims = tuple(doc["lattice"]["dims"])
    act = doc["action"]
    kind = act["kind"]
    params = dict(act.get("params", {}))
    if kind == "phi4":
        params = {"m2": params.get("m2", -4.0),
                  "lambda": params.get("lambda", params.get("lam", 5.0))}
    else:
        params = {"g": params.get("g", 1.0), "u": params.get("u", 0.1),
                  "mass_sign": params.get("mass_sign", 1)}
    try:
        flow = MixerConfig(lattice=dims, **doc.get("flow", {}))
        train = TrainHyper(**{"seed": seed, **doc.get("train", {})})
        ft = TrainHyper(**{"seed": seed, "steps": 500, **doc.get("finetune", {}),
                           "mode": "lora_only"})
        sampler = doc.get("sampler", {})
        hmc = HmcParams(**{"seed": seed, **sampler.get("hmc", {})})
        hw = doc.get("hardware", {})
        cmap = ConductanceMap(**hw.get("conductance", {}))
        noise = NoiseModel(**{"seed": seed, **hw.get("noise", {})})
        costs = CostConstants(**hw.get("costs", {}))
        make_action(kind, params)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    return RunConfig(doc, dims, kind, params, flow, train, ft, hmc, dict(sampler.get("flow_mh", {})),
                     cmap, noise, costs, bool(hw.get("quantize", True)),
                     dict(doc.get("observables", {})), seed)


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}: malformed JSON: {e.msg}") from None
    return parse_config(doc, text, overrides)
