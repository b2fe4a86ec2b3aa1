"""JSON schemas for the command configs and builders for the run objects.

Every object in every schema sets ``additionalProperties: false`` so typos
fail loudly. Relative file paths inside a config resolve against the
directory that holds the config file.
"""

from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .baselines import DmpcConfig, LinearGains
from .dynamics import DEFAULT_DT, NoiseConfig
from .harness import ControllerSpec, LeadProfile, Scenario
from .losses import LyapunovHyper, ShapingWeights
from .nn import MlpParams, load
from .region import Region
from .training import TrainConfig

SHIPPED_CONTROLLER = "pi_sim.json"


class ConfigError(ValueError):
    pass


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


POS = {"type": "number", "exclusiveMinimum": 0}
NONNEG = {"type": "number", "minimum": 0}
POS_INT = {"type": "integer", "minimum": 1}
NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}
HIDDEN = {"type": "array", "items": POS_INT}

HYPER = _obj({"eps1": POS, "eps2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
              "lambda1": POS, "lambda2": POS, "strict": {"type": "boolean"}})
SHAPING = _obj({"threshold": POS, "safety": NONNEG, "action": NONNEG, "slew": NONNEG,
                "stability": NONNEG, "horizon": POS_INT})
BOX = _obj({"lower": NUM_LIST, "upper": NUM_LIST}, ["lower", "upper"])
TRAIN_OPTS = _obj({
    "eps_conv": POS, "inner_cap": POS_INT, "train_epochs": {"type": "integer", "minimum": 0},
    "n_random": {"type": "integer", "minimum": 0}, "batch_size": POS_INT, "lr": POS,
    "start_mode": {"enum": ["milp", "random"]}, "verify": {"type": "boolean"}, "harvest": {"type": "boolean"},
    "tighten": {"type": "boolean"}, "tol": POS, "search_node_limit": POS_INT, "search_timeout_s": POS,
    "proof_node_limit": POS_INT, "proof_timeout_s": POS, "dataset_capacity": POS_INT,
    "dataset_radius": NONNEG, "n_probe": POS_INT,
})

TRAIN = _obj({
    "n": POS_INT,
    "dt": POS,
    "gap": POS,
    "u_max": POS,
    "leak": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "region": BOX,
    "target": BOX,
    "growth_factor": {"type": "number", "exclusiveMinimum": 1},
    "hyper": HYPER,
    "shaping": SHAPING,
    "v_hidden": HIDDEN,
    "pi_hidden": HIDDEN,
    "budget": {"type": "integer", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "options": TRAIN_OPTS,
}, ["n", "region"])

VERIFY = _obj({
    "v_checkpoint": {"type": "string"},
    "pi_checkpoint": {"type": "string"},
    "n": POS_INT,
    "dt": POS,
    "gap": POS,
    "region": BOX,
    "hyper": HYPER,
    "tol": POS,
    "timeout_s": POS,
    "node_limit": POS_INT,
    "tighten": {"type": "boolean"},
    "split": {"type": "boolean"},
}, ["v_checkpoint", "pi_checkpoint", "region"])

CONTROLLER = _obj({
    "name": {"type": "string", "minLength": 1},
    "kind": {"enum": ["nn", "linear", "dmpc"]},
    "checkpoint": {"type": "string"},
    "kp": POS, "kv": POS,
    "horizon": {"type": "integer", "minimum": 2},
    "q_p": POS, "q_v": POS, "r": NONNEG, "f": NONNEG,
    "tol": POS, "max_iter": POS_INT,
    "u_max": POS,
}, ["kind"])

SCENARIO = _obj({
    "n": POS_INT,
    "dt": POS,
    "steps": POS_INT,
    "gap": {"oneOf": [POS, {"type": "array", "items": POS, "minItems": 1}]},
    "tau": {"oneOf": [POS, {"type": "array", "items": POS, "minItems": 2, "maxItems": 2}]},
    "profile": _obj({"times": NUM_LIST, "speeds": {"type": "array", "items": NONNEG, "minItems": 1}}, ["times", "speeds"]),
    "noise": _obj({"dynamics_sigma": NONNEG, "sensing_sigma": NONNEG}),
    "initial": {"enum": ["formation", "perturbed"]},
    "k_lead": POS,
})

SIMULATE = _obj({"scenario": SCENARIO, "controller": CONTROLLER, "seed": {"type": "integer", "minimum": 0}}, ["controller"])

COMPARE = _obj({
    "scenario": SCENARIO,
    "controllers": {"type": "array", "items": CONTROLLER, "minItems": 1},
    "trials": {"type": "integer", "minimum": 2},
    "seed": {"type": "integer", "minimum": 0},
}, ["controllers"])

LEVELSETS = _obj({
    "controller": CONTROLLER,
    "ep": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    "ev": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    "resolution": {"oneOf": [{"type": "integer", "minimum": 2},
                             {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 2, "maxItems": 2}]},
}, ["controller"])

SCHEMAS = {"train": TRAIN, "verify": VERIFY, "simulate": SIMULATE, "compare": COMPARE, "levelsets": LEVELSETS}


def validate(command, doc):
    """Schema-check ``doc``; raises ConfigError listing every problem."""
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def _resolve(path, base):
    p = Path(path)
    return p if p.is_absolute() or base is None else Path(base) / p


def load_checkpoint(path, base=None) -> MlpParams:
    p = _resolve(path, base)
    try:
        return load(p)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {p}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad checkpoint {p}: {exc}") from None


def shipped_controller() -> MlpParams:
    """The 32-wide controller trained for the 100-vehicle scenario."""
    from .nn import from_dict
    import json

    text = resources.files("neuroplatoon").joinpath("data", SHIPPED_CONTROLLER).read_text()
    return from_dict(json.loads(text))


def _box(doc, n, what):
    lo = np.asarray(doc["lower"], dtype=float)
    hi = np.asarray(doc["upper"], dtype=float)
    for arr in (lo, hi):
        if arr.size not in (2, 2 * n):
            raise ConfigError(f"{what} bounds need 2 or {2 * n} entries")
    if lo.size == 2:
        lo = np.tile(lo, n)
    if hi.size == 2:
        hi = np.tile(hi, n)
    return lo, hi


def train_region(doc):
    n = doc["n"]
    lo, hi = _box(doc["region"], n, "region")
    tlo, thi = _box(doc["target"], n, "target") if "target" in doc else (lo, hi)
    try:
        return Region(lo, hi, doc.get("growth_factor", 1.5), tlo, thi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _wrap(factory, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def hyper_from(doc):
    return _wrap(LyapunovHyper, **doc.get("hyper", {}))


def shaping_from(doc):
    return _wrap(ShapingWeights, **doc.get("shaping", {}))


def train_options(doc):
    return _wrap(TrainConfig, **doc.get("options", {}))


def controller_from(doc, base=None) -> ControllerSpec:
    kind = doc["kind"]
    u_max = doc.get("u_max", 3.0)
    if kind == "nn":
        net = load_checkpoint(doc["checkpoint"], base) if "checkpoint" in doc else shipped_controller()
        if net.n_in != 2 or net.n_out != 1:
            raise ConfigError("controller checkpoint must map 2 inputs to 1 output")
        return ControllerSpec("nn", net=net, u_max=u_max)
    if kind == "linear":
        gains = _wrap(LinearGains, doc.get("kp", 1.0), doc.get("kv", 2.0), u_max)
        return ControllerSpec("linear", gains=gains, u_max=u_max)
    keys = ("horizon", "q_p", "q_v", "r", "f", "tol", "max_iter")
    cfg = _wrap(DmpcConfig, u_max=u_max, **{k: doc[k] for k in keys if k in doc})
    return ControllerSpec("dmpc", dmpc=cfg, u_max=u_max)


def scenario_from(doc, controller: ControllerSpec) -> Scenario:
    doc = doc or {}
    kwargs = {}
    if "profile" in doc:
        kwargs["profile"] = _wrap(LeadProfile, tuple(doc["profile"]["times"]), tuple(doc["profile"]["speeds"]))
    if "noise" in doc:
        kwargs["noise"] = _wrap(NoiseConfig, **doc["noise"])
    if "tau" in doc:
        kwargs["tau"] = tuple(doc["tau"]) if isinstance(doc["tau"], list) else doc["tau"]
    if "gap" in doc:
        kwargs["gaps"] = doc["gap"]
    for key in ("n", "dt", "steps", "initial", "k_lead"):
        if key in doc:
            kwargs[key] = doc[key]
    kwargs.setdefault("dt", DEFAULT_DT)
    if controller.kind == "dmpc" and controller.dmpc.dt != kwargs["dt"]:
        controller.dmpc = _wrap(DmpcConfig, **{**controller.dmpc.__dict__, "dt": kwargs["dt"]})
    sc = _wrap(Scenario, controller, **kwargs)
    if np.asarray(sc.gaps).size != sc.n:
        raise ConfigError("gap list length must equal n")
    return sc
