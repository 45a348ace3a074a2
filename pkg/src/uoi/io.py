"""Newline-delimited record files and key = value simulation configs.

Detection records look like::

    {"image_id": 3, "class_id": 1, "score": 0.92, "box": [x1, y1, x2, y2], "proposal": [...]}

``proposal`` is optional.  Ground-truth records carry ``image_id``,
``instance_id``, ``class_id`` and ``box``.  Floats are written with Python's
shortest round-trip repr, so write-then-read reproduces every value exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import fields
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

from .boxes import Box, InvalidBoxError
from .evaluation import GroundTruthBox
from .grouping import BoxKey, Detection, PostprocessConfig
from .simulator import Pipeline, RegressorMode, SimConfig, validate


class FormatError(ValueError):
    """A record file or config file that does not parse; the message names the line."""


# ---------------------------------------------------------------------------
# records

def _where(source: str, lineno: int) -> str:
    return f"{source}:{lineno}"


def _int_field(rec: dict, key: str, where: str) -> int:
    if key not in rec:
        raise FormatError(f"{where}: missing field {key!r}")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"{where}: {key} must be an integer, got {v!r}")
    return v


def _box_field(rec: dict, key: str, where: str) -> Box:
    if key not in rec:
        raise FormatError(f"{where}: missing field {key!r}")
    v = rec[key]
    if (not isinstance(v, list) or len(v) != 4
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
        raise FormatError(f"{where}: {key} must be a list of 4 numbers, got {v!r}")
    try:
        return Box.from_seq(v)
    except InvalidBoxError as e:
        raise FormatError(f"{where}: {key}: {e}") from None


def _records(lines: Iterable[str], source: str):
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = _where(source, lineno)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{where}: not valid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(f"{where}: expected an object, got {type(rec).__name__}")
        yield where, rec


def parse_detections(lines: Iterable[str], source: str = "<detections>") -> list[Detection]:
    out = []
    for where, rec in _records(lines, source):
        image_id = _int_field(rec, "image_id", where)
        class_id = _int_field(rec, "class_id", where)
        if class_id < 0:
            raise FormatError(f"{where}: class_id must be >= 0, got {class_id}")
        score = rec.get("score")
        if (isinstance(score, bool) or not isinstance(score, (int, float))
                or not math.isfinite(score) or not 0.0 <= score <= 1.0):
            raise FormatError(f"{where}: score must be a number in [0, 1], got {score!r}")
        box = _box_field(rec, "box", where)
        proposal = _box_field(rec, "proposal", where) if "proposal" in rec else None
        out.append(Detection(box, float(score), class_id, image_id, proposal))
    return out


def parse_ground_truth(lines: Iterable[str], source: str = "<ground truth>") -> list[GroundTruthBox]:
    out = []
    seen: dict[tuple[int, int], str] = {}
    for where, rec in _records(lines, source):
        image_id = _int_field(rec, "image_id", where)
        instance_id = _int_field(rec, "instance_id", where)
        class_id = _int_field(rec, "class_id", where)
        if class_id < 0:
            raise FormatError(f"{where}: class_id must be >= 0, got {class_id}")
        key = (image_id, instance_id)
        if key in seen:
            raise FormatError(f"{where}: duplicate (image_id, instance_id) {key}, "
                              f"first seen at {seen[key]}")
        seen[key] = where
        out.append(GroundTruthBox(_box_field(rec, "box", where), class_id, image_id, instance_id))
    return out


def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from None


def read_detections(path: str | Path) -> list[Detection]:
    return parse_detections(_read_lines(path), str(path))


def read_ground_truth(path: str | Path) -> list[GroundTruthBox]:
    return parse_ground_truth(_read_lines(path), str(path))


def _box_list(b: Box) -> list[float]:
    return [float(c) for c in b.as_tuple()]


def detection_record(d: Detection) -> dict:
    rec = {"image_id": d.image_id, "class_id": d.class_id, "score": float(d.score),
           "box": _box_list(d.box)}
    if d.proposal is not None:
        rec["proposal"] = _box_list(d.proposal)
    return rec


def ground_truth_record(g: GroundTruthBox) -> dict:
    return {"image_id": g.image_id, "instance_id": g.instance_id, "class_id": g.class_id,
            "box": _box_list(g.box)}


def format_detections(dets: Iterable[Detection]) -> str:
    return "".join(json.dumps(detection_record(d)) + "\n" for d in dets)


def format_ground_truth(gts: Iterable[GroundTruthBox]) -> str:
    return "".join(json.dumps(ground_truth_record(g)) + "\n" for g in gts)


def write_detections(dets: Iterable[Detection], out: str | Path | TextIO) -> None:
    _write(format_detections(dets), out)


def write_ground_truth(gts: Iterable[GroundTruthBox], out: str | Path | TextIO) -> None:
    _write(format_ground_truth(gts), out)


def _write(text: str, out) -> None:
    if hasattr(out, "write"):
        out.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# config files

def _pair(cast: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.replace(":", ",").split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return cast(parts[0]), cast(parts[1])
    return parse


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _enum(cls) -> Callable[[str], object]:
    def parse(text: str):
        try:
            return cls(text.strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"expected one of {choices}, got {text!r}") from None
    return parse


SIM_KEYS: dict[str, Callable[[str], object]] = {
    "rng_seed": int,
    "n_scenes": int,
    "objects_per_scene": _pair(int),
    "image_size": _pair(int),
    "object_size": _pair(float),
    "proposals_per_object": _pair(int),
    "proposal_iou_band": _pair(float),
    "regressor_mode": _enum(RegressorMode),
    "sigma0": float,
    "kappa": float,
    "classifier_accuracy": float,
    "n_classes": int,
    "score_noise": float,
    "refine_strength": float,
    "pipeline": _enum(Pipeline),
}

POSTPROCESS_KEYS: dict[str, Callable[[str], object]] = {
    "k": float,
    "m": int,
    "score_floor": float,
    "per_class": _bool,
    "nms_key": _enum(BoxKey),
}

CONFIG_KEYS = sorted(SIM_KEYS) + sorted(POSTPROCESS_KEYS)

assert set(SIM_KEYS) == {f.name for f in fields(SimConfig)} - {"postprocess"}
assert set(POSTPROCESS_KEYS) == {f.name for f in fields(PostprocessConfig)} - {"refiner"}


def parse_assignments(items: Iterable[tuple[str, str, str]]) -> tuple[dict, list[str]]:
    """Parse ``(where, key, raw value)`` triples into typed values plus error messages."""
    values, errors = {}, []
    for where, key, raw in items:
        parser = SIM_KEYS.get(key) or POSTPROCESS_KEYS.get(key)
        if parser is None:
            errors.append(f"{where}: unknown key {key!r}")
            continue
        try:
            values[key] = parser(raw)
        except ValueError as e:
            errors.append(f"{where}: {key}: {e}")
    return values, errors


def _config_lines(text: str, source: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = _where(source, lineno)
        if "=" not in line:
            yield where, None, line
            continue
        key, raw = line.split("=", 1)
        yield where, key.strip(), raw.strip()


def split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise FormatError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), raw.strip()


def build_config(values: dict, base: SimConfig | None = None,
                 errors: Sequence[str] = ()) -> SimConfig:
    """Apply typed ``values`` on top of ``base``; every schema violation is reported at once.

    ``errors`` carries problems found earlier (parse failures) so they are listed together.
    """
    base = base or SimConfig()
    sim = {k: v for k, v in values.items() if k in SIM_KEYS}
    post = {k: v for k, v in values.items() if k in POSTPROCESS_KEYS}
    merged = {f.name: getattr(base, f.name) for f in fields(SimConfig)}
    merged.update(sim)
    pp = {f.name: getattr(base.postprocess, f.name) for f in fields(PostprocessConfig)}
    pp.update(post)
    pp_errors = _postprocess_errors(pp)
    errors = list(errors) + pp_errors
    if not pp_errors:
        merged["postprocess"] = PostprocessConfig(**pp)
    # build without running __post_init__ so every problem can be listed together
    cfg = object.__new__(SimConfig)
    for name, v in merged.items():
        object.__setattr__(cfg, name, v)
    errors += validate(cfg)
    if errors:
        raise FormatError("invalid config:\n  " + "\n  ".join(errors))
    return SimConfig(**merged)


def _postprocess_errors(p: dict) -> list[str]:
    errors = []
    if not 0.0 < p["k"] < 1.0:
        errors.append(f"k: must lie in (0, 1), got {p['k']}")
    if p["m"] < 1:
        errors.append(f"m: must be >= 1, got {p['m']}")
    if not 0.0 <= p["score_floor"] <= 1.0:
        errors.append(f"score_floor: must lie in [0, 1], got {p['score_floor']}")
    return errors


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                seed: int | None = None) -> SimConfig:
    """Read a key = value config file, apply ``key=value`` overrides and the seed.

    Unknown keys, unparsable values and invalid field combinations are all
    collected and raised together as one :class:`FormatError`.
    """
    items = []
    if path is not None:
        text = "\n".join(_read_lines(path))
        items.extend(_config_lines(text, str(path)))
    for i, o in enumerate(overrides, 1):
        if "=" not in o:
            items.append((f"--set #{i}", None, o))
            continue
        key, raw = split_override(o)
        items.append((f"--set #{i}", key, raw))
    errors = [f"{where}: expected key = value, got {raw!r}"
              for where, key, raw in items if key is None]
    values, parse_errors = parse_assignments([t for t in items if t[1] is not None])
    errors += parse_errors
    if seed is not None:
        values["rng_seed"] = seed
    return build_config(values, errors=errors)


def format_config(cfg: SimConfig) -> str:
    """Render ``cfg`` in the config-file syntax accepted by :func:`load_config`."""
    lines = []
    for key in SIM_KEYS:
        lines.append(f"{key} = {_render(getattr(cfg, key))}")
    for key in POSTPROCESS_KEYS:
        lines.append(f"{key} = {_render(getattr(cfg.postprocess, key))}")
    return "\n".join(lines) + "\n"


def _render(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)
