"""Instruction grounding: a deterministic template grammar over detections
plus a wire-protocol client for a remote grounder speaking the JSON schema
(bboxes + predicates) the pipeline expects.

The builtin grammar sees ground-truth attributes (color, area, category);
semantic breadth beyond the templates lives behind the remote protocol.
"""

import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass

from .errors import (
    AmbiguousReference,
    GrammarMiss,
    SchemaError,
    TransportError,
    UnknownEntity,
    UnresolvedReference,
    ValidationError,
)
from .scene import TABLE

PREDICATE_ARITY = {"On": 2, "IsEraser": 1, "IsCleaned": 1}
MAX_DETECTIONS = 25
_NAME_MAP = {"on": "On", "iseraser": "IsEraser", "is_eraser": "IsEraser",
             "iscleaned": "IsCleaned", "is_cleaned": "IsCleaned"}
_NUMBER_WORDS = {"one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
                 "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10}
_SUPERLATIVES = {"largest": max, "biggest": max, "smallest": min, "tiniest": min}
_COLORS = {"red", "green", "blue", "yellow", "orange", "purple", "pink",
           "black", "white", "brown", "gray", "grey", "teal", "cyan"}


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple

    def __post_init__(self):
        if self.name not in PREDICATE_ARITY:
            raise ValidationError(f"unknown predicate {self.name!r}")
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) != PREDICATE_ARITY[self.name]:
            raise ValidationError(
                f"{self.name} takes {PREDICATE_ARITY[self.name]} args, got {len(self.args)}"
            )
        if len(set(self.args)) != len(self.args):
            raise ValidationError(f"{self.name} arguments must be distinct")

    def __str__(self):
        return f"{self.name}({', '.join(self.args)})"


@dataclass
class GoalSpec:
    predicates: tuple
    instruction: str = ""

    def __post_init__(self):
        preds = tuple(self.predicates)
        if not preds:
            raise ValidationError("goal must contain at least one predicate")
        if len(set(preds)) != len(preds):
            raise ValidationError("duplicate predicates in goal")
        self.predicates = preds

    def args(self):
        out = []
        for p in self.predicates:
            out.extend(p.args)
        return out


@dataclass
class Detection:
    label: str
    bbox: tuple  # (ymin, xmin, ymax, xmax), normalized 0-1000 integers

    def __post_init__(self):
        box = tuple(int(v) for v in self.bbox)
        if len(box) != 4:
            raise ValidationError(f"bbox needs 4 coordinates, got {len(box)}")
        ymin, xmin, ymax, xmax = box
        if not all(0 <= v <= 1000 for v in box):
            raise ValidationError(f"bbox {box} outside [0, 1000]")
        if ymin >= ymax or xmin >= xmax:
            raise ValidationError(f"bbox {box} is empty")
        self.bbox = box


def validate_detections(detections):
    if len(detections) > MAX_DETECTIONS:
        raise ValidationError(f"{len(detections)} detections exceed the limit of {MAX_DETECTIONS}")
    labels = [d.label for d in detections]
    if len(set(labels)) != len(labels):
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        raise ValidationError(f"duplicate detection labels {dupes}")


# --- builtin grammar ---

def _norm(text):
    text = text.lower().strip()
    text = re.sub(r"[.,!?]", "", text)
    return re.sub(r"\s+", " ", text)


def _label_key(label):
    return _norm(label).replace("_", " ")


def _forms(word):
    """Candidate singular spellings: identity, strip -s, strip -es."""
    out = {word}
    if word.endswith("s") and len(word) > 2:
        out.add(word[:-1])
    if word.endswith("es") and len(word) > 3:
        out.add(word[:-2])
    return out


def _noun_matches(noun, label, attrs):
    key = _label_key(label)
    base = re.sub(r"\d+$", "", key).strip()
    forms = _forms(noun)
    if forms & (_forms(key) | _forms(base)):
        return True
    category = _norm(attrs.get("category", "")) if attrs else ""
    return bool(category and forms & _forms(category))


class _Resolver:
    def __init__(self, detections, attributes):
        self.detections = detections
        self.attributes = attributes or {}

    def candidates(self, phrase):
        """All detections matching a noun phrase, ordered by detection id."""
        tokens = _norm(phrase).split()
        superlative = None
        if tokens and tokens[0] in _SUPERLATIVES:
            superlative = _SUPERLATIVES[tokens[0]]
            tokens = tokens[1:]
        color = None
        if tokens and tokens[0] in _COLORS:
            color = tokens[0]
            tokens = tokens[1:]
        if not tokens:
            raise UnresolvedReference(phrase)
        noun = " ".join(tokens)
        out = []
        for i, det in enumerate(self.detections):
            attrs = self.attributes.get(det.label, {})
            if not _noun_matches(noun, det.label, attrs):
                continue
            if color is not None:
                det_color = _norm(attrs.get("color", ""))
                if det_color != color and color not in _label_key(det.label).split():
                    continue
            out.append((i, det))
        if superlative is not None and out:
            areas = [(self.attributes.get(d.label, {}).get("area", 0.0), i) for i, d in out]
            pick = superlative(range(len(out)), key=lambda k: (areas[k][0], -areas[k][1]))
            out = [out[pick]]
        return out

    def single(self, phrase):
        if _norm(phrase) == TABLE:
            return TABLE
        cands = self.candidates(phrase)
        if not cands:
            raise UnresolvedReference(phrase)
        if len(cands) > 1:
            raise AmbiguousReference(phrase, [d.label for _, d in cands])
        return cands[0][1].label

    def many(self, phrase, at_least=1):
        cands = self.candidates(phrase)
        if len(cands) < at_least:
            raise UnresolvedReference(phrase)
        return [d.label for _, d in cands]


_RE_SORT = re.compile(
    r"^sort (?:the )?(?P<x>.+?) by color (?:onto|on|into|in) (?:the )?matching (?P<y>.+)$"
)
_RE_SORT_ALT = re.compile(
    r"^sort (?:the )?(?P<x>.+?) (?:onto|on|into|in) (?:the )?matching(?: color)? (?P<y>.+)$"
)
_RE_COUNT = re.compile(
    r"^(?:put|place) (?P<n>\d+|one|two|three|four|five|six|seven|eight|nine|ten) "
    r"(?P<x>.+?) (?:on|onto|in|into) (?:the )?(?P<y>.+)$"
)
_RE_ALL = re.compile(
    r"^(?:put|place) all (?:of )?(?:the )?(?P<x>.+?) (?:on|onto|in|into) (?:the )?(?P<y>.+)$"
)
_RE_CLEAN = re.compile(r"^(?:erase|clean|wipe) (?:the )?(?P<s>.+)$")
_RE_SINGLE = re.compile(
    r"^(?:put|place) (?:the )?(?P<x>.+?) (?:on|onto|in|into) (?:the )?(?P<y>.+)$"
)


def parse_instruction(instruction, detections, attributes=None):
    """Ground an instruction into a conjunction of predicates.

    Pure function over (instruction, detections, attributes); 'in' and 'on'
    both ground to On. Raises UnresolvedReference / AmbiguousReference /
    GrammarMiss.
    """
    if not detections:
        raise UnresolvedReference("(no detections)")
    validate_detections(detections)
    text = _norm(instruction)
    resolver = _Resolver(detections, attributes)

    m = _RE_SORT.match(text) or _RE_SORT_ALT.match(text)
    if m:
        return _ground_sort(resolver, m["x"], m["y"], instruction)
    m = _RE_COUNT.match(text)
    if m:
        n = int(m["n"]) if m["n"].isdigit() else _NUMBER_WORDS[m["n"]]
        movers = resolver.many(m["x"], at_least=n)[:n]
        target = resolver.single(m["y"])
        return GoalSpec(tuple(Predicate("On", (obj, target)) for obj in movers), instruction)
    m = _RE_ALL.match(text)
    if m:
        movers = resolver.many(m["x"])
        target = resolver.single(m["y"])
        return GoalSpec(tuple(Predicate("On", (obj, target)) for obj in movers), instruction)
    m = _RE_CLEAN.match(text)
    if m:
        surface = resolver.single(m["s"])
        erasers = [
            d.label for d in detections
            if (attributes or {}).get(d.label, {}).get("is_eraser", False)
        ]
        if not erasers:
            raise UnresolvedReference("eraser")
        return GoalSpec((Predicate("IsCleaned", (surface,)),), instruction)
    m = _RE_SINGLE.match(text)
    if m:
        mover = resolver.single(m["x"])
        target = resolver.single(m["y"])
        return GoalSpec((Predicate("On", (mover, target)),), instruction)
    raise GrammarMiss(instruction)


def _ground_sort(resolver, x_phrase, y_phrase, instruction):
    movers = resolver.many(x_phrase)
    targets = resolver.many(y_phrase)
    preds = []
    for mover in movers:
        color = _norm(resolver.attributes.get(mover, {}).get("color", ""))
        match = None
        for target in targets:
            t_color = _norm(resolver.attributes.get(target, {}).get("color", ""))
            if t_color == color and color:
                match = target
                break
        if match is None:
            raise UnresolvedReference(f"{color or 'uncolored'} {y_phrase}")
        preds.append(Predicate("On", (mover, match)))
    return GoalSpec(tuple(preds), instruction)


# --- remote grounder wire protocol ---

@dataclass
class RemoteEndpoint:
    url: str
    timeout: float = 10.0


def remote_ground(instruction, payload=None, endpoint=None):
    """One blocking POST to the remote grounder; parse the schema strictly.

    Response must be a bare JSON object (no code fencing) with "bboxes"
    (each {"box_2d": [ymin, xmin, ymax, xmax], "label": ...}) and
    "predicates" (each {"name": ..., "args": [...]}). Predicates may only
    reference detected labels. Callers own any retry policy.
    """
    if endpoint is None:
        raise TransportError("no endpoint configured")
    body = {"instruction": instruction}
    if payload is not None:
        body["payload"] = payload
    data = json.dumps(body).encode("utf-8")
    req = urllib.request.Request(
        endpoint.url, data=data, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            raw = resp.read()
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        raise TransportError(f"request to {endpoint.url} failed: {exc}") from exc
    return parse_grounder_response(raw, instruction)


def parse_grounder_response(raw, instruction=""):
    """Validate a grounder response body into (detections, GoalSpec)."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("$", "response must be a JSON object")
    if "bboxes" not in doc or not isinstance(doc["bboxes"], list):
        raise SchemaError("$.bboxes", "missing or not a list")
    if "predicates" not in doc or not isinstance(doc["predicates"], list):
        raise SchemaError("$.predicates", "missing or not a list")

    detections = []
    for i, entry in enumerate(doc["bboxes"]):
        path = f"$.bboxes[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "entry must be an object")
        if "box_2d" not in entry or "label" not in entry:
            raise SchemaError(path, "needs box_2d and label")
        box = entry["box_2d"]
        if not isinstance(box, list) or len(box) != 4:
            raise SchemaError(f"{path}.box_2d", "needs 4 coordinates")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
            raise SchemaError(f"{path}.box_2d", "coordinates must be integers")
        if not isinstance(entry["label"], str):
            raise SchemaError(f"{path}.label", "label must be a string")
        detections.append(Detection(entry["label"], tuple(box)))
    validate_detections(detections)
    labels = {d.label for d in detections}

    preds = []
    for i, entry in enumerate(doc["predicates"]):
        path = f"$.predicates[{i}]"
        if not isinstance(entry, dict) or "name" not in entry or "args" not in entry:
            raise SchemaError(path, "needs name and args")
        name = _NAME_MAP.get(str(entry["name"]).lower())
        if name is None:
            raise ValidationError(f"unsupported predicate {entry['name']!r}")
        args = entry["args"]
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise SchemaError(f"{path}.args", "args must be a list of strings")
        for arg in args:
            if arg not in labels:
                raise ValidationError(f"predicate references undetected label {arg!r}")
        preds.append(Predicate(name, tuple(args)))
    goal = GoalSpec(tuple(preds), instruction)
    return detections, goal


# --- goal evaluation against ground truth ---

def goal_holds(goal, scene):
    """Evaluate each predicate on the true scene; returns (all_true, detail).

    On(a, b): a's footprint centroid strictly inside b's top-face rectangle
    and a's base within [top(b) - 5 mm, top(b) + 2 cm]. IsCleaned(s): wiped
    coverage >= 0.99 of the marked region. Raises UnknownEntity.
    """
    detail = {}
    names = set(scene.names()) | {TABLE}
    for pred in goal.predicates:
        for arg in pred.args:
            if arg not in names:
                raise UnknownEntity(f"goal references unknown entity {arg!r}")
        if pred.name == "On":
            a, b = pred.args
            obj = scene.objects[scene.index_of(a)]
            region = scene.top_obb(b)
            top = scene.top_height(b)
            centroid = obj.world_centroid()
            inside = bool(region.contains(centroid[None, :])[0])
            z_ok = top - 0.005 <= obj.z_base <= top + 0.02
            detail[pred] = inside and z_ok
        elif pred.name == "IsEraser":
            obj = scene.objects[scene.index_of(pred.args[0])]
            detail[pred] = bool(obj.is_eraser)
        else:  # IsCleaned
            name = pred.args[0]
            if name == TABLE:
                raise UnknownEntity("the table has no marked region")
            obj = scene.objects[scene.index_of(name)]
            if obj.marked_region is None:
                raise UnknownEntity(f"{name!r} has no marked region")
            grid = scene.wipe_state.get(name)
            coverage = grid.coverage() if grid is not None else 0.0
            detail[pred] = coverage >= 0.99
    return all(detail.values()), detail
