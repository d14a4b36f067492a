"""Information-model registry and payload codec.

Gives the fleet M2M semantic interoperability: a vocabulary of thing
classes arranged in a single-parent taxonomy, typed-scalar payload
encoding (``n:``/``s:``/``b:``/``t:`` prefixes), payload validation
against class definitions, and tag/link resolution across instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .reading import ChannelKey, Reading, is_token, ID_RE
from .timeutil import BadTimestamp, format_ts, parse_ts

DATATYPES = {"number", "integer", "string", "boolean", "timestamp", "enum"}
INTERACTION_KINDS = {"read", "write", "invoke", "event"}
RESERVED_KEYS = {"id", "DateTime", "seq"}
# Relations any model may use out of the box; models can add their own.
DEFAULT_RELATIONS = {"part_of", "regulated_by", "composed_of", "contains"}

SCALAR_PREFIXES = {"n", "s", "b", "t"}


def number_text(value: float) -> str:
    """Canonical decimal text for a numeric value.

    Integral values drop the trailing ``.0`` so that 72 and 72.0 compare
    equal after encoding; everything else uses the shortest repr that
    round-trips through float exactly.
    """
    v = float(value)
    if v.is_integer() and abs(v) < 1e15:
        return repr(int(v))
    return repr(v)


class ModelError(Exception):
    """Base for information-model violations."""


class DuplicateClass(ModelError):
    pass


class UnknownParent(ModelError):
    pass


class TaxonomyCycle(ModelError):
    pass


class PropertyConflict(ModelError):
    pass


class UnknownClass(ModelError):
    pass


class UnknownInstance(ModelError):
    pass


class UnknownRelation(ModelError):
    pass


class MalformedText(ModelError):
    """Payload text is not decodable at all."""


class UnknownPrefix(ModelError):
    """Typed scalar carries a prefix outside {n, s, b, t}."""


@dataclass(frozen=True, slots=True)
class TypedScalar:
    """A value with an explicit wire type: kind prefix + canonical text."""

    kind: str  # n | s | b | t
    text: str

    def __post_init__(self):
        if self.kind not in SCALAR_PREFIXES:
            raise UnknownPrefix(f"unknown scalar prefix {self.kind!r}")

    def encode(self) -> str:
        return f"{self.kind}:{self.text}"

    @classmethod
    def number(cls, value: float) -> "TypedScalar":
        return cls("n", number_text(value))

    @classmethod
    def string(cls, value: str) -> "TypedScalar":
        return cls("s", value)

    @classmethod
    def boolean(cls, value: bool) -> "TypedScalar":
        return cls("b", "true" if value else "false")

    @classmethod
    def timestamp(cls, epoch: float) -> "TypedScalar":
        return cls("t", format_ts(epoch))

    def as_python(self):
        if self.kind == "n":
            return float(self.text)
        if self.kind == "b":
            return self.text == "true"
        if self.kind == "t":
            return parse_ts(self.text)
        return self.text


def parse_scalar(text: str) -> TypedScalar:
    """Parse a wire value. ``x:...`` with an unknown single-letter prefix
    is an error; anything without a prefix shape is a bare string."""
    if len(text) >= 2 and text[1] == ":" and text[0].isalpha():
        prefix, body = text[0], text[2:]
        if prefix not in SCALAR_PREFIXES:
            raise UnknownPrefix(f"unknown scalar prefix {prefix!r} in {text!r}")
        if prefix == "n":
            try:
                float(body)
            except ValueError:
                raise MalformedText(f"bad number text: {body!r}") from None
        if prefix == "t":
            # tolerate the legacy "...Z UTC" form on input
            if body.endswith(" UTC"):
                body = body[:-4]
            parse_ts(body)  # raises BadTimestamp
        return TypedScalar(prefix, body)
    return TypedScalar("s", text)


@dataclass(slots=True)
class PropertyDef:
    name: str
    datatype: str
    unit: str = ""
    writable: bool = False
    min: float | None = None
    max: float | None = None
    required: bool = False
    enum_values: tuple[str, ...] = ()

    def __post_init__(self):
        if not is_token(self.name):
            raise ModelError(f"property name is not a vocabulary token: {self.name!r}")
        if self.datatype not in DATATYPES:
            raise ModelError(f"unknown datatype {self.datatype!r}")
        if (self.min is not None or self.max is not None) and self.datatype not in (
            "number",
            "integer",
        ):
            raise ModelError(f"bounds only apply to numeric properties: {self.name}")
        if self.min is not None and self.max is not None and self.min > self.max:
            raise ModelError(f"min > max on {self.name}")
        if self.datatype == "enum" and not self.enum_values:
            raise ModelError(f"enum property {self.name} needs allowed values")


@dataclass(slots=True)
class InteractionDef:
    name: str
    kind: str
    target_property: str | None = None

    def __post_init__(self):
        if not is_token(self.name):
            raise ModelError(f"interaction name is not a vocabulary token: {self.name!r}")
        if self.kind not in INTERACTION_KINDS:
            raise ModelError(f"unknown interaction kind {self.kind!r}")


@dataclass(slots=True)
class LinkDef:
    relation: str
    target: str  # instance id or class name
    cardinality: str = "one"  # one | many

    def __post_init__(self):
        if not is_token(self.relation):
            raise ModelError(f"relation is not a vocabulary token: {self.relation!r}")
        if self.cardinality not in ("one", "many"):
            raise ModelError(f"bad cardinality {self.cardinality!r}")


@dataclass(slots=True)
class ObjectClass:
    name: str
    parent: str | None = None
    properties: list[PropertyDef] = field(default_factory=list)
    interactions: list[InteractionDef] = field(default_factory=list)
    links: list[LinkDef] = field(default_factory=list)

    def __post_init__(self):
        if not is_token(self.name):
            raise ModelError(f"class name is not a vocabulary token: {self.name!r}")
        seen = set()
        for p in self.properties:
            if p.name in seen:
                raise PropertyConflict(f"duplicate property {p.name} in {self.name}")
            seen.add(p.name)
        by_name = {p.name: p for p in self.properties}
        for ia in self.interactions:
            if ia.kind == "write" and ia.target_property:
                tgt = by_name.get(ia.target_property)
                if tgt is not None and not tgt.writable:
                    raise ModelError(
                        f"write interaction {ia.name} targets read-only "
                        f"property {ia.target_property}"
                    )


@dataclass(slots=True)
class ThingInstance:
    instance_id: str
    class_name: str
    tags: dict[str, str] = field(default_factory=dict)
    links: list[LinkDef] = field(default_factory=list)

    def __post_init__(self):
        if not ID_RE.match(self.instance_id):
            raise ModelError(f"bad instance id: {self.instance_id!r}")
        for key in self.tags:
            if not is_token(key):
                raise ModelError(f"tag key is not a vocabulary token: {key!r}")


@dataclass(slots=True)
class Violation:
    kind: str  # type_mismatch | out_of_range | missing_required | unknown_key | bad_enum
    key: str
    detail: str = ""


@dataclass(slots=True)
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


class ModelRegistry:
    """Class vocabulary, taxonomy, thing instances, and relation set.

    Read-mostly: callers may read concurrently; registration is expected
    to be serialized by the owner.
    """

    def __init__(self):
        self._classes: dict[str, ObjectClass] = {}
        self._instances: dict[str, ThingInstance] = {}
        self._relations: set[str] = set(DEFAULT_RELATIONS)

    # -- vocabulary ------------------------------------------------------

    def register_relation(self, relation: str) -> None:
        if not is_token(relation):
            raise ModelError(f"relation is not a vocabulary token: {relation!r}")
        self._relations.add(relation)

    def register_class(self, cls: ObjectClass) -> str:
        if cls.name in self._classes:
            raise DuplicateClass(cls.name)
        if cls.parent == cls.name:
            raise TaxonomyCycle(f"{cls.name} is its own parent")
        if cls.parent is not None:
            if cls.parent not in self._classes:
                raise UnknownParent(cls.parent)
            # walk the ancestor chain; registry classes are acyclic by
            # induction, but guard against future mutation anyway
            seen = {cls.name}
            anc = cls.parent
            while anc is not None:
                if anc in seen:
                    raise TaxonomyCycle(f"cycle through {anc}")
                seen.add(anc)
                anc = self._classes[anc].parent
            inherited = self.effective_properties(cls.parent)
            for p in cls.properties:
                old = inherited.get(p.name)
                if old is not None and old.datatype != p.datatype:
                    raise PropertyConflict(
                        f"{cls.name}.{p.name} redefines datatype "
                        f"{old.datatype} -> {p.datatype}"
                    )
        for link in cls.links:
            if link.relation not in self._relations:
                raise UnknownRelation(link.relation)
        self._classes[cls.name] = cls
        return cls.name

    def get_class(self, name: str) -> ObjectClass:
        try:
            return self._classes[name]
        except KeyError:
            raise UnknownClass(name) from None

    def has_class(self, name: str) -> bool:
        return name in self._classes

    def effective_properties(self, name: str) -> dict[str, PropertyDef]:
        """Flattened property set: union over the ancestor chain, child
        definitions shadowing parent ones of the same name."""
        chain = []
        cur: str | None = name
        while cur is not None:
            cls = self.get_class(cur)
            chain.append(cls)
            cur = cls.parent
        merged: dict[str, PropertyDef] = {}
        for cls in reversed(chain):  # root first, child overrides
            for p in cls.properties:
                merged[p.name] = p
        return merged

    # -- instances and links ---------------------------------------------

    def register_instance(self, inst: ThingInstance) -> str:
        if inst.instance_id in self._instances:
            raise ModelError(f"duplicate instance id {inst.instance_id}")
        self.get_class(inst.class_name)  # raises UnknownClass
        for link in inst.links:
            if link.relation not in self._relations:
                raise UnknownRelation(link.relation)
        self._instances[inst.instance_id] = inst
        return inst.instance_id

    def get_instance(self, instance_id: str) -> ThingInstance:
        try:
            return self._instances[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def resolve_links(
        self, instance_id: str, relation: str, transitive: bool = False
    ) -> list[str]:
        """Targets reachable from the instance via ``relation`` edges.

        One hop by default; breadth-first closure when transitive. Output
        is deduplicated and sorted lexicographically.
        """
        self.get_instance(instance_id)
        if relation not in self._relations:
            raise UnknownRelation(relation)
        found: set[str] = set()
        frontier = [instance_id]
        visited = {instance_id}
        while frontier:
            nxt: list[str] = []
            for iid in frontier:
                inst = self._instances.get(iid)
                if inst is None:
                    continue  # link to a class name or external id: terminal
                for link in inst.links:
                    if link.relation != relation:
                        continue
                    found.add(link.target)
                    if transitive and link.target not in visited:
                        visited.add(link.target)
                        nxt.append(link.target)
            if not transitive:
                break
            frontier = nxt
        return sorted(found)

    # -- model files -----------------------------------------------------

    def load_model_file(self, path: Path) -> str:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return self.register_class(class_from_dict(doc))

    def load_model_dir(self, path: Path) -> list[str]:
        """Load every ``*.json`` class file, lexicographic filename order
        (by convention parents sort before children)."""
        names = []
        for f in sorted(Path(path).glob("*.json")):
            names.append(self.load_model_file(f))
        return names

    # -- validation ------------------------------------------------------

    def validate_payload(
        self, class_name: str, payload: dict[str, TypedScalar]
    ) -> ValidationReport:
        props = self.effective_properties(class_name)  # raises UnknownClass
        report = ValidationReport()
        for key, scalar in payload.items():
            if key in RESERVED_KEYS:
                continue
            prop = props.get(key)
            if prop is None:
                report.violations.append(Violation("unknown_key", key))
                continue
            report.violations.extend(_check_value(prop, scalar))
        for prop in props.values():
            if prop.required and prop.name not in payload:
                report.violations.append(Violation("missing_required", prop.name))
        return report


def _check_value(prop: PropertyDef, scalar: TypedScalar) -> list[Violation]:
    expected = {
        "number": "n",
        "integer": "n",
        "string": "s",
        "boolean": "b",
        "timestamp": "t",
        "enum": "s",
    }[prop.datatype]
    if scalar.kind != expected:
        return [Violation("type_mismatch", prop.name, f"expected {prop.datatype}")]
    out: list[Violation] = []
    if prop.datatype in ("number", "integer"):
        v = float(scalar.text)
        if prop.datatype == "integer" and not (math.isfinite(v) and v.is_integer()):
            out.append(Violation("type_mismatch", prop.name, "not an integer"))
        if prop.min is not None and v < prop.min:
            out.append(Violation("out_of_range", prop.name, f"{v} < min {prop.min}"))
        if prop.max is not None and v > prop.max:
            out.append(Violation("out_of_range", prop.name, f"{v} > max {prop.max}"))
    elif prop.datatype == "enum" and scalar.text not in prop.enum_values:
        out.append(Violation("bad_enum", prop.name, scalar.text))
    return out


def class_from_dict(doc: dict) -> ObjectClass:
    """Build an ObjectClass from its model-file JSON form."""
    props = [
        PropertyDef(
            name=p["name"],
            datatype=p["datatype"],
            unit=p.get("unit", ""),
            writable=p.get("writable", False),
            min=p.get("min"),
            max=p.get("max"),
            required=p.get("required", False),
            enum_values=tuple(p.get("enum_values", ())),
        )
        for p in doc.get("properties", [])
    ]
    inters = [
        InteractionDef(i["name"], i["kind"], i.get("target_property"))
        for i in doc.get("interactions", [])
    ]
    links = [
        LinkDef(l["relation"], l["target"], l.get("cardinality", "one"))
        for l in doc.get("links", [])
    ]
    return ObjectClass(
        name=doc["name"],
        parent=doc.get("parent"),
        properties=props,
        interactions=inters,
        links=links,
    )


# -- report codec --------------------------------------------------------


def _encode_value(value) -> str:
    if isinstance(value, TypedScalar):
        return value.encode()
    if isinstance(value, bool):
        return TypedScalar.boolean(value).encode()
    if isinstance(value, (int, float)):
        return f"n:{number_text(value)}"
    return f"s:{value}"


def encode_report(node_id: str, readings: list[Reading]) -> str:
    """Encode readings as one compact JSON object per line.

    Key order is fixed: id, channel value, unit, DateTime, seq (when the
    reading carries one), then tags sorted by key. Tag values are
    string-typed (``s:`` prefix); the unit travels as a bare string.
    """
    lines = []
    for r in readings:
        if r.channel.node_id != node_id:
            raise ValueError(
                f"reading on {r.channel} does not belong to node {node_id}"
            )
        obj: dict[str, object] = {"id": node_id}
        obj[r.channel.sensor_name] = _encode_value(r.value)
        obj["unit"] = r.unit
        obj["DateTime"] = f"t:{format_ts(r.ts)}"
        if r.seq is not None:
            obj["seq"] = r.seq
        for k in sorted(r.tags):
            obj[k] = f"s:{r.tags[k]}"
        lines.append(json.dumps(obj, separators=(",", ":"), ensure_ascii=False))
    return "\n".join(lines)


def decode_report(text: str) -> tuple[str, list[Reading]]:
    """Decode a report payload back into (node_id, readings).

    Inverse of encode_report for everything it produces; additionally
    accepts the legacy ``t:...Z UTC`` timestamp form by stripping the
    suffix.
    """
    readings: list[Reading] = []
    node_id: str | None = None
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedText(f"bad JSON: {exc}") from None
        if not isinstance(obj, dict) or "id" not in obj:
            raise MalformedText("report object missing 'id'")
        if node_id is None:
            node_id = str(obj["id"])
        elif obj["id"] != node_id:
            raise MalformedText("mixed node ids in one report")
        if "DateTime" not in obj:
            raise MalformedText("report object missing 'DateTime'")
        ts_scalar = parse_scalar(str(obj["DateTime"]))
        if ts_scalar.kind != "t":
            raise BadTimestamp(f"DateTime is not t-typed: {obj['DateTime']!r}")
        ts = parse_ts(ts_scalar.text)

        unit = str(obj.get("unit", ""))
        seq = obj.get("seq")
        if seq is not None and not isinstance(seq, int):
            raise MalformedText(f"seq is not an integer: {seq!r}")

        value_key: str | None = None
        value = None
        tags: dict[str, str] = {}
        for key, raw in obj.items():
            if key in RESERVED_KEYS or key == "unit":
                continue
            scalar = parse_scalar(str(raw))
            if value_key is None:
                value_key = key
                value = _scalar_to_value(scalar)
            else:
                tags[key] = scalar.text
        if value_key is None:
            raise MalformedText("report object carries no channel value")
        readings.append(
            Reading(
                channel=ChannelKey(node_id, value_key),
                value=value,
                unit=unit,
                ts=ts,
                seq=seq,
                tags=tags,
            )
        )
    if node_id is None:
        raise MalformedText("empty report")
    return node_id, readings


def _scalar_to_value(scalar: TypedScalar):
    if scalar.kind == "n":
        return float(scalar.text)
    if scalar.kind == "b":
        return scalar.text == "true"
    if scalar.kind == "t":
        return scalar  # keep timestamps typed
    return scalar.text


def payload_to_scalars(text_line: str) -> dict[str, TypedScalar]:
    """Decode one report object into the key -> TypedScalar map that
    validate_payload consumes."""
    try:
        obj = json.loads(text_line)
    except json.JSONDecodeError as exc:
        raise MalformedText(f"bad JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedText("payload is not a JSON object")
    out: dict[str, TypedScalar] = {}
    for key, raw in obj.items():
        if key == "seq" and isinstance(raw, int):
            out[key] = TypedScalar("n", repr(raw))
        else:
            out[key] = parse_scalar(str(raw))
    return out
