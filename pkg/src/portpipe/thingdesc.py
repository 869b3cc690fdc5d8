"""W3C WoT Thing Descriptions for the pipeline services."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

TD_CONTEXT = "https://www.w3.org/2019/wot/td/v1"
ID_PREFIX = "urn:dev:smartports:"
TD_MEDIA_TYPE = "application/td+json"
BASIC_SECURITY = {"basic_sc": {"scheme": "basic", "in": "header"}}

REQUIRED_FIELDS = ("@context", "id", "title", "securityDefinitions", "security", "actions")


class DuplicateAction(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpec:
    name: str
    title: str
    description: str
    path: str
    input: dict = field(default_factory=lambda: {"type": "object", "properties": {}})
    output: Optional[dict] = None


@dataclass(frozen=True)
class PropertySpec:
    name: str
    title: str
    description: str
    path: str
    type: str = "integer"


@dataclass(frozen=True)
class ServiceDescriptor:
    name: str
    actions: tuple[ActionSpec, ...] = ()
    properties: tuple[PropertySpec, ...] = ()


@dataclass
class ThingDescription:
    id: str
    title: str
    actions: dict[str, dict] = field(default_factory=dict)
    properties: dict[str, dict] = field(default_factory=dict)
    security_definitions: dict = field(default_factory=lambda: json.loads(json.dumps(BASIC_SECURITY)))
    security: list[str] = field(default_factory=lambda: ["basic_sc"])
    context: str = TD_CONTEXT

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "@context": self.context,
            "id": self.id,
            "title": self.title,
            "securityDefinitions": self.security_definitions,
            "security": self.security,
        }
        if self.properties:
            doc["properties"] = self.properties
        doc["actions"] = self.actions
        return doc

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), indent=2).encode()

    @classmethod
    def from_dict(cls, doc: dict) -> "ThingDescription":
        missing = [k for k in REQUIRED_FIELDS if k not in doc]
        if missing:
            raise ValueError(f"thing description lacks {missing}")
        return cls(
            id=doc["id"],
            title=doc["title"],
            actions=doc["actions"],
            properties=doc.get("properties", {}),
            security_definitions=doc["securityDefinitions"],
            security=doc["security"],
            context=doc["@context"],
        )

    @classmethod
    def from_json(cls, data: "bytes | str") -> "ThingDescription":
        return cls.from_dict(json.loads(data))

    def form_urls(self) -> list[str]:
        urls = []
        for affordance in list(self.actions.values()) + list(self.properties.values()):
            urls.extend(form["href"] for form in affordance.get("forms", ()))
        return urls


def build_td(descriptor: ServiceDescriptor, base_url: str) -> ThingDescription:
    """Render ``descriptor`` with absolute form URLs under ``base_url``."""
    base = base_url.rstrip("/")
    actions: dict[str, dict] = {}
    for spec in descriptor.actions:
        if spec.name in actions:
            raise DuplicateAction(f"action {spec.name!r} declared twice")
        entry: dict[str, Any] = {"title": spec.title, "description": spec.description, "input": spec.input}
        if spec.output is not None:
            entry["output"] = spec.output
        entry["forms"] = [{"href": base + spec.path}]
        actions[spec.name] = entry
    properties = {
        p.name: {
            "title": p.title,
            "description": p.description,
            "type": p.type,
            "readOnly": True,
            "forms": [{"href": base + p.path}],
        }
        for p in descriptor.properties
    }
    return ThingDescription(id=ID_PREFIX + descriptor.name, title=descriptor.name, actions=actions, properties=properties)


def check_td(doc: dict) -> list[str]:
    """Return the list of violated conformance rules (empty when valid)."""
    problems = [f"missing {k}" for k in REQUIRED_FIELDS if k not in doc]
    if doc.get("@context") != TD_CONTEXT:
        problems.append("wrong @context")
    if not str(doc.get("id", "")).startswith(ID_PREFIX):
        problems.append("id prefix")
    if doc.get("securityDefinitions") != BASIC_SECURITY or doc.get("security") != ["basic_sc"]:
        problems.append("security")
    for name, action in doc.get("actions", {}).items():
        forms = action.get("forms") or []
        if len(forms) != 1 or not str(forms[0].get("href", "")).startswith(("http://", "https://")):
            problems.append(f"action {name} needs one absolute form")
    return problems


def _props(**props: tuple[str, str]) -> dict:
    return {
        "type": "object",
        "properties": {name: {"type": t, "description": d} for name, (t, d) in props.items()},
    }


def _map(description: str) -> dict:
    # "map" is not a JSON-schema type; maps are objects with arbitrary keys.
    return {"type": "object", "description": description}


TRANSFORMER = ServiceDescriptor(
    "EventTransformer",
    actions=(
        ActionSpec(
            "transformMessage",
            "Transform message",
            "Converts one raw JSON or XML message into a canonical event record",
            "/transformmessage",
            input=_props(
                event=("string", "Raw message text"),
                json=("boolean", "True when the message is JSON"),
                xml=("boolean", "True when the message is XML"),
            ),
            output=_map("Canonical record: schema name, field values and timestamps"),
        ),
        ActionSpec(
            "sendEventMap",
            "Send event map",
            "Publishes a canonical event record to a broker queue",
            "/sendeventmap",
            input={
                "type": "object",
                "properties": {
                    "outputHost": {"type": "string", "description": "Broker address as host[:port]"},
                    "outputQueue": {"type": "string", "description": "Destination queue name"},
                    "eventMap": _map("Canonical record, or bare field values of the configured schema"),
                },
            },
        ),
    ),
)

CEP = ServiceDescriptor(
    "EventProcessor",
    actions=(
        ActionSpec(
            "deploySchema",
            "Deploy schema",
            "Registers an event type in the engine",
            "/schema",
            input=_props(schema=("string", "Schema statement text")),
            output=_props(id=("string", "Deployment id")),
        ),
        ActionSpec(
            "deployPattern",
            "Deploy pattern",
            "Deploys a select, pattern or context statement; @Tag annotations carry the alert action",
            "/pattern",
            input=_props(pattern=("string", "Statement text")),
            output=_props(id=("string", "Deployment id")),
        ),
        ActionSpec(
            "deployDataflow",
            "Deploy dataflow",
            "Starts consuming canonical events from a broker queue into the engine",
            "/dataflow",
            input=_props(dataflow=("string", "Dataflow statement text"), name=("string", "Dataflow name")),
            output=_props(id=("string", "Deployment id")),
        ),
    ),
    properties=(
        PropertySpec("deploymentsCount", "Deployments count", "Number of active deployments", "/properties/deploymentsCount"),
    ),
)

ACTIONS = ServiceDescriptor(
    "AlertActions",
    actions=(
        ActionSpec(
            "executeAction",
            "Execute action",
            "Runs the file or database action named by the alert's tags",
            "/execute",
            input={
                "type": "object",
                "properties": {
                    "stream": {"type": "string", "description": "Stream that produced the alert"},
                    "values": _map("Alert values"),
                    "tags": {"type": "array", "description": "Action tags as name/value objects"},
                    "detectTs": {"type": "integer", "description": "Detection time in nanoseconds"},
                },
            },
        ),
    ),
)


def action_paths(descriptor: ServiceDescriptor) -> Iterable[str]:
    return [a.path for a in descriptor.actions]
