"""Security and management overlay.

Node registry and lifecycle, commissioning with keyed-hash credentials
(standing in for certificates at desk scale), firmware-version push over
retained management commands, EWMA traffic-anomaly monitoring, and
incident handling with quarantine/remediation.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

LIFECYCLES = {"created", "commissioned", "active", "quarantined", "decommissioned"}

ALLOWED_TRANSITIONS = {
    ("created", "commissioned"),
    ("commissioned", "active"),
    ("active", "quarantined"),
    ("quarantined", "active"),
    ("active", "decommissioned"),
    ("quarantined", "decommissioned"),
}

# anomaly detector knobs (centrally configurable)
EWMA_ALPHA = 0.2
ANOMALY_FACTOR = 5.0
ANOMALY_FLOOR = 10.0
INCIDENT_BUCKETS = 3


class ControlPlaneError(Exception):
    pass


class UnknownNode(ControlPlaneError):
    pass


class UnknownClass(ControlPlaneError):
    pass


class IllegalTransition(ControlPlaneError):
    pass


class NotActive(ControlPlaneError):
    pass


class UnknownIncident(ControlPlaneError):
    pass


class NodeNotQuarantined(ControlPlaneError):
    pass


def make_credential(secret: bytes, node_id: str, key_epoch: int) -> str:
    """Keyed-hash token binding a node identity to the system secret."""
    msg = f"{node_id}|{key_epoch}".encode("utf-8")
    return hmac.new(secret, msg, hashlib.sha256).hexdigest()


@dataclass(slots=True)
class RegistryEntry:
    node_id: str
    name: str
    class_name: str
    credential: str
    lifecycle: str = "commissioned"
    broker_address: str = "local"
    topics: tuple[str, ...] = ()
    firmware_version: str = "1.0"
    created_ts: float = 0.0


class Registry:
    """Registry of system nodes, persisted as a replayable JSON-lines
    event log when given a path."""

    def __init__(
        self,
        secret: bytes = b"iotra-dev-secret",
        key_epoch: int = 1,
        log_path: Path | None = None,
        clock=None,
    ):
        self.secret = secret
        self.key_epoch = key_epoch
        self.clock = clock
        self._entries: dict[str, RegistryEntry] = {}
        self._counter = 0
        self._log_path = Path(log_path) if log_path else None
        self.on_quarantine: Callable[[str], None] | None = None
        if self._log_path is not None and self._log_path.exists():
            self._replay_log()

    def _now(self) -> float:
        return self.clock.now() if self.clock else 0.0

    # -- event log -------------------------------------------------------

    def _append_event(self, event: dict) -> None:
        if self._log_path is None:
            return
        self._log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, separators=(",", ":")) + "\n")

    def _replay_log(self) -> None:
        for line in self._log_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            ev = json.loads(line)
            kind = ev["event"]
            if kind == "commissioned":
                entry = RegistryEntry(
                    node_id=ev["node_id"],
                    name=ev["name"],
                    class_name=ev["class_name"],
                    credential=ev["credential"],
                    lifecycle="commissioned",
                    topics=tuple(ev.get("topics", ())),
                    created_ts=ev.get("ts", 0.0),
                )
                self._entries[entry.node_id] = entry
                self._counter = max(self._counter, int(entry.node_id.split("-")[1]))
            elif kind == "transition":
                e = self._entries.get(ev["node_id"])
                if e is not None:
                    e.lifecycle = ev["to"]
                    if ev["to"] == "decommissioned":
                        e.credential = ""
            elif kind == "firmware":
                e = self._entries.get(ev["node_id"])
                if e is not None:
                    e.firmware_version = ev["version"]

    # -- commissioning and lifecycle -------------------------------------

    def commission(self, name: str, class_name: str,
                   model=None) -> RegistryEntry:
        """Admit a new node: assign identity, credential, and endpoints."""
        if model is not None and not model.has_class(class_name):
            raise UnknownClass(class_name)
        self._counter += 1
        node_id = f"n-{self._counter:06d}"
        entry = RegistryEntry(
            node_id=node_id,
            name=name,
            class_name=class_name,
            credential=make_credential(self.secret, node_id, self.key_epoch),
            lifecycle="commissioned",
            topics=(
                f"data/{node_id}/#",
                f"twin/{node_id}/reported",
                f"twin/{node_id}/desired",
                f"mgmt/{node_id}/status",
            ),
            created_ts=self._now(),
        )
        self._entries[node_id] = entry
        self._append_event(
            {
                "event": "commissioned",
                "node_id": node_id,
                "name": name,
                "class_name": class_name,
                "credential": entry.credential,
                "topics": list(entry.topics),
                "ts": entry.created_ts,
            }
        )
        return entry

    def transition(self, node_id: str, target: str) -> RegistryEntry:
        entry = self.get(node_id)
        if target not in LIFECYCLES:
            raise IllegalTransition(f"unknown lifecycle {target!r}")
        if (entry.lifecycle, target) not in ALLOWED_TRANSITIONS:
            raise IllegalTransition(f"{entry.lifecycle} -> {target}")
        entry.lifecycle = target
        if target == "decommissioned":
            entry.credential = ""  # terminal: credential invalidated
        self._append_event(
            {"event": "transition", "node_id": node_id, "to": target, "ts": self._now()}
        )
        if target == "quarantined" and self.on_quarantine is not None:
            self.on_quarantine(node_id)
        return entry

    # -- queries ---------------------------------------------------------

    def get(self, node_id: str) -> RegistryEntry:
        entry = self._entries.get(node_id)
        if entry is None:
            raise UnknownNode(node_id)
        return entry

    def entries(self) -> list[RegistryEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def lifecycle_of(self, node_id: str) -> str | None:
        entry = self._entries.get(node_id)
        return entry.lifecycle if entry else None

    def class_of(self, node_id: str) -> str | None:
        entry = self._entries.get(node_id)
        return entry.class_name if entry else None

    def authenticate(self, node_id: str, credential: str) -> bool:
        """Pass only for active nodes presenting their own token."""
        entry = self._entries.get(node_id)
        if entry is None or entry.lifecycle != "active" or not entry.credential:
            return False
        return hmac.compare_digest(entry.credential, credential)

    def set_firmware(self, node_id: str, version: str) -> None:
        entry = self.get(node_id)
        entry.firmware_version = version
        self._append_event(
            {"event": "firmware", "node_id": node_id, "version": version,
             "ts": self._now()}
        )


# -- anomaly monitoring --------------------------------------------------


@dataclass(slots=True)
class NodeMonitorState:
    ewma: float = 0.0
    seeded: bool = False
    consecutive_anomalous: int = 0


@dataclass(slots=True)
class Incident:
    incident_id: str
    node_id: str
    kind: str  # traffic_flood | auth_probe | manual
    opened_ts: float
    state: str = "open"  # open | mitigated | closed
    actions: list[str] = field(default_factory=list)


class Monitor:
    """Per-node EWMA of per-second message counts. A bucket is anomalous
    when it exceeds max(floor, factor x baseline); the baseline only
    learns from normal buckets. Three anomalous buckets in a row open an
    incident and quarantine the node."""

    def __init__(self, registry: Registry, clock=None,
                 alpha: float = EWMA_ALPHA, factor: float = ANOMALY_FACTOR,
                 floor: float = ANOMALY_FLOOR,
                 incident_buckets: int = INCIDENT_BUCKETS):
        self.registry = registry
        self.clock = clock
        self.alpha = alpha
        self.factor = factor
        self.floor = floor
        self.incident_buckets = incident_buckets
        self.states: dict[str, NodeMonitorState] = {}
        self.incidents: dict[str, Incident] = {}
        self._incident_counter = 0

    def observe(self, node_id: str, bucket_count: float, now: float) -> str:
        """One call per 1 s bucket per node; returns the verdict."""
        self.registry.get(node_id)
        st = self.states.setdefault(node_id, NodeMonitorState())
        if not st.seeded:
            # warm start: the first bucket defines the baseline instead of
            # being judged against an empty one
            st.ewma = float(bucket_count)
            st.seeded = True
            return "normal"
        threshold = max(self.floor, self.factor * st.ewma)
        if bucket_count > threshold:
            st.consecutive_anomalous += 1
            if st.consecutive_anomalous >= self.incident_buckets:
                if not self._has_open_incident(node_id):
                    self._open_incident(node_id, "traffic_flood", now)
                    return "incident_opened"
            return "anomalous"
        st.consecutive_anomalous = 0
        st.ewma += self.alpha * (bucket_count - st.ewma)
        return "normal"

    def _has_open_incident(self, node_id: str) -> bool:
        return any(
            i.node_id == node_id and i.state != "closed"
            for i in self.incidents.values()
        )

    def _open_incident(self, node_id: str, kind: str, now: float) -> Incident:
        self._incident_counter += 1
        iid = f"inc-{self._incident_counter:04d}"
        incident = Incident(iid, node_id, kind, now)
        incident.actions.append(f"opened kind={kind}")
        self.incidents[iid] = incident
        if self.registry.lifecycle_of(node_id) == "active":
            self.registry.transition(node_id, "quarantined")
            incident.actions.append("quarantined")
            incident.state = "mitigated"
        return incident

    def open_manual_incident(self, node_id: str, now: float) -> Incident:
        return self._open_incident(node_id, "manual", now)

    def remediate(self, incident_id: str) -> Incident:
        """Operator action: bring a quarantined node back and close the
        incident; monitor baseline starts over."""
        incident = self.incidents.get(incident_id)
        if incident is None:
            raise UnknownIncident(incident_id)
        if incident.state == "closed":
            raise UnknownIncident(f"{incident_id} already closed")
        if self.registry.lifecycle_of(incident.node_id) != "quarantined":
            raise NodeNotQuarantined(incident.node_id)
        self.registry.transition(incident.node_id, "active")
        self.states.pop(incident.node_id, None)
        incident.actions.append("remediated: node reactivated, monitor reset")
        incident.state = "closed"
        return incident


# -- software update push ------------------------------------------------


def update_topic(node_id: str) -> str:
    return f"mgmt/{node_id}/update"


class ManagementService:
    """Pushes firmware-version updates over retained qos-1 commands and
    applies agent status reports back into the registry."""

    def __init__(self, registry: Registry, publish: Callable[..., object] | None = None):
        self.registry = registry
        self.publish = publish
        self.pushed: dict[str, tuple[str, str]] = {}  # node -> (version, digest)

    def push_update(self, node_id: str, version: str, payload_digest: str) -> str:
        entry = self.registry.get(node_id)
        if entry.lifecycle != "active":
            raise NotActive(f"{node_id} is {entry.lifecycle}")
        self.pushed[node_id] = (version, payload_digest)
        if self.publish is not None:
            payload = json.dumps(
                {"version": version, "digest": payload_digest},
                separators=(",", ":"),
            )
            self.publish(update_topic(node_id), payload, qos=1, retain=True)
        return "pushed"

    def apply_status_report(self, node_id: str, version: str) -> None:
        self.registry.set_firmware(node_id, version)
