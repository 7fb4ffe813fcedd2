"""Minimal MQTT 3.1.1 broker state machine (QoS 0/1, retained messages)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .mqtt import SUBACK_FAILURE, Kind, MqttError, MqttPacket


SYS_TOPICS = "$SYS/broker/topics"


def topic_matches(topic_filter: str, topic: str) -> bool:
    f_levels = topic_filter.split("/")
    t_levels = topic.split("/")
    if topic.startswith("$") and f_levels[0] in ("+", "#"):
        return False
    for i, f in enumerate(f_levels):
        if f == "#":
            return True
        if i >= len(t_levels):
            return False
        if f != "+" and f != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


class ProtocolViolation(MqttError):
    def __init__(self, session: str, detail: str):
        super().__init__("protocol_violation", f"{session}: {detail}")
        self.session = session


@dataclass
class Session:
    client_id: str
    subscriptions: dict[str, int] = field(default_factory=dict)
    next_packet_id: int = 1

    def take_packet_id(self) -> int:
        pid = self.next_packet_id
        self.next_packet_id = pid % 0xFFFF + 1
        return pid


class Broker:
    """Maps inbound packets from a session to the packets the broker emits.

    Session ids are transport-level identities (one per network connection);
    the MQTT client id is recorded on CONNECT.
    """

    def __init__(self) -> None:
        self.sessions: dict[str, Session] = {}
        self.retained: dict[str, bytes] = {}
        self.diagnostics: list[str] = []

    def _terminate(self, session: str, detail: str) -> ProtocolViolation:
        self.sessions.pop(session, None)
        self.diagnostics.append(f"{session}: {detail}")
        return ProtocolViolation(session, detail)

    def handle(self, session: str, p: MqttPacket) -> list[tuple[str, MqttPacket]]:
        if p.kind == Kind.CONNECT:
            if session in self.sessions:
                raise self._terminate(session, "second CONNECT on one connection")
            self.sessions[session] = Session(p.client_id)
            return [(session, MqttPacket(Kind.CONNACK, return_code=0))]
        sess = self.sessions.get(session)
        if sess is None:
            raise self._terminate(session, f"{p.kind.name} before CONNECT")
        if p.kind == Kind.PUBLISH:
            out: list[tuple[str, MqttPacket]] = []
            if p.qos == 1:
                out.append((session, MqttPacket(Kind.PUBACK, packet_id=p.packet_id)))
            if p.retain:
                if p.payload:
                    self.retained[p.topic] = p.payload
                else:
                    self.retained.pop(p.topic, None)
            out.extend(self._fan_out(p))
            return out
        if p.kind == Kind.SUBSCRIBE:
            granted = []
            new_filters = []
            for flt, qos in p.subscriptions:
                if qos > 1:
                    granted.append(SUBACK_FAILURE)
                    continue
                sess.subscriptions[flt] = qos
                granted.append(qos)
                new_filters.append((flt, qos))
            out = [(session, MqttPacket(Kind.SUBACK, packet_id=p.packet_id, granted=tuple(granted)))]
            for topic in sorted(self.retained):
                for flt, qos in new_filters:
                    if topic_matches(flt, topic):
                        out.append((session, self._outbound(sess, topic, self.retained[topic], qos,
                                                            retain=True)))
                        break
            if any(flt == SYS_TOPICS for flt, _ in new_filters):
                listing = json.dumps(self.topic_inventory()).encode()
                out.append((session, self._outbound(sess, SYS_TOPICS, listing, 0)))
            return out
        if p.kind == Kind.PINGREQ:
            return [(session, MqttPacket(Kind.PINGRESP))]
        if p.kind == Kind.PUBACK:
            return []
        if p.kind == Kind.DISCONNECT:
            del self.sessions[session]
            return []
        raise self._terminate(session, f"unexpected {p.kind.name} from client")

    def _outbound(self, sess: Session, topic: str, payload: bytes, qos: int,
                  retain: bool = False) -> MqttPacket:
        pid = sess.take_packet_id() if qos else None
        return MqttPacket(Kind.PUBLISH, topic=topic, payload=payload, qos=qos, retain=retain,
                          packet_id=pid)

    def _fan_out(self, p: MqttPacket) -> list[tuple[str, MqttPacket]]:
        out = []
        for sid in sorted(self.sessions):
            sess = self.sessions[sid]
            best = None
            for flt, qos in sess.subscriptions.items():
                if topic_matches(flt, p.topic):
                    best = qos if best is None else max(best, qos)
            if best is not None:
                out.append((sid, self._outbound(sess, p.topic, p.payload, min(p.qos, best))))
        return out

    def topic_inventory(self) -> list[str]:
        """Every topic the broker currently knows about (retained or subscribed).

        Also served to clients that subscribe to ``$SYS/broker/topics``.
        """
        topics = set(self.retained)
        for sess in self.sessions.values():
            topics.update(f for f in sess.subscriptions if not f.startswith("$SYS"))
        return sorted(topics)
