"""Halt-and-alert policy: failure debouncing, alert dispatch, and the watch loop.

The alert payload is a UTF-8 JSON document with fields event_time (RFC 3339),
frame_id, halt_issued, vials (array of {class, failure_mode, box, score} with
pixel box corners), and image (base64 PNG). HTTP transport POSTs it; the raw
stream-socket transport sends a 4-byte big-endian length prefix then the
payload bytes.
"""

from __future__ import annotations

import base64
import io
import json
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .boxes import BoundingBox, Label


class TransportError(RuntimeError):
    """One failed delivery attempt (connection refused, timeout, bad status)."""


@dataclass(frozen=True)
class AlertPolicy:
    failure_score_threshold: float = 0.5
    consecutive_frames_required: int = 1
    cooldown_seconds: float = 30.0

    def __post_init__(self):
        if not (0.0 < self.failure_score_threshold <= 1.0):
            raise ValueError(f"threshold must lie in (0, 1]: {self.failure_score_threshold}")
        if self.consecutive_frames_required < 1:
            raise ValueError("consecutive_frames_required must be >= 1")
        if self.cooldown_seconds < 0:
            raise ValueError("cooldown_seconds must be non-negative")


@dataclass(frozen=True)
class StreamState:
    """Debouncing state threaded through decide(); timestamps come from frames."""

    failure_streak: int = 0
    last_alert_time: Optional[float] = None


@dataclass(frozen=True)
class AlertEvent:
    event_time: str  # RFC 3339
    frame_id: str
    vials: tuple
    image_png_b64: str
    halt_issued: bool = True

    def to_json(self) -> str:
        payload = {
            "event_time": self.event_time,
            "frame_id": self.frame_id,
            "halt_issued": self.halt_issued,
            "vials": [
                {
                    "class": v["class"],
                    "failure_mode": v.get("failure_mode"),
                    "box": v["box"],
                    "score": v["score"],
                }
                for v in self.vials
            ],
            "image": self.image_png_b64,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass(frozen=True)
class Decision:
    halt: bool
    event: Optional[AlertEvent] = None


@dataclass
class DeliveryResult:
    transport_id: str
    status: str  # delivered | retried_then_delivered | failed
    attempts: int
    latency_seconds: float


def _rfc3339(timestamp: float) -> str:
    from datetime import datetime, timezone

    return datetime.fromtimestamp(timestamp, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def encode_image_png(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_event(
    dets: Sequence[BoundingBox],
    frame_id: str,
    frame_time: float,
    image: Optional[np.ndarray] = None,
    failure_modes: Optional[dict] = None,
) -> AlertEvent:
    vials = []
    for d in dets:
        vials.append(
            {
                "class": d.label.value,
                "failure_mode": (failure_modes or {}).get(id(d)),
                "box": [d.x_min, d.y_min, d.x_max, d.y_max],
                "score": d.score,
            }
        )
    return AlertEvent(
        event_time=_rfc3339(frame_time),
        frame_id=frame_id,
        vials=tuple(vials),
        image_png_b64=encode_image_png(image) if image is not None else "",
    )


def decide(
    dets: Sequence[BoundingBox],
    policy: AlertPolicy,
    state: StreamState,
    frame_id: str = "",
    frame_time: float = 0.0,
    image: Optional[np.ndarray] = None,
) -> tuple[Decision, StreamState]:
    """Pure decision step: halt-and-alert when a failure detection at or above
    the score threshold persists for the required consecutive frames and the
    cooldown has elapsed. A sub-threshold frame resets the streak."""
    failures = [
        d for d in dets
        if d.label is Label.FAILURE and d.score is not None
        and d.score >= policy.failure_score_threshold
    ]
    if not failures:
        return Decision(halt=False), replace(state, failure_streak=0)

    streak = state.failure_streak + 1
    cooldown_ok = (
        state.last_alert_time is None
        or frame_time - state.last_alert_time >= policy.cooldown_seconds
    )
    if streak >= policy.consecutive_frames_required and cooldown_ok:
        event = build_event(failures, frame_id, frame_time, image)
        return Decision(halt=True, event=event), StreamState(
            failure_streak=0, last_alert_time=frame_time
        )
    return Decision(halt=False), replace(state, failure_streak=streak)


# ---------------------------------------------------------------------------
# Transports


class HttpTransport:
    """POSTs the JSON payload; any 2xx status counts as delivered."""

    def __init__(self, url: str, bearer_token: Optional[str] = None, timeout: float = 5.0):
        self.url = url
        self.bearer_token = bearer_token
        self.timeout = timeout
        self.transport_id = f"http:{url}"

    def send(self, payload: bytes) -> None:
        headers = {"Content-Type": "application/json; charset=utf-8"}
        if self.bearer_token:
            headers["Authorization"] = f"Bearer {self.bearer_token}"
        request = urllib.request.Request(self.url, data=payload, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                if not (200 <= response.status < 300):
                    raise TransportError(f"unexpected status {response.status}")
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc


class SocketTransport:
    """Length-prefixed payload over a raw stream socket."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.transport_id = f"socket:{host}:{port}"

    def send(self, payload: bytes) -> None:
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as conn:
                conn.sendall(len(payload).to_bytes(4, "big") + payload)
        except OSError as exc:
            raise TransportError(str(exc)) from exc


class IncidentLog:
    """Append-only JSONL record of every dispatch outcome; failed events stay
    replayable."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, event: AlertEvent, result: DeliveryResult) -> None:
        record = {
            "event": json.loads(event.to_json()),
            "transport": result.transport_id,
            "status": result.status,
            "attempts": result.attempts,
            "latency_seconds": result.latency_seconds,
        }
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line]


def dispatch_alert(
    event: AlertEvent,
    transport,
    max_attempts: int = 3,
    backoff_seconds: float = 0.5,
    incident_log: Optional[IncidentLog] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> DeliveryResult:
    """Send with bounded retries and exponential backoff; always log the outcome."""
    payload = event.to_json().encode("utf-8")
    start = time.monotonic()
    attempts = 0
    status = "failed"
    while attempts < max_attempts:
        attempts += 1
        try:
            transport.send(payload)
            status = "delivered" if attempts == 1 else "retried_then_delivered"
            break
        except TransportError:
            if attempts < max_attempts:
                sleep(backoff_seconds * (2 ** (attempts - 1)))
    result = DeliveryResult(
        transport_id=transport.transport_id,
        status=status,
        attempts=attempts,
        latency_seconds=time.monotonic() - start,
    )
    if incident_log is not None:
        incident_log.append(event, result)
    return result


# ---------------------------------------------------------------------------
# Watch loop


class HaltController:
    """Abstract hardware control channel: halt pauses intake until resume."""

    def __init__(self, auto_resume: bool = False):
        self.auto_resume = auto_resume
        self.halted = False
        self.halt_count = 0

    def halt(self, frame_id: str) -> None:
        self.halted = True
        self.halt_count += 1

    def wait_for_resume(self) -> bool:
        """Return True once resumed; False to stop the loop."""
        if self.auto_resume:
            self.halted = False
            return True
        try:
            input("halted; press enter to resume (ctrl-d to stop) > ")
        except EOFError:
            return False
        self.halted = False
        return True

    def resume(self) -> None:
        self.halted = False


@dataclass
class WatchStats:
    frames: int = 0
    alerts: int = 0
    halts: int = 0
    skipped: int = 0
    decisions: list = field(default_factory=list)


def watch(
    frames: Iterable[tuple[str, float, Optional[np.ndarray]]],
    detector: Callable[[np.ndarray], Sequence[BoundingBox]],
    policy: AlertPolicy,
    transport=None,
    controller: Optional[HaltController] = None,
    incident_log: Optional[IncidentLog] = None,
    on_decision: Optional[Callable] = None,
) -> WatchStats:
    """Per frame: detect, decide, and on halt-and-alert issue the halt signal
    before dispatching. Unreadable frames (image None) are skipped and counted.
    """
    controller = controller or HaltController(auto_resume=True)
    state = StreamState()
    stats = WatchStats()
    for frame_id, frame_time, image in frames:
        if image is None:
            stats.skipped += 1
            continue
        stats.frames += 1
        dets = detector(image)
        decision, state = decide(dets, policy, state, frame_id, frame_time, image)
        stats.decisions.append((frame_id, decision.halt))
        if on_decision is not None:
            on_decision(frame_id, decision)
        if decision.halt:
            controller.halt(frame_id)  # safety before notification
            stats.halts += 1
            if transport is not None:
                dispatch_alert(decision.event, transport, incident_log=incident_log)
            stats.alerts += 1
            if not controller.wait_for_resume():
                break
    return stats


def directory_frames(path, pattern: str = "*.png") -> Iterable[tuple[str, float, Optional[np.ndarray]]]:
    """Sorted directory feed; frame time is the file index in seconds."""
    for i, frame_path in enumerate(sorted(Path(path).glob(pattern))):
        try:
            image = np.asarray(Image.open(frame_path).convert("RGB"))
        except Exception:
            image = None
        yield frame_path.stem, float(i), image
