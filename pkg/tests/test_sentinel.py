"""Halt-and-alert policy, transports, retry/backoff, and the watch loop."""

import base64
import io
import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from PIL import Image

from vialguard.boxes import BoundingBox, Label
from vialguard.sentinel import (
    AlertPolicy,
    HaltController,
    HttpTransport,
    IncidentLog,
    SocketTransport,
    StreamState,
    TransportError,
    build_event,
    decide,
    directory_frames,
    dispatch_alert,
    encode_image_png,
    watch,
)


def _failure(score):
    return BoundingBox(10, 10, 30, 40, Label.FAILURE, score)


def _success(score=0.9):
    return BoundingBox(50, 10, 70, 40, Label.SUCCESS, score)


class RecordingTransport:
    """In-memory transport with a scripted number of initial failures."""

    def __init__(self, fail_first: int = 0):
        self.fail_first = fail_first
        self.calls = 0
        self.payloads = []
        self.transport_id = "memory:test"

    def send(self, payload: bytes) -> None:
        self.calls += 1
        if self.calls <= self.fail_first:
            raise TransportError("injected fault")
        self.payloads.append(payload)


class TestPolicy:
    def test_validation(self):
        with pytest.raises(ValueError):
            AlertPolicy(failure_score_threshold=0.0)
        with pytest.raises(ValueError):
            AlertPolicy(failure_score_threshold=1.5)
        with pytest.raises(ValueError):
            AlertPolicy(consecutive_frames_required=0)
        with pytest.raises(ValueError):
            AlertPolicy(cooldown_seconds=-1.0)


class TestDecide:
    def test_immediate_halt(self):
        policy = AlertPolicy(failure_score_threshold=0.5)
        decision, state = decide([_failure(0.8)], policy, StreamState(), "f0", 0.0)
        assert decision.halt and decision.event is not None
        assert state.last_alert_time == 0.0
        assert state.failure_streak == 0

    def test_success_only_no_halt(self):
        policy = AlertPolicy()
        decision, state = decide([_success()], policy, StreamState(failure_streak=2), "f0", 0.0)
        assert not decision.halt
        assert state.failure_streak == 0  # sub-threshold frame resets the streak

    def test_streak_debounce(self):
        policy = AlertPolicy(consecutive_frames_required=3)
        state = StreamState()
        halts = []
        for t in range(4):
            decision, state = decide([_failure(0.9)], policy, state, f"f{t}", float(t))
            halts.append(decision.halt)
        assert halts == [False, False, True, False]

    def test_streak_reset_mid_run(self):
        policy = AlertPolicy(consecutive_frames_required=2)
        state = StreamState()
        _, state = decide([_failure(0.9)], policy, state, "a", 0.0)
        _, state = decide([_success()], policy, state, "b", 1.0)
        decision, state = decide([_failure(0.9)], policy, state, "c", 2.0)
        assert not decision.halt  # streak restarted after the clean frame

    def test_cooldown(self):
        policy = AlertPolicy(cooldown_seconds=10.0)
        state = StreamState()
        d1, state = decide([_failure(0.9)], policy, state, "a", 0.0)
        d2, state = decide([_failure(0.9)], policy, state, "b", 5.0)
        d3, state = decide([_failure(0.9)], policy, state, "c", 10.0)
        assert d1.halt and not d2.halt and d3.halt

    def test_sub_threshold_scores_ignored(self):
        policy = AlertPolicy(failure_score_threshold=0.7)
        decision, _ = decide([_failure(0.69)], policy, StreamState(), "a", 0.0)
        assert not decision.halt

    def test_replay_bit_deterministic(self):
        policy = AlertPolicy(consecutive_frames_required=2, cooldown_seconds=3.0)
        trace = [
            [_success()],
            [_failure(0.9)],
            [_failure(0.8), _success()],
            [_failure(0.95)],
            [],
            [_failure(0.85)],
            [_failure(0.7)],
        ]

        def run():
            state = StreamState()
            out = []
            for t, dets in enumerate(trace):
                decision, state = decide(dets, policy, state, f"f{t}", float(t))
                out.append(
                    (decision.halt, decision.event.to_json() if decision.event else None)
                )
            return out

        assert run() == run()


class TestEvent:
    def test_payload_fields(self):
        image = np.full((8, 8, 3), 50, dtype=np.uint8)
        event = build_event([_failure(0.75)], "frame_9", 1_700_000_000.0, image)
        payload = json.loads(event.to_json())
        assert payload["frame_id"] == "frame_9"
        assert payload["halt_issued"] is True
        assert payload["event_time"].endswith("Z")
        assert "2023" in payload["event_time"]
        assert payload["vials"][0]["class"] == "failure"
        assert payload["vials"][0]["score"] == 0.75
        assert payload["vials"][0]["box"] == [10, 10, 30, 40]
        decoded = np.asarray(Image.open(io.BytesIO(base64.b64decode(payload["image"]))))
        assert np.array_equal(decoded, image)

    def test_encode_image_round_trip(self):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        decoded = np.asarray(
            Image.open(io.BytesIO(base64.b64decode(encode_image_png(image))))
        )
        assert np.array_equal(decoded, image)


class TestDispatch:
    def _event(self):
        return build_event([_failure(0.9)], "f0", 0.0)

    def test_first_try_delivered(self):
        transport = RecordingTransport()
        result = dispatch_alert(self._event(), transport, sleep=lambda s: None)
        assert result.status == "delivered"
        assert result.attempts == 1
        assert transport.payloads == [self._event().to_json().encode("utf-8")]

    def test_retried_then_delivered(self):
        transport = RecordingTransport(fail_first=2)
        sleeps = []
        result = dispatch_alert(self._event(), transport, sleep=sleeps.append)
        assert result.status == "retried_then_delivered"
        assert result.attempts == 3
        assert sleeps == [0.5, 1.0]  # exponential backoff

    def test_failed_after_max_attempts(self):
        transport = RecordingTransport(fail_first=10)
        result = dispatch_alert(self._event(), transport, sleep=lambda s: None)
        assert result.status == "failed"
        assert result.attempts == 3
        assert transport.payloads == []

    def test_incident_log_records_all_outcomes(self, tmp_path):
        log = IncidentLog(tmp_path / "incidents.jsonl")
        dispatch_alert(self._event(), RecordingTransport(), incident_log=log, sleep=lambda s: None)
        first = (tmp_path / "incidents.jsonl").read_bytes()
        dispatch_alert(
            self._event(), RecordingTransport(fail_first=10), incident_log=log, sleep=lambda s: None
        )
        entries = log.entries()
        assert [e["status"] for e in entries] == ["delivered", "failed"]
        assert entries[1]["attempts"] == 3
        assert entries[0]["event"]["frame_id"] == "f0"
        # append-only: the first record's bytes are untouched
        assert (tmp_path / "incidents.jsonl").read_bytes().startswith(first)


class _ScriptedHandler(BaseHTTPRequestHandler):
    fail_remaining = 0
    received = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = self.rfile.read(length)
        cls = type(self)
        if cls.fail_remaining > 0:
            cls.fail_remaining -= 1
            self.send_response(503)
            self.end_headers()
            return
        cls.received.append((dict(self.headers), body))
        self.send_response(200)
        self.end_headers()

    def log_message(self, *args):
        pass


@pytest.fixture()
def http_server():
    _ScriptedHandler.fail_remaining = 0
    _ScriptedHandler.received = []
    server = HTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    thread.join(timeout=5)


class TestHttpTransport:
    def test_loopback_delivery_latency(self, http_server):
        url = f"http://127.0.0.1:{http_server.server_address[1]}/alert"
        transport = HttpTransport(url, bearer_token="sekret")
        event = build_event([_failure(0.9)], "f0", 0.0)
        start = time.perf_counter()
        result = dispatch_alert(event, transport)
        latency = time.perf_counter() - start
        assert result.status == "delivered"
        assert latency < 1.0
        assert result.latency_seconds < 1.0
        headers, body = _ScriptedHandler.received[0]
        assert headers["Authorization"] == "Bearer sekret"
        assert json.loads(body)["frame_id"] == "f0"

    def test_server_fault_then_recovery(self, http_server):
        _ScriptedHandler.fail_remaining = 2
        url = f"http://127.0.0.1:{http_server.server_address[1]}/alert"
        transport = HttpTransport(url)
        result = dispatch_alert(
            build_event([_failure(0.9)], "f1", 1.0), transport, sleep=lambda s: None
        )
        assert result.status == "retried_then_delivered"
        assert result.attempts == 3

    def test_connection_refused(self):
        transport = HttpTransport("http://127.0.0.1:9/alert", timeout=0.5)
        with pytest.raises(TransportError):
            transport.send(b"{}")


class TestSocketTransport:
    def test_length_prefixed_payload(self):
        received = []
        server = socket.create_server(("127.0.0.1", 0))
        port = server.getsockname()[1]

        def serve():
            conn, _ = server.accept()
            with conn:
                header = conn.recv(4)
                length = int.from_bytes(header, "big")
                body = b""
                while len(body) < length:
                    body += conn.recv(length - len(body))
                received.append(body)

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        event = build_event([_failure(0.8)], "f2", 2.0)
        SocketTransport("127.0.0.1", port).send(event.to_json().encode("utf-8"))
        thread.join(timeout=5)
        server.close()
        assert received == [event.to_json().encode("utf-8")]

    def test_unreachable(self):
        with pytest.raises(TransportError):
            SocketTransport("127.0.0.1", 9, timeout=0.5).send(b"x")


class TestWatch:
    def _frames(self, script):
        """script: list of 'ok'|'bad'|None describing each frame."""
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        return [
            (f"frame_{i}", float(i), None if kind is None else image)
            for i, kind in enumerate(script)
        ], script

    def test_single_qualifying_event(self):
        frames, script = self._frames(["ok", "ok", "bad", "bad", "ok", "ok", "ok", "ok", "ok", "ok"])

        def detector(image):
            kind = script[detector.i]
            detector.i += 1
            return [_failure(0.9)] if kind == "bad" else [_success()]

        detector.i = 0
        policy = AlertPolicy(consecutive_frames_required=2, cooldown_seconds=60.0)
        transport = RecordingTransport()
        stats = watch(frames, detector, policy, transport=transport)
        assert stats.frames == 10
        assert stats.halts == 1
        assert stats.alerts == 1
        assert len(transport.payloads) == 1
        assert [h for _, h in stats.decisions] == [False] * 3 + [True] + [False] * 6

    def test_skips_unreadable_frames(self):
        frames, _ = self._frames(["ok", None, "ok"])
        stats = watch(frames, lambda img: [_success()], AlertPolicy())
        assert stats.frames == 2
        assert stats.skipped == 1

    def test_halt_precedes_dispatch(self):
        controller = HaltController(auto_resume=True)
        seen = []

        class Probe:
            transport_id = "probe"

            def send(self, payload):
                seen.append(controller.halt_count)

        frames, _ = self._frames(["bad"])
        watch(frames, lambda img: [_failure(0.9)], AlertPolicy(), transport=Probe(), controller=controller)
        assert seen == [1]  # halt already issued when the alert left

    def test_stop_on_resume_refused(self):
        class StopController(HaltController):
            def wait_for_resume(self):
                return False

        frames, _ = self._frames(["bad", "bad", "bad"])
        stats = watch(
            frames, lambda img: [_failure(0.9)], AlertPolicy(), controller=StopController()
        )
        assert stats.frames == 1  # loop stopped after the first halt
        assert stats.halts == 1

    def test_incident_log_from_watch(self, tmp_path):
        frames, _ = self._frames(["bad"])
        log = IncidentLog(tmp_path / "log.jsonl")
        watch(
            frames, lambda img: [_failure(0.9)], AlertPolicy(),
            transport=RecordingTransport(), incident_log=log,
        )
        assert len(log.entries()) == 1


class TestDirectoryFrames:
    def test_sorted_feed_with_corrupt_file(self, tmp_path):
        for name in ("b.png", "a.png"):
            Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / name)
        (tmp_path / "c.png").write_bytes(b"not a png")
        frames = list(directory_frames(tmp_path))
        assert [f[0] for f in frames] == ["a", "b", "c"]
        assert [f[1] for f in frames] == [0.0, 1.0, 2.0]
        assert frames[0][2] is not None and frames[2][2] is None
