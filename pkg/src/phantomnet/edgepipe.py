"""Simulated edge detection daemon: frame source, temperature-guarded
inference, person-triggered notification events, and sink dispatch with
retry and a dead-letter file.

Three workers (source, inference+postprocess, dispatch) run on bounded
queues of capacity 8; a full queue blocks the upstream stage. Events go
out as JSON lines: {"v":1,"kind":...,"ts_ms":...,"device_id":...,"seq":...,
"payload":{...}} with the sequence number assigned by each sink.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import queue
import socket
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .netgraph import (
    BUILTIN_CLASS_NAMES,
    build_model,
    load_weights,
    read_weights,
    resolve_config,
)
from .postprocess import Detection, decode, nms
from .tensor import ConfigError, Tensor4

log = logging.getLogger("phantomnet.edgepipe")

WIRE_VERSION = 1
QUEUE_CAPACITY = 8
RETRY_BACKOFFS_S = (0.1, 0.2, 0.4)
DEFAULT_DEADLETTER = "deadletter.jsonl"
DEADLETTER_ENV = "EDGEPIPE_DEADLETTER"

EVENT_KINDS = ("detection", "halt", "resume", "alert")


@dataclass(frozen=True)
class TempReading:
    celsius: float
    timestamp: float  # ms epoch

    def __post_init__(self):
        if not np.isfinite(self.celsius):
            raise ConfigError(f"temperature reading must be finite, got {self.celsius}")


@dataclass(frozen=True)
class PipelineEvent:
    """One message flowing from the edge daemon to notification sinks."""

    kind: str
    ts_ms: int
    device_id: str
    payload: dict

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind '{self.kind}'")

    def to_wire(self, seq: int) -> dict:
        return {
            "v": WIRE_VERSION,
            "kind": self.kind,
            "ts_ms": self.ts_ms,
            "device_id": self.device_id,
            "seq": seq,
            "payload": self.payload,
        }


class EventClock:
    """Wall clock in ms, forced monotonically non-decreasing."""

    def __init__(self):
        self._last = 0
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            self._last = max(self._last, int(time.time() * 1000))
            return self._last


class TemperatureGuard:
    """Halt when the temperature exceeds the threshold; resume only after it
    cools to threshold - hysteresis, which prevents halt/resume flapping."""

    def __init__(self, threshold: float = 60.0, hysteresis: float = 5.0):
        self.threshold = threshold
        self.hysteresis = hysteresis
        self.halted = False

    def update(self, reading: "TempReading | float") -> str:
        celsius = reading.celsius if isinstance(reading, TempReading) else float(reading)
        if self.halted:
            if celsius <= self.threshold - self.hysteresis:
                self.halted = False
        elif celsius > self.threshold:
            self.halted = True
        return "halt" if self.halted else "continue"


def person_trigger(
    dets: list[Detection],
    class_map: dict[int, str],
    device_id: str = "edge",
    clock: EventClock | None = None,
) -> list[PipelineEvent]:
    """Detection events for person-class boxes; the first person in a frame
    additionally raises one alert event (the audio-redundancy analogue).

    Unknown class ids are surfaced as "unknown:<id>" detection events,
    never dropped; they do not trigger the alert.
    """
    clock = clock or EventClock()
    events: list[PipelineEvent] = []
    alerted = False
    for d in dets:
        name = class_map.get(d.class_id)
        if name is None:
            name = f"unknown:{d.class_id}"
        elif name != "person":
            continue
        ev = PipelineEvent(
            kind="detection",
            ts_ms=clock.now_ms(),
            device_id=device_id,
            payload={"class": name, "score": d.score, "bbox": list(d.bbox)},
        )
        events.append(ev)
        if name == "person" and not alerted:
            alerted = True
            events.append(
                PipelineEvent(
                    kind="alert",
                    ts_ms=clock.now_ms(),
                    device_id=device_id,
                    payload={"trigger": "person", "score": d.score},
                )
            )
    return events


@dataclass(frozen=True)
class Ack:
    """Delivery receipt: the sink's name and its assigned sequence number."""

    sink: str
    seq: int


class FileSink:
    """Appends one JSON line per event to a local file."""

    def __init__(self, path: str):
        self.path = path
        self.name = f"file:{path}"
        self._seq = 0
        self._lock = threading.Lock()

    def send(self, event: PipelineEvent) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            line = json.dumps(event.to_wire(seq), separators=(",", ":"))
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
        return seq


class TcpSink:
    """Writes one JSON line per event over a fresh TCP connection."""

    def __init__(self, host: str, port: int, timeout: float = 1.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.name = f"tcp:{host}:{port}"
        self._seq = 0
        self._lock = threading.Lock()

    def send(self, event: PipelineEvent) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
        line = json.dumps(event.to_wire(seq), separators=(",", ":")) + "\n"
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(line.encode("utf-8"))
        return seq


def deadletter_path(configured: str | None = None) -> str:
    return os.environ.get(DEADLETTER_ENV) or configured or DEFAULT_DEADLETTER


def _write_deadletter(path: str, event: PipelineEvent, sink_name: str, error: str) -> None:
    record = {
        "v": WIRE_VERSION,
        "kind": event.kind,
        "ts_ms": event.ts_ms,
        "device_id": event.device_id,
        "payload": event.payload,
        "sink": sink_name,
        "error": error,
    }
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, separators=(",", ":")) + "\n")


def dispatch(
    event: PipelineEvent,
    sink,
    deadletter: str | None = None,
    sleep=time.sleep,
) -> Ack | None:
    """At-least-once delivery: one attempt plus three retries with 100/200/400 ms
    backoff; exhausted events land in the dead-letter file and return None."""
    last_error = ""
    for attempt, backoff in enumerate((0.0,) + RETRY_BACKOFFS_S):
        if backoff:
            sleep(backoff)
        try:
            seq = sink.send(event)
            return Ack(sink=sink.name, seq=seq)
        except Exception as e:  # noqa: BLE001 - any sink failure is retryable
            last_error = f"{type(e).__name__}: {e}"
            log.warning("dispatch attempt %d to %s failed: %s", attempt + 1, sink.name, last_error)
    _write_deadletter(deadletter_path(deadletter), event, sink.name, last_error)
    return None


class ConstantTempSource:
    def __init__(self, celsius: float):
        self.celsius = celsius

    def read(self, clock: EventClock) -> TempReading:
        return TempReading(self.celsius, clock.now_ms())


class ReplayTempSource:
    """Replays one reading per frame from a list or file (one value per
    line); holds the last value once exhausted."""

    def __init__(self, values: list[float]):
        if not values:
            raise ConfigError("temperature replay needs at least one value")
        self.values = [float(v) for v in values]
        self._i = 0

    @classmethod
    def from_file(cls, path: str) -> "ReplayTempSource":
        with open(path, "r", encoding="utf-8") as f:
            values = [float(line.strip()) for line in f if line.strip()]
        return cls(values)

    def read(self, clock: EventClock) -> TempReading:
        v = self.values[min(self._i, len(self.values) - 1)]
        self._i += 1
        return TempReading(v, clock.now_ms())


def synthetic_source(frames: int, size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(frames):
        yield Tensor4(rng.uniform(0.0, 1.0, size=(1, 3, size, size)).astype(np.float32))


def dir_source(path: str, size: int):
    from PIL import Image

    names = sorted(
        n for n in os.listdir(path) if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
    )
    for n in names:
        img = Image.open(os.path.join(path, n)).convert("RGB").resize((size, size))
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        yield Tensor4(arr[None])


def _parse_temp_source(spec) -> "ConstantTempSource | ReplayTempSource":
    if isinstance(spec, str):
        if spec.startswith("constant:"):
            return ConstantTempSource(float(spec.split(":", 1)[1]))
        raise ConfigError(f"bad temp_source '{spec}' (expected constant:<C> or an object)")
    kind = spec.get("kind")
    if kind == "constant":
        return ConstantTempSource(float(spec["celsius"]))
    if kind == "file":
        return ReplayTempSource.from_file(spec["path"])
    if kind == "replay":
        return ReplayTempSource(spec["values"])
    raise ConfigError(f"unknown temp_source kind '{kind}'")


def _build_sinks(specs: list[dict]) -> list:
    sinks = []
    for s in specs:
        kind = s.get("kind")
        if kind == "file":
            sinks.append(FileSink(s["path"]))
        elif kind == "tcp":
            sinks.append(TcpSink(s["host"], int(s["port"]), float(s.get("timeout", 1.0))))
        else:
            raise ConfigError(f"unknown sink kind '{kind}'")
    return sinks


@dataclass
class PipelineSummary:
    frames_seen: int = 0
    frames_inferred: int = 0
    frames_skipped_halted: int = 0
    frames_failed: int = 0
    events: int = 0
    halts: int = 0
    resumes: int = 0
    acked: int = 0
    deadlettered: int = 0
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["per_kind"] = dict(self.per_kind)
        return d


_SENTINEL = object()


def run_pipeline(config: dict, detector=None) -> PipelineSummary:
    """Run frames through guard -> forward -> decode -> nms(0.5) ->
    person_trigger -> dispatch until the source ends.

    ``detector`` (frame -> list[Detection]) overrides the model described
    in the config; used by tests and custom deployments.
    """
    device_id = config.get("device_id", "edge-0")
    conf_thresh = float(config.get("conf_thresh", 0.25))
    clock = EventClock()
    guard = TemperatureGuard(
        threshold=float(config.get("temp_threshold", 60.0)),
        hysteresis=float(config.get("temp_hysteresis", 5.0)),
    )
    temp_source = _parse_temp_source(config.get("temp_source", "constant:40"))
    sinks = _build_sinks(config.get("sinks", []))
    dl_path = deadletter_path(config.get("deadletter"))
    class_map = dict(enumerate(config.get("class_names", BUILTIN_CLASS_NAMES)))

    input_size = config.get("input_size")
    if detector is None:
        model_cfg = config.get("model")
        if not model_cfg:
            raise ConfigError("pipeline config needs a 'model' section (or an injected detector)")
        _, graph = resolve_config(model_cfg["config"])
        weights = model_cfg.get("weights", "random:0")
        if weights.startswith("random:"):
            model = build_model(graph).init_random(int(weights.split(":", 1)[1]))
        else:
            manifest, blob = read_weights(weights)
            model = load_weights(graph, manifest, blob)
        input_size = input_size or graph.input_size

        def detector(frame: Tensor4) -> list[Detection]:
            return nms(decode(model.forward(frame), conf_thresh), 0.5)

    src_cfg = config.get("source", {"kind": "synthetic", "frames": 1})
    if src_cfg.get("kind") == "synthetic":
        size = src_cfg.get("size") or input_size
        if not size:
            raise ConfigError("synthetic source needs a size (or a model to take it from)")
        frames = synthetic_source(int(src_cfg.get("frames", 1)), size, int(src_cfg.get("seed", 0)))
    elif src_cfg.get("kind") == "dir":
        size = src_cfg.get("size") or input_size
        if not size:
            raise ConfigError("dir source needs a size (or a model to take it from)")
        frames = dir_source(src_cfg["path"], size)
    else:
        raise ConfigError(f"unknown source kind '{src_cfg.get('kind')}'")

    frame_q: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
    event_q: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
    summary = PipelineSummary()

    def source_worker():
        try:
            for frame in frames:
                frame_q.put(frame)
        finally:
            frame_q.put(_SENTINEL)

    def infer_worker():
        try:
            while True:
                frame = frame_q.get()
                if frame is _SENTINEL:
                    break
                summary.frames_seen += 1
                reading = temp_source.read(clock)
                was_halted = guard.halted
                guard.update(reading)
                if guard.halted and not was_halted:
                    summary.halts += 1
                    event_q.put(
                        PipelineEvent(
                            "halt", clock.now_ms(), device_id,
                            {"temperature_c": reading.celsius},
                        )
                    )
                elif not guard.halted and was_halted:
                    summary.resumes += 1
                    event_q.put(
                        PipelineEvent(
                            "resume", clock.now_ms(), device_id,
                            {"temperature_c": reading.celsius},
                        )
                    )
                if guard.halted:
                    summary.frames_skipped_halted += 1
                    continue
                try:
                    dets = detector(frame)
                except Exception:
                    summary.frames_failed += 1
                    log.exception("frame failed; skipping")
                    continue
                summary.frames_inferred += 1
                for ev in person_trigger(dets, class_map, device_id, clock):
                    event_q.put(ev)
        finally:
            event_q.put(_SENTINEL)

    def dispatch_worker():
        while True:
            ev = event_q.get()
            if ev is _SENTINEL:
                break
            summary.events += 1
            summary.per_kind[ev.kind] = summary.per_kind.get(ev.kind, 0) + 1
            for sink in sinks:
                ack = dispatch(ev, sink, dl_path)
                if ack is None:
                    summary.deadlettered += 1
                else:
                    summary.acked += 1

    workers = [
        threading.Thread(target=source_worker, name="edgepipe-source"),
        threading.Thread(target=infer_worker, name="edgepipe-infer"),
        threading.Thread(target=dispatch_worker, name="edgepipe-dispatch"),
    ]
    for t in workers:
        t.start()
    for t in workers:
        t.join()

    log.info(
        "pipeline done: frames=%d inferred=%d skipped=%d events=%d halts=%d resumes=%d "
        "acked=%d deadlettered=%d",
        summary.frames_seen,
        summary.frames_inferred,
        summary.frames_skipped_halted,
        summary.events,
        summary.halts,
        summary.resumes,
        summary.acked,
        summary.deadlettered,
    )
    return summary


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="edgepipe", description="Edge detection daemon")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the pipeline described by a JSON config")
    p_run.add_argument("--config", required=True, help="pipeline.json path")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    with open(args.config, "r", encoding="utf-8") as f:
        config = json.load(f)
    summary = run_pipeline(config)
    print(json.dumps(summary.to_dict(), sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
