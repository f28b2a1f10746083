"""Embedded durable queue with at-least-once delivery.

One append-only JSONL log per queue plus an ack sidecar. Leases live only in
memory: a consumer that dies without acking leaves its message un-acked, and
the next process to open the queue sees it again. That is the whole
at-least-once story; consumers must be idempotent.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class Message:
    offset: int
    payload: dict


class DurableQueue:
    def __init__(self, base: str | Path):
        base = Path(base)
        base.parent.mkdir(parents=True, exist_ok=True)
        self._log_path = base.with_suffix(".log")
        self._ack_path = base.with_suffix(".acks")
        self._lock = threading.Lock()
        self._messages: list[Message] = []
        self._acked: set[int] = set()
        self._leased: set[int] = set()
        if self._log_path.exists():
            with self._log_path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._messages.append(Message(rec["offset"], rec["payload"]))
        if self._ack_path.exists():
            with self._ack_path.open() as fh:
                self._acked = {int(line) for line in fh if line.strip()}
        self._log = self._log_path.open("a")
        self._acks = self._ack_path.open("a")

    def put(self, payload: dict) -> int:
        with self._lock:
            offset = len(self._messages)
            self._log.write(json.dumps({"offset": offset, "payload": payload},
                                       sort_keys=True) + "\n")
            self._log.flush()
            self._messages.append(Message(offset, payload))
            return offset

    def poll(self) -> Message | None:
        """Oldest message that is neither acked nor currently leased."""
        with self._lock:
            for msg in self._messages:
                if msg.offset not in self._acked and msg.offset not in self._leased:
                    self._leased.add(msg.offset)
                    return msg
            return None

    def ack(self, offset: int) -> None:
        with self._lock:
            if offset in self._acked:
                return
            self._acks.write(f"{offset}\n")
            self._acks.flush()
            self._acked.add(offset)
            self._leased.discard(offset)

    def release(self, offset: int) -> None:
        """Return a leased message to the pool (consumer gave up)."""
        with self._lock:
            self._leased.discard(offset)

    def depth(self) -> int:
        """Messages not yet acked (leased ones included)."""
        with self._lock:
            return len(self._messages) - len(self._acked & {m.offset for m in self._messages})

    def available(self) -> int:
        """Messages pollable right now."""
        with self._lock:
            return sum(1 for m in self._messages
                       if m.offset not in self._acked and m.offset not in self._leased)

    def close(self) -> None:
        with self._lock:
            self._log.close()
            self._acks.close()
