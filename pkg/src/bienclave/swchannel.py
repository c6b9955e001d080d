"""Baseline channel: AES-GCM messages through OS-visible shared memory.

Nonces are ``direction byte || 3 zero bytes || 64-bit counter``. The
receiver checks the tag first, then requires the counter to be exactly the
next one expected, so dropped, replayed and reordered messages all fail.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, FreshnessFailure

CIPHER_NAME = "AES-128-GCM"
_COUNTER = struct.Struct("<Q")


def nonce_for(direction: int, counter: int) -> bytes:
    return bytes([direction & 1, 0, 0, 0]) + _COUNTER.pack(counter)


@dataclass
class UntrustedMailbox:
    """Message slots in untrusted shared memory; the OS may edit them freely."""

    slots: deque = field(default_factory=deque)

    def put(self, blob: bytes) -> None:
        self.slots.append(bytearray(blob))

    def take(self) -> bytes:
        return bytes(self.slots.popleft())

    def __len__(self) -> int:
        return len(self.slots)


class SwEndpoint:
    """One side of the encrypted channel; ``direction`` is this side's send bit."""

    def __init__(self, key: bytes, direction: int):
        self._aead = AESGCM(key)
        self.direction = direction & 1
        self.send_counter = 0
        self.recv_counter = 0

    def seal(self, payload: bytes) -> bytes:
        ctr = self.send_counter
        self.send_counter += 1
        header = bytes([self.direction]) + _COUNTER.pack(ctr)
        return header + self._aead.encrypt(nonce_for(self.direction, ctr), payload, header)

    def open(self, blob: bytes) -> bytes:
        if len(blob) < 9 + 16:
            raise AuthFailure("message too short")
        header = blob[:9]
        direction = header[0]
        (ctr,) = _COUNTER.unpack(header[1:])
        if direction != self.direction ^ 1:
            raise AuthFailure("message from the wrong direction")
        try:
            plain = self._aead.decrypt(nonce_for(direction, ctr), blob[9:], header)
        except InvalidTag:
            raise AuthFailure("authentication tag mismatch") from None
        if ctr != self.recv_counter:
            raise FreshnessFailure(self.recv_counter, ctr)
        self.recv_counter += 1
        return plain

    def send(self, mailbox: UntrustedMailbox, payload: bytes) -> None:
        mailbox.put(self.seal(payload))

    def recv(self, mailbox: UntrustedMailbox) -> bytes:
        return self.open(mailbox.take())


def endpoint_pair(key: bytes) -> tuple:
    return SwEndpoint(key, 0), SwEndpoint(key, 1)
