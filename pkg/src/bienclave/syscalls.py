"""System-call numbers (x86-64 numbering) and how the monitor classifies them."""

READ = 0
WRITE = 1
OPEN = 2
CLOSE = 3
MMAP = 9
SOCKET = 41
CONNECT = 42
ACCEPT = 43
SENDTO = 44
RECVFROM = 45
FUTEX = 202
OPENAT = 257
# Simulator-defined: returns the address of a named POSIX semaphore object.
SEM_OPEN = 1000

NAMES = {
    READ: "read", WRITE: "write", OPEN: "open", CLOSE: "close", MMAP: "mmap",
    SOCKET: "socket", CONNECT: "connect", ACCEPT: "accept", SENDTO: "sendto",
    RECVFROM: "recvfrom", FUTEX: "futex", OPENAT: "openat", SEM_OPEN: "sem_open",
}

NETWORK = frozenset({SOCKET, CONNECT, ACCEPT, SENDTO, RECVFROM, 46, 47, 49, 50, 288})

# return value must lie in [-1, requested length]
LENGTH_RETURNING = frozenset({READ, WRITE, SENDTO, RECVFROM})
# return value is a fresh kernel descriptor (or -1)
DESCRIPTOR_RETURNING = frozenset({OPEN, OPENAT, SOCKET, ACCEPT})
# return value must be 0 or -1
STATUS_RETURNING = frozenset({CLOSE, CONNECT, FUTEX})
# return value is an address; never forwarded raw
POINTER_RETURNING = frozenset({MMAP, SEM_OPEN})
# synchronization objects that must live in the caller's private memory
SYNC_OBJECT = frozenset({FUTEX, SEM_OPEN})


def name(sysno: int) -> str:
    return NAMES.get(sysno, f"sys_{sysno}")
