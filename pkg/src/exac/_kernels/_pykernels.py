"""Pure-Python kernels: the reference implementation of the hot loops.

The compiled module _ckernels mirrors this file function for function.
Both must produce byte-identical output for identical input, including
float formatting and parsing (each side is correctly rounded, ties to
even), so keep any numeric expression here in the exact operation order
the C side uses.
"""

from __future__ import annotations

from exac.errors import ChunkConflictError

BACKEND = "python"

# Canonical row template: six fields, six decimals, newline terminated.
_ROW = b"%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n"

# 4-neighbourhood headings in degrees, half-open range [-180, 180).
_YAW = {(1, 0): 0.0, (0, 1): 90.0, (-1, 0): -180.0, (0, -1): -90.0}


def split_chunks(data, size):
    """Slice `data` into consecutive pieces of `size` bytes (last may be short)."""
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    return [data[i : i + size] for i in range(0, len(data), size)]


def merge_pairs(chunks, pairs):
    """Insert (seq, bytes) pairs into `chunks`, returning newly added bytes.

    Exact duplicates are no-ops; a seq resent with different bytes raises
    ChunkConflictError.
    """
    added = 0
    get = chunks.get
    for seq, data in pairs:
        prev = get(seq)
        if prev is None:
            chunks[seq] = data
            added += len(data)
        elif prev != data:
            raise ChunkConflictError(seq)
    return added


def join_chunks(chunks, count):
    """Concatenate chunks 0..count-1; caller guarantees they are present."""
    return b"".join([chunks[i] for i in range(count)])


def missing_seqs(chunks, count):
    return [i for i in range(count) if i not in chunks]


def encode_samples(rows):
    """Render an iterable of 6-float tuples as canonical trajectory bytes."""
    return b"".join([_ROW % row for row in rows])


def decode_samples(data):
    """Parse canonical trajectory bytes back into a list of 6-float tuples."""
    if not data:
        return []
    if not data.endswith(b"\n"):
        raise ValueError("row 0: missing trailing newline")
    out = []
    append = out.append
    for ln, line in enumerate(data[:-1].split(b"\n"), 1):
        parts = line.split(b",")
        if len(parts) != 6:
            raise ValueError(f"row {ln}: expected 6 fields, got {len(parts)}")
        try:
            append(
                (
                    float(parts[0]),
                    float(parts[1]),
                    float(parts[2]),
                    float(parts[3]),
                    float(parts[4]),
                    float(parts[5]),
                )
            )
        except ValueError:
            raise ValueError(f"row {ln}: non-numeric field") from None
    return out


def interpolate_track(path, period_s, speed):
    """Sample a grid path at fixed period, moving `speed` cells per second.

    `path` is a list of (x, y) integer cells, each step to a 4-neighbour.
    Samples are (t, x, y, z, yaw, pitch) with z=0, pitch=0 and yaw facing
    the current movement direction.  The final sample lands exactly on the
    last cell.
    """
    n = len(path)
    if n == 0:
        return []
    if n == 1:
        x0, y0 = path[0]
        return [(0.0, float(x0), float(y0), 0.0, 0.0, 0.0)]
    total = float(n - 1)
    rows = []
    append = rows.append
    k = 0
    while True:
        t = k * period_s
        d = t * speed
        if d >= total:
            break
        i = int(d)
        frac = d - i
        ax, ay = path[i]
        bx, by = path[i + 1]
        dx = bx - ax
        dy = by - ay
        append((t, ax + dx * frac, ay + dy * frac, 0.0, _YAW[(dx, dy)], 0.0))
        k += 1
    ax, ay = path[n - 2]
    bx, by = path[n - 1]
    append((total / speed, float(bx), float(by), 0.0, _YAW[(bx - ax, by - ay)], 0.0))
    return rows
