"""Gradient trace files: what a membership attacker observes during training.

Binary layout (little-endian)::

    b"GMIP"  u32 version  u32 n  u32 d  u32 T
    T records of: published mean (d x f64) followed by query gradient (d x f64)

The CSV alternative has the header ``step,kind,idx,value`` with ``kind`` one
of ``mean`` or ``query`` and one row per coordinate. CSV traces do not carry
the batch size, so it must be supplied when reading them.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import os
import struct

import numpy as np

from gmip.errors import TraceFormatError

__all__ = [
    "FORMAT_VERSION",
    "GradientTrace",
    "MAGIC",
    "read_trace",
    "read_trace_bytes",
    "read_trace_csv",
    "trace_to_bytes",
    "trace_to_csv",
    "write_trace",
]

MAGIC = b"GMIP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclasses.dataclass(frozen=True, eq=False)
class GradientTrace:
  """Per-step published mean gradients and one query point's gradients.

  Attributes:
    n: Batch size used for every step.
    means: Array ``(T, d)`` of published (noised) mean gradients.
    queries: Array ``(T, d)`` of the query point's gradients at each step.
  """

  n: int
  means: np.ndarray
  queries: np.ndarray

  def __post_init__(self):
    means = np.ascontiguousarray(self.means, dtype="<f8")
    queries = np.ascontiguousarray(self.queries, dtype="<f8")
    if means.ndim != 2 or means.shape != queries.shape:
      raise ValueError("means and queries must both have shape (T, d)")
    if means.shape[0] < 1 or means.shape[1] < 1:
      raise ValueError("trace needs T >= 1 and d >= 1")
    if int(self.n) != self.n or self.n < 2:
      raise ValueError(f"batch size must be an integer >= 2, got {self.n!r}")
    object.__setattr__(self, "n", int(self.n))
    object.__setattr__(self, "means", means)
    object.__setattr__(self, "queries", queries)

  @property
  def steps(self) -> int:
    return self.means.shape[0]

  @property
  def d(self) -> int:
    return self.means.shape[1]

  def __eq__(self, other):
    if not isinstance(other, GradientTrace):
      return NotImplemented
    return (self.n == other.n and np.array_equal(self.means, other.means)
            and np.array_equal(self.queries, other.queries))

  __hash__ = None  # type: ignore[assignment]


def trace_to_bytes(trace: GradientTrace) -> bytes:
  body = np.stack([trace.means, trace.queries], axis=1).astype("<f8")
  header = _HEADER.pack(MAGIC, FORMAT_VERSION, trace.n, trace.d, trace.steps)
  return header + body.tobytes()


def read_trace_bytes(data: bytes) -> GradientTrace:
  """Parses a binary trace; errors name the byte offset of the problem."""
  if len(data) < _HEADER.size:
    raise TraceFormatError(
        f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
  magic, version, n, d, steps = _HEADER.unpack_from(data, 0)
  if magic != MAGIC:
    raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
  if version != FORMAT_VERSION:
    raise TraceFormatError(f"unsupported format version {version}", 4)
  if n < 2:
    raise TraceFormatError(f"batch size {n} must be >= 2", 8)
  if d < 1:
    raise TraceFormatError("d must be >= 1", 12)
  if steps < 1:
    raise TraceFormatError("T must be >= 1", 16)
  record = 2 * d * 8
  expected = _HEADER.size + steps * record
  if len(data) < expected:
    complete = (len(data) - _HEADER.size) // record
    raise TraceFormatError(
        f"truncated body: record {complete} of {steps} is incomplete",
        _HEADER.size + complete * record)
  if len(data) > expected:
    raise TraceFormatError(
        f"{len(data) - expected} trailing bytes after the last record", expected)
  body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size,
                       count=steps * 2 * d).reshape(steps, 2, d)
  bad = np.flatnonzero(~np.isfinite(body.reshape(-1)))
  if bad.size:
    raise TraceFormatError("non-finite value in trace body",
                           _HEADER.size + 8 * int(bad[0]))
  return GradientTrace(n, body[:, 0, :].copy(), body[:, 1, :].copy())


def write_trace(trace: GradientTrace, path: str | os.PathLike) -> None:
  with open(path, "wb") as fh:
    fh.write(trace_to_bytes(trace))


def read_trace(path: str | os.PathLike, n: int | None = None) -> GradientTrace:
  """Reads a binary trace, or a CSV trace (which then needs ``n``)."""
  with open(path, "rb") as fh:
    data = fh.read()
  if data[:4] == MAGIC or not data.lstrip().startswith(b"step"):
    return read_trace_bytes(data)
  if n is None:
    raise ValueError("CSV traces need the batch size n")
  return read_trace_csv(io.StringIO(data.decode("utf-8")), n)


def trace_to_csv(trace: GradientTrace) -> str:
  out = io.StringIO()
  out.write("step,kind,idx,value\n")
  for t in range(trace.steps):
    for kind, arr in (("mean", trace.means), ("query", trace.queries)):
      for i, v in enumerate(arr[t]):
        out.write(f"{t},{kind},{i},{float(v)!r}\n")
  return out.getvalue()


def read_trace_csv(source, n: int) -> GradientTrace:
  """Parses a ``step,kind,idx,value`` trace. Errors name the byte offset of the bad row."""
  text = source.read() if hasattr(source, "read") else str(source)
  raw = text.encode("utf-8")
  starts = [0]
  for i, ch in enumerate(raw):
    if ch == 0x0A:
      starts.append(i + 1)
  reader = csv.reader(io.StringIO(text))
  try:
    header = next(reader)
  except StopIteration:
    raise TraceFormatError("empty CSV trace", 0) from None
  if [h.strip() for h in header] != ["step", "kind", "idx", "value"]:
    raise TraceFormatError("header must be step,kind,idx,value", 0)
  cells: dict[tuple[int, str, int], float] = {}
  for row in reader:
    offset = starts[min(reader.line_num - 1, len(starts) - 1)]
    if not row or all(not c.strip() for c in row):
      continue
    if len(row) != 4:
      raise TraceFormatError(f"expected 4 fields, got {len(row)}", offset)
    try:
      step, kind, idx, value = int(row[0]), row[1].strip(), int(row[2]), float(row[3])
    except ValueError:
      raise TraceFormatError(f"unparsable row {row!r}", offset) from None
    if kind not in ("mean", "query") or step < 0 or idx < 0 or not np.isfinite(value):
      raise TraceFormatError(f"invalid row {row!r}", offset)
    key = (step, kind, idx)
    if key in cells:
      raise TraceFormatError(f"duplicate entry {key}", offset)
    cells[key] = value
  if not cells:
    raise TraceFormatError("CSV trace has no data rows", len(raw))
  steps = 1 + max(k[0] for k in cells)
  d = 1 + max(k[2] for k in cells)
  if len(cells) != steps * 2 * d:
    raise TraceFormatError(
        f"incomplete trace: {len(cells)} of {steps * 2 * d} entries present", len(raw))
  means = np.empty((steps, d))
  queries = np.empty((steps, d))
  for (t, kind, i), v in cells.items():
    (means if kind == "mean" else queries)[t, i] = v
  return GradientTrace(n, means, queries)
