"""Noisy SGD on small synthetic tasks, recording what a membership attacker sees.

Random streams (layout version 1). Every stream is a Philox generator seeded
with ``SeedSequence(seed, spawn_key=(stream, index))``:

* stream 0, index = epoch: the permutation that orders the epoch's batches;
* stream 1, index = iteration: ``d`` standard normals (numpy's ziggurat
  transform) scaled by ``tau`` for the noise of that iteration.

Within an epoch the permuted indices are cut into ``N // n`` consecutive
batches; leftover examples sit that epoch out.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os

import numpy as np

from gmip.errors import DivergenceError
from gmip.glir import (
    GradientEstimate,
    clip_rows,
    estimate_distribution,
    glir_log_pvalue,
    glir_statistic,
    susceptibility,
)
from gmip.trace import GradientTrace

__all__ = [
    "STREAM_LAYOUT_VERSION",
    "SgdConfig",
    "SyntheticTask",
    "TaskKind",
    "TrainResult",
    "TrainingTrace",
    "clip_gradient",
    "load_run_config",
    "noisy_step",
    "score_probes",
    "train",
]

STREAM_LAYOUT_VERSION = 1
_SHUFFLE, _NOISE = 0, 1


def _stream(seed: int, stream: int, index: int) -> np.random.Generator:
  return np.random.Generator(
      np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream, index))))


def clip_gradient(g, C: float) -> np.ndarray:
  """Rescales ``g`` to norm ``C`` if it is longer; shorter vectors pass unchanged."""
  if not C > 0:
    raise ValueError(f"clipping norm must be > 0, got {C!r}")
  return clip_rows(np.asarray(g, dtype=float), C)


def noisy_step(gradients, C: float, tau: float, rng: np.random.Generator) -> np.ndarray:
  """Mean of per-example clipped gradients plus ``N(0, tau^2 I)``."""
  g = np.atleast_2d(np.asarray(gradients, dtype=float))
  if g.shape[0] < 1:
    raise ValueError("need at least one gradient")
  if not tau >= 0:
    raise ValueError(f"tau must be >= 0, got {tau!r}")
  mean = clip_gradient(g, C).mean(axis=0)
  if tau > 0:
    mean = mean + tau * rng.standard_normal(mean.shape)
  return mean


class TaskKind(enum.Enum):
  LINEAR = "linear_regression"
  LOGISTIC = "logistic_regression"


@dataclasses.dataclass(frozen=True, eq=False)
class SyntheticTask:
  """A teacher model generating labelled data.

  Linear regression uses ``y = x^T beta + eps`` with ``eps ~ N(0, label_noise)``
  and squared loss ``(x^T theta - y)^2 / 2``. Logistic regression draws
  ``y ~ Bernoulli(sigmoid(x^T beta))`` and uses the log loss. Features are
  standard normal.
  """

  kind: TaskKind
  feature_dim: int
  label_noise: float = 1.0
  true_params: np.ndarray | None = None

  def __post_init__(self):
    object.__setattr__(self, "kind", TaskKind(self.kind))
    if int(self.feature_dim) != self.feature_dim or self.feature_dim < 1:
      raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim!r}")
    if not self.label_noise >= 0:
      raise ValueError("label_noise must be >= 0")
    beta = (np.zeros(self.feature_dim) if self.true_params is None
            else np.asarray(self.true_params, dtype=float).reshape(-1))
    if beta.size != self.feature_dim:
      raise ValueError("true_params must have feature_dim entries")
    object.__setattr__(self, "true_params", beta)

  @classmethod
  def random(cls, kind: TaskKind | str, feature_dim: int, rng: np.random.Generator,
             label_noise: float = 1.0, scale: float = 1.0) -> SyntheticTask:
    beta = scale * rng.standard_normal(feature_dim) / math.sqrt(feature_dim)
    return cls(TaskKind(kind), feature_dim, label_noise, beta)

  def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((size, self.feature_dim))
    z = x @ self.true_params
    if self.kind is TaskKind.LINEAR:
      y = z + math.sqrt(self.label_noise) * rng.standard_normal(size)
    else:
      y = (rng.uniform(size=size) < 1.0 / (1.0 + np.exp(-z))).astype(float)
    return x, y

  def gradients(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example loss gradients, shape ``(size, d)``."""
    z = x @ params
    if self.kind is TaskKind.LINEAR:
      resid = z - y
    else:
      resid = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
    return resid[:, None] * x


@dataclasses.dataclass(frozen=True)
class SgdConfig:
  """Noisy SGD hyperparameters.

  Attributes:
    learning_rate: Step size.
    batch_size: Examples per step.
    iterations: Number of steps.
    clip: Per-example clipping norm (``inf`` disables clipping).
    tau: Standard deviation of the noise added to each mean gradient.
    seed: Seed of all random streams.
  """

  learning_rate: float
  batch_size: int
  iterations: int
  clip: float = math.inf
  tau: float = 0.0
  seed: int = 0

  def __post_init__(self):
    if not self.learning_rate >= 0 or math.isinf(self.learning_rate):
      raise ValueError("learning_rate must be finite and >= 0")
    if int(self.batch_size) != self.batch_size or self.batch_size < 1:
      raise ValueError("batch_size must be a positive integer")
    if int(self.iterations) != self.iterations or self.iterations < 1:
      raise ValueError("iterations must be a positive integer")
    if not self.clip > 0:
      raise ValueError("clip must be > 0")
    if not self.tau >= 0 or math.isinf(self.tau):
      raise ValueError("tau must be finite and >= 0")
    if self.tau > 0 and math.isinf(self.clip):
      raise ValueError("noise requires a finite clipping norm")


@dataclasses.dataclass(frozen=True, eq=False)
class TrainingTrace:
  """Everything published or probed during a run.

  Attributes:
    n: Batch size.
    means: ``(T, d)`` published noisy mean gradients.
    probe_gradients: ``(P, T, d)`` clipped gradients of the probe points at
      the parameters each step started from.
    background_gradients: ``(T, m, d)`` clipped gradients of fresh points,
      or ``None``.
  """

  n: int
  means: np.ndarray
  probe_gradients: np.ndarray
  background_gradients: np.ndarray | None = None

  def gradient_trace(self, probe: int) -> GradientTrace:
    return GradientTrace(self.n, self.means, self.probe_gradients[probe])


@dataclasses.dataclass(frozen=True, eq=False)
class TrainResult:
  params: np.ndarray
  trace: TrainingTrace


def train(task: SyntheticTask, config: SgdConfig, x: np.ndarray, y: np.ndarray, *,
          probes: tuple[np.ndarray, np.ndarray] | None = None,
          background: tuple[np.ndarray, np.ndarray] | None = None,
          init: np.ndarray | None = None) -> TrainResult:
  """Runs noisy SGD on ``(x, y)``.

  Args:
    task: Loss definition.
    config: Hyperparameters.
    x: Training features ``(N, d)``.
    y: Training labels ``(N,)``.
    probes: Optional ``(x, y)`` whose per-step gradients are recorded.
    background: Optional ``(x, y)`` pool whose per-step gradients are recorded
      for estimating the gradient distribution.
    init: Starting parameters (zeros by default).

  Raises:
    DivergenceError: If parameters become non-finite.
  """
  x = np.asarray(x, dtype=float)
  y = np.asarray(y, dtype=float)
  size, d = x.shape
  if d != task.feature_dim:
    raise ValueError("feature dimension does not match the task")
  n = config.batch_size
  if n > size:
    raise ValueError(f"batch size {n} exceeds dataset size {size}")
  per_epoch = size // n
  params = np.zeros(d) if init is None else np.array(init, dtype=float)
  steps = config.iterations
  means = np.empty((steps, d))
  probe_x = probe_y = None
  if probes is not None:
    probe_x, probe_y = (np.asarray(a, dtype=float) for a in probes)
    probe_grads = np.empty((probe_x.shape[0], steps, d))
  else:
    probe_grads = np.empty((0, steps, d))
  bg_grads = None
  if background is not None:
    bg_x, bg_y = (np.asarray(a, dtype=float) for a in background)
    bg_grads = np.empty((steps, bg_x.shape[0], d))

  order = None
  for t in range(steps):
    epoch, slot = divmod(t, per_epoch)
    if slot == 0:
      order = _stream(config.seed, _SHUFFLE, epoch).permutation(size)
    batch = order[slot * n:(slot + 1) * n]
    if probe_x is not None:
      probe_grads[:, t] = clip_rows(task.gradients(params, probe_x, probe_y), config.clip)
    if bg_grads is not None:
      bg_grads[t] = clip_rows(task.gradients(params, bg_x, bg_y), config.clip)
    g = clip_rows(task.gradients(params, x[batch], y[batch]), config.clip)
    mean = g.mean(axis=0)
    if config.tau > 0:
      mean = mean + config.tau * _stream(config.seed, _NOISE, t).standard_normal(d)
    means[t] = mean
    with np.errstate(over="ignore", invalid="ignore"):
      # Overflow is reported below as a divergence.
      params = params - config.learning_rate * mean
    if not np.all(np.isfinite(params)):
      raise DivergenceError(t)
  trace = TrainingTrace(n, means, probe_grads, bg_grads)
  return TrainResult(params, trace)


def score_probes(trace: TrainingTrace, tau2: float, ridge: float = 1e-6,
                 estimates: list[GradientEstimate] | None = None) -> np.ndarray:
  """GLiR scores (summed log p-values over steps) of every probe point.

  The gradient distribution of each step is estimated from the recorded
  background gradients unless ``estimates`` are given.
  """
  steps, d = trace.means.shape
  if estimates is None:
    if trace.background_gradients is None:
      raise ValueError("trace has no background gradients to estimate from")
    estimates = [estimate_distribution(trace.background_gradients[t], ridge)
                 for t in range(steps)]
  scores = np.zeros(trace.probe_gradients.shape[0])
  for t in range(steps):
    est = estimates[t].with_noise(trace.n, tau2)
    q = trace.probe_gradients[:, t]
    s = np.atleast_1d(glir_statistic(trace.means[t], q, est, trace.n))
    k = np.atleast_1d(susceptibility(q, est))
    scores += glir_log_pvalue(s, d, trace.n, k)
  return scores


def load_run_config(source) -> tuple[SyntheticTask, SgdConfig, int]:
  """Reads ``{"task": {...}, "sgd": {...}}`` from a JSON path, string or dict.

  The task object takes ``kind``, ``feature_dim``, ``label_noise``,
  optionally ``true_params`` and ``dataset_size``; the ``sgd`` object takes
  the :class:`SgdConfig` fields (``clip`` may be the string ``"inf"``).

  Returns:
    The task, the SGD configuration and the dataset size.
  """
  if isinstance(source, dict):
    doc = source
  elif isinstance(source, (str, os.PathLike)) and os.path.exists(source):
    with open(source, encoding="utf-8") as fh:
      doc = json.load(fh)
  else:
    doc = json.loads(source)
  t = dict(doc["task"])
  s = dict(doc["sgd"])
  size = int(t.pop("dataset_size", s["batch_size"]))
  task = SyntheticTask(TaskKind(t["kind"]), int(t["feature_dim"]),
                       float(t.get("label_noise", 1.0)), t.get("true_params"))
  if "clip" in s:
    s["clip"] = float(s["clip"])
  config = SgdConfig(**s)
  if config.batch_size > size:
    raise ValueError("batch_size exceeds dataset_size")
  return task, config, size
