"""LSTM anomaly filter: sequence prediction over window mismatch rates.

Threshold detectors keep alerting on recurring benign mismatch patterns.
The filter here learns to *predict* the next aggregation window's mismatch
rate r_{t+1} = 1 - X_{t+1}/W from the rate history, and alerts only on
one-sided prediction error: observing more mismatches than predicted by
more than a calibrated threshold tau.  Because the model keeps taking
gradient steps during detection, a surprising pattern that recurs becomes
predictable and its alerts die out, while a genuine attack onset stays
surprising at the moment it begins.

The LSTM cell is implemented from scratch (numpy only): gradients are
exact and finite-difference checkable, and fixed seeds give bit-identical
models.  Plain clipped SGD throughout, no adaptive optimizer.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .detectors import Verdict, WindowSample

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


@dataclass
class LstmParams:
    """Weights of a single LSTM cell plus a scalar output head.

    ``w`` stacks the four gate weight matrices over the concatenated
    [input, hidden] vector, rows ordered input gate / forget gate /
    candidate / output gate; ``b`` stacks the matching biases.  ``w_out``
    and ``b_out`` project the hidden state to one predicted mismatch rate
    (squashed through a logistic sigmoid, so predictions live in (0, 1)).
    """

    w: np.ndarray       # (4H, I+H)
    b: np.ndarray       # (4H,)
    w_out: np.ndarray   # (H,)
    b_out: float

    @property
    def hidden_size(self) -> int:
        return self.w.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.w.shape[1] - self.hidden_size

    # Gate views, in storage order.
    @property
    def w_input_gate(self) -> np.ndarray:
        h = self.hidden_size
        return self.w[0:h]

    @property
    def w_forget_gate(self) -> np.ndarray:
        h = self.hidden_size
        return self.w[h : 2 * h]

    @property
    def w_candidate(self) -> np.ndarray:
        h = self.hidden_size
        return self.w[2 * h : 3 * h]

    @property
    def w_output_gate(self) -> np.ndarray:
        h = self.hidden_size
        return self.w[3 * h : 4 * h]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmParams":
        if input_size < 1 or hidden_size < 1:
            raise ValueError("input_size and hidden_size must be >= 1")
        return cls(
            w=np.zeros((4 * hidden_size, input_size + hidden_size)),
            b=np.zeros(4 * hidden_size),
            w_out=np.zeros(hidden_size),
            b_out=0.0,
        )

    @classmethod
    def random(cls, input_size: int, hidden_size: int,
               rng: np.random.Generator) -> "LstmParams":
        """Small random init; forget-gate biases start at +1 so early cell
        state is retained rather than forgotten."""
        p = cls.zeros(input_size, hidden_size)
        scale = 1.0 / math.sqrt(input_size + hidden_size)
        p.w = rng.normal(0.0, scale, size=p.w.shape)
        p.b[hidden_size : 2 * hidden_size] = 1.0
        p.w_out = rng.normal(0.0, 1.0 / math.sqrt(hidden_size), size=hidden_size)
        return p

    def copy(self) -> "LstmParams":
        return LstmParams(self.w.copy(), self.b.copy(), self.w_out.copy(), self.b_out)

    def to_vector(self) -> np.ndarray:
        """Flatten in the documented order: w (row-major), b, w_out, b_out."""
        return np.concatenate([self.w.ravel(), self.b, self.w_out, [self.b_out]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, input_size: int,
                    hidden_size: int) -> "LstmParams":
        h4 = 4 * hidden_size
        cols = input_size + hidden_size
        expected = h4 * cols + h4 + hidden_size + 1
        if vec.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {vec.shape}")
        w_end = h4 * cols
        return cls(
            w=vec[:w_end].reshape(h4, cols).copy(),
            b=vec[w_end : w_end + h4].copy(),
            w_out=vec[w_end + h4 : w_end + h4 + hidden_size].copy(),
            b_out=float(vec[-1]),
        )

    def all_finite(self) -> bool:
        return (np.isfinite(self.w).all() and np.isfinite(self.b).all()
                and np.isfinite(self.w_out).all() and math.isfinite(self.b_out))


class LstmState(NamedTuple):
    """Cell state and hidden state vectors."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


class _StepCache(NamedTuple):
    z: np.ndarray
    gi: np.ndarray
    gf: np.ndarray
    gg: np.ndarray
    go: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray
    y: float


def _forward_step(params: LstmParams, c: np.ndarray, h: np.ndarray,
                  x: np.ndarray) -> _StepCache:
    hs = params.hidden_size
    z = np.concatenate([x, h])
    acts = params.w @ z + params.b
    gi = sigmoid(acts[0:hs])
    gf = sigmoid(acts[hs : 2 * hs])
    gg = np.tanh(acts[2 * hs : 3 * hs])
    go = sigmoid(acts[3 * hs : 4 * hs])
    c_new = gf * c + gi * gg
    tanh_c = np.tanh(c_new)
    h_new = go * tanh_c
    y = float(sigmoid(params.w_out @ h_new + params.b_out))
    return _StepCache(z, gi, gf, gg, go, c, c_new, tanh_c, h_new, y)


def _as_input(x, input_size: int) -> np.ndarray:
    vec = np.atleast_1d(np.asarray(x, dtype=float))
    if vec.shape != (input_size,):
        raise ValueError(f"input shape {vec.shape} != ({input_size},)")
    if not np.isfinite(vec).all():
        raise ValueError(f"non-finite input {vec}")
    return vec


def lstm_forward(params: LstmParams, state: LstmState, x) -> tuple[LstmState, float]:
    """One gated update step; returns the new state and the predicted rate.

    Gates use the logistic sigmoid, the candidate uses tanh:
    c' = f*c + i*g,  h' = o*tanh(c'),  y = sigmoid(w_out . h' + b_out).
    """
    vec = _as_input(x, params.input_size)
    hs = params.hidden_size
    if state.c.shape != (hs,) or state.h.shape != (hs,):
        raise ValueError(
            f"state shapes {state.c.shape}/{state.h.shape} != ({hs},)")
    cache = _forward_step(params, state.c, state.h, vec)
    return LstmState(cache.c, cache.h), cache.y


def forward_sequence(params: LstmParams, state: LstmState,
                     xs: Sequence) -> tuple[LstmState, np.ndarray, list[_StepCache]]:
    """Run the cell over a sequence, keeping per-step caches for backprop."""
    caches = []
    c, h = state.c, state.h
    for x in xs:
        cache = _forward_step(params, c, h, _as_input(x, params.input_size))
        caches.append(cache)
        c, h = cache.c, cache.h
    ys = np.array([cc.y for cc in caches])
    return LstmState(c, h), ys, caches


def lstm_backward(params: LstmParams, caches: Sequence[_StepCache],
                  targets: Sequence[float]) -> LstmParams:
    """Exact gradients of the total squared prediction error.

    The loss is sum_t (y_t - target_t)^2 over the cached span; gradients
    are truncated at the span boundary (the entry state is a constant).
    Returns a parameter-shaped gradient container.
    """
    if len(caches) != len(targets):
        raise ValueError(f"{len(caches)} cached steps vs {len(targets)} targets")
    hs = params.hidden_size
    isz = params.input_size
    grads = LstmParams.zeros(isz, hs)
    dh_next = np.zeros(hs)
    dc_next = np.zeros(hs)
    for t in range(len(caches) - 1, -1, -1):
        cc = caches[t]
        dy = 2.0 * (cc.y - targets[t])
        dlin = dy * cc.y * (1.0 - cc.y)
        grads.w_out += dlin * cc.h
        grads.b_out += dlin
        dh = dlin * params.w_out + dh_next
        dgo = dh * cc.tanh_c
        dc = dh * cc.go * (1.0 - cc.tanh_c ** 2) + dc_next
        dgf = dc * cc.c_prev
        dgi = dc * cc.gg
        dgg = dc * cc.gi
        dc_next = dc * cc.gf
        da = np.concatenate([
            dgi * cc.gi * (1.0 - cc.gi),
            dgf * cc.gf * (1.0 - cc.gf),
            dgg * (1.0 - cc.gg ** 2),
            dgo * cc.go * (1.0 - cc.go),
        ])
        grads.w += np.outer(da, cc.z)
        grads.b += da
        dh_next = params.w.T @ da
        dh_next = dh_next[isz:]
    return grads


def sequence_loss(ys: np.ndarray, targets: np.ndarray) -> float:
    diff = np.asarray(ys) - np.asarray(targets)
    return float(np.dot(diff, diff))


def _clip_gradients(grads: LstmParams, max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(
        float(np.sum(grads.w ** 2)) + float(np.sum(grads.b ** 2))
        + float(np.sum(grads.w_out ** 2)) + grads.b_out ** 2
    )
    if total > max_norm:
        scale = max_norm / total
        grads.w *= scale
        grads.b *= scale
        grads.w_out *= scale
        grads.b_out *= scale


def _sgd_step(params: LstmParams, grads: LstmParams, lr: float,
              clip_norm: float) -> None:
    _clip_gradients(grads, clip_norm)
    params.w -= lr * grads.w
    params.b -= lr * grads.b
    params.w_out -= lr * grads.w_out
    params.b_out -= lr * grads.b_out


@dataclass
class LafConfig:
    """Training hyperparameters for the anomaly filter."""

    hidden_size: int = 32
    epochs: int = 60
    learning_rate: float = 0.1
    bptt_len: int = 16
    seed: int = 0
    online_rate: float = 0.05
    tau_margin_stds: float = 1.0
    clip_norm: float = 1.0
    input_size: int = 1


@dataclass
class LafModel:
    """A trained anomaly filter: LSTM parameters plus the alert threshold.

    ``tau`` is the one-sided prediction-error threshold calibrated on the
    training sequence; ``online_rate`` is the SGD step size applied after
    every detection window; ``bptt_len`` bounds both offline truncation and
    the online replay span.
    """

    params: LstmParams
    tau: float
    online_rate: float
    bptt_len: int
    seed: int
    clip_norm: float = 1.0
    epoch_losses: list[float] = field(default_factory=list)
    loss_monotone: bool = True

    @property
    def hidden_size(self) -> int:
        return self.params.hidden_size

    @property
    def input_size(self) -> int:
        return self.params.input_size

    def copy(self) -> "LafModel":
        dup = copy.copy(self)
        dup.params = self.params.copy()
        dup.epoch_losses = list(self.epoch_losses)
        return dup


def rates_from_samples(samples: Iterable[WindowSample]) -> np.ndarray:
    return np.array([s.mismatch_rate for s in samples], dtype=float)


def train_laf(samples: Sequence[WindowSample] | np.ndarray,
              config: LafConfig | None = None) -> LafModel:
    """Train the filter to predict the next window's mismatch rate.

    Inputs are the rates r_t = 1 - X_t/W; the model learns r_{t+1} from
    r_0..r_t by truncated backpropagation through time with clipped SGD.
    After training, tau is set to the largest one-sided prediction error
    over the training sequence plus a margin (default: one standard
    deviation of that error), so the training data itself never alerts.
    """
    if config is None:
        config = LafConfig()
    rates = (np.asarray(samples, dtype=float) if isinstance(samples, np.ndarray)
             else rates_from_samples(samples))
    if rates.ndim != 1 or len(rates) < 2:
        raise ValueError("need at least 2 window samples to train")
    if not np.isfinite(rates).all():
        raise ValueError("non-finite mismatch rates")
    inputs, targets = rates[:-1], rates[1:]

    rng = np.random.default_rng(config.seed)
    params = LstmParams.random(config.input_size, config.hidden_size, rng)
    epoch_losses = []
    for _ in range(config.epochs):
        state = LstmState.zeros(config.hidden_size)
        total = 0.0
        for start in range(0, len(inputs), config.bptt_len):
            xs = inputs[start : start + config.bptt_len]
            ts = targets[start : start + config.bptt_len]
            state, ys, caches = forward_sequence(params, state, xs)
            total += sequence_loss(ys, ts)
            grads = lstm_backward(params, caches, ts)
            _sgd_step(params, grads, config.learning_rate, config.clip_norm)
        epoch_losses.append(total / len(inputs))

    monotone = _final_quartile_nonincreasing(epoch_losses)
    if not monotone:
        log.warning("training loss not non-increasing over the final quartile "
                    "of epochs; consider a lower learning rate or more epochs")

    # Calibration pass with frozen parameters.
    _, ys, _ = forward_sequence(params, LstmState.zeros(config.hidden_size), inputs)
    err = np.maximum(0.0, targets - ys)
    tau = float(err.max() + config.tau_margin_stds * err.std())
    return LafModel(
        params=params,
        tau=tau,
        online_rate=config.online_rate,
        bptt_len=config.bptt_len,
        seed=config.seed,
        clip_norm=config.clip_norm,
        epoch_losses=epoch_losses,
        loss_monotone=monotone,
    )


def _final_quartile_nonincreasing(losses: Sequence[float]) -> bool:
    if len(losses) < 4:
        return True
    tail = losses[-(len(losses) // 4 + 1):]
    return all(b <= a * (1.0 + 1e-9) for a, b in zip(tail, tail[1:]))


@dataclass
class LafState:
    """Per-stream detection state.

    Carries the running LSTM state, the last prediction (None before the
    first window), and a replay buffer of recent rates with the LSTM state
    at its entry, used for the online gradient step.
    """

    lstm: LstmState
    last_pred: float | None
    history: deque
    entry: LstmState

    @classmethod
    def initial(cls, model: LafModel) -> "LafState":
        zeros = LstmState.zeros(model.hidden_size)
        return cls(lstm=zeros, last_pred=None,
                   history=deque(maxlen=model.bptt_len + 1), entry=zeros)


def laf_step(model: LafModel, state: LafState,
             sample: WindowSample) -> tuple[Verdict, LafState, LafModel]:
    """Score one window, take one online gradient step, advance the state.

    The anomaly score is max(0, r_t - predicted): only more mismatches than
    predicted count.  The verdict is anomalous iff the score exceeds tau.
    The online step runs on every window, alert or not, over the recent
    history span, so recurring surprises become predicted and stop
    alerting.  The model instance is updated in place and returned.
    """
    r = sample.mismatch_rate
    raw = 0.0 if state.last_pred is None else max(0.0, r - state.last_pred)
    verdict = Verdict(normal=raw <= model.tau, score=raw - model.tau,
                      t=sample.t, origin=sample.origin)

    # Slide the replay buffer; its entry state advances by one step when
    # the oldest rate falls out.
    if len(state.history) == state.history.maxlen:
        oldest = state.history[0]
        advanced, _ = lstm_forward(model.params, state.entry, oldest)
        state.entry = advanced
    state.history.append(r)

    if model.online_rate > 0.0 and len(state.history) >= 2:
        seq = list(state.history)
        _, _, caches = forward_sequence(model.params, state.entry, seq[:-1])
        grads = lstm_backward(model.params, caches, seq[1:])
        _sgd_step(model.params, grads, model.online_rate, model.clip_norm)

    new_lstm, pred = lstm_forward(model.params, state.lstm, r)
    state.lstm = new_lstm
    state.last_pred = pred
    return verdict, state, model


def run_laf(model: LafModel, samples: Iterable[WindowSample],
            state: LafState | None = None) -> tuple[list[Verdict], LafModel]:
    """Fold the filter over a window stream.

    Works on a copy of the model, so the trained artifact can be reused
    across runs; the evolved copy is returned alongside the verdicts.
    """
    live = model.copy()
    st = LafState.initial(live) if state is None else state
    verdicts = []
    for sample in samples:
        verdict, st, live = laf_step(live, st, sample)
        verdicts.append(verdict)
    return verdicts, live


# -- persistence ----------------------------------------------------------------

def save_laf(model: LafModel, path) -> None:
    """Write the model: one JSON header line, then the flat little-endian
    float64 parameter array (w row-major, b, w_out, b_out)."""
    header = {
        "format": "ngramwatch-laf",
        "version": MODEL_FORMAT_VERSION,
        "input_size": model.input_size,
        "hidden_size": model.hidden_size,
        "tau": model.tau,
        "online_rate": model.online_rate,
        "bptt_len": model.bptt_len,
        "seed": model.seed,
        "clip_norm": model.clip_norm,
    }
    vec = model.params.to_vector().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(vec.tobytes())


def load_laf(path) -> LafModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "ngramwatch-laf":
            raise ValueError(f"{path}: not an anomaly-filter model file")
        if header.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model version {header.get('version')}")
        vec = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    params = LstmParams.from_vector(vec, header["input_size"], header["hidden_size"])
    return LafModel(
        params=params,
        tau=header["tau"],
        online_rate=header["online_rate"],
        bptt_len=header["bptt_len"],
        seed=header["seed"],
        clip_norm=header["clip_norm"],
    )
