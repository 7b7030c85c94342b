"""Transition-aware multi-activity knowledge tracing network.

Each step feeds either a problem attempt (problem embedding joined with a
response embedding) or a lecture embedding into an LSTM-style cell. The
recurrent term of every gate uses one of four transfer matrices, picked by
the type of the previous and the current activity (QQ, QL, LQ or LL). A
logistic head scores the next problem from the hidden state.

Everything runs on batches of fixed-length chunks: row ``b`` of a batch is
one chunk, and column ``t`` its ``t``-th activity. Single-sequence helpers
(:func:`cell_step`, :func:`embed_activity`, :func:`predict`) wrap the same
code with a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ASSESSED, NON_ASSESSED, Activity, StudentSequence
from .errors import DimensionError, DomainError, ValidationError

GATES = ("i", "g", "f", "o")
TRANSITIONS = ("QQ", "LL", "QL", "LQ")
PROB_EPS = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    d_q: int = 32
    d_l: int = 32
    d_r: int = 32
    d_h: int = 32
    seq_len: int = 100
    lambda_theta: float = 0.05
    response_mode: str = "binary"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # ablation: one transfer matrix per gate shared by all four transitions
    tie_transfer: bool = False

    def __post_init__(self):
        problems = []
        for name in ("d_q", "d_l", "d_r", "d_h", "seq_len", "epochs", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                problems.append(f"{name} must be a positive integer, got {v!r}")
        if not self.lambda_theta >= 0:
            problems.append(f"lambda_theta must be >= 0, got {self.lambda_theta!r}")
        for name in ("learning_rate", "clip_norm", "adam_eps"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1), got {getattr(self, name)!r}")
        if self.response_mode not in ("binary", "numeric"):
            problems.append(f"response_mode must be 'binary' or 'numeric', got {self.response_mode!r}")
        if problems:
            raise ValidationError("; ".join(problems))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def param_shapes(hyper: Hyperparams, Q: int, L: int) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable tensor, in canonical order."""
    d_q, d_l, d_r, d_h = hyper.d_q, hyper.d_l, hyper.d_r, hyper.d_h
    shapes: dict[str, tuple[int, ...]] = {
        "A_q": (Q, d_q),
        "A_l": (L, d_l),
        "A_r": (2, d_r) if hyper.response_mode == "binary" else (d_r,),
    }
    for g in GATES:
        shapes[f"V_{g}Q"] = (d_q + d_r, d_h)
        shapes[f"V_{g}L"] = (d_l, d_h)
        if hyper.tie_transfer:
            shapes[f"W_{g}"] = (d_h, d_h)
        else:
            for tr in TRANSITIONS:
                shapes[f"W_{g}_{tr}"] = (d_h, d_h)
        shapes[f"b_{g}"] = (d_h,)
    shapes["W_p"] = (d_h + d_q,)
    shapes["b_p"] = ()
    return shapes


class ModelParams:
    """Named learnable tensors plus the vocabulary sizes they were built for."""

    def __init__(self, tensors: dict[str, Tensor], hyper: Hyperparams, Q: int, L: int):
        expected = param_shapes(hyper, Q, L)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ValidationError(f"parameter names do not match the model layout: {sorted(missing)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.tensors = tensors
        self.hyper = hyper
        self.Q = Q
        self.L = L

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], hyper: Hyperparams, Q: int, L: int) -> "ModelParams":
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(tensors, hyper, Q, L)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def transfer(self, gate: str, transition: str) -> Tensor:
        if self.hyper.tie_transfer:
            return self.tensors[f"W_{gate}"]
        return self.tensors[f"W_{gate}_{transition}"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.value[...] = arrays[k]

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays(), self.hyper, self.Q, self.L)

    def zero_grad(self) -> None:
        ad.zero_grad(self.tensors.values())

    def squared_norm(self) -> float:
        return float(sum(np.sum(t.value ** 2) for t in self.tensors.values()))


class TransitionIndicators(NamedTuple):
    s_QQ: int
    s_QL: int
    s_LQ: int
    s_LL: int

    @property
    def active(self) -> str:
        for name, v in zip(("QQ", "QL", "LQ", "LL"), self):
            if v:
                return name
        raise AssertionError("no active transition")


def transition_indicators(d_prev: int, d_curr: int) -> TransitionIndicators:
    if d_prev not in (0, 1) or d_curr not in (0, 1):
        raise DomainError(f"activity types must be 0 or 1, got ({d_prev!r}, {d_curr!r})")
    return TransitionIndicators(
        s_QQ=(1 - d_curr) * (1 - d_prev),
        s_QL=d_curr * (1 - d_prev),
        s_LQ=(1 - d_curr) * d_prev,
        s_LL=d_curr * d_prev,
    )


class CellState(NamedTuple):
    h: Tensor
    m: Tensor


def zero_state(d_h: int, batch: int | None = None) -> CellState:
    shape = (d_h,) if batch is None else (batch, d_h)
    return CellState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


# --- batched internals --------------------------------------------------------

def _masked(term: Tensor, weights: np.ndarray) -> Tensor:
    if weights.all():
        return term
    return ad.mul(term, np.repeat(weights[:, None], term.shape[1], axis=1))


def _response_embedding(params: ModelParams, resp: np.ndarray) -> Tensor:
    a_r = params["A_r"]
    if params.hyper.response_mode == "binary":
        if np.any((resp != 0.0) & (resp != 1.0)):
            raise DomainError("binary response mode needs responses in {0, 1}")
        return ad.gather_rows(a_r, resp.astype(np.int64))
    if np.any((resp < 0.0) | (resp > 1.0)):
        raise DomainError("numeric responses must lie in [0, 1]")
    return ad.matmul(Tensor(resp[:, None]), ad.reshape(a_r, (1, a_r.shape[0])))


def _embed_problems(params: ModelParams, qids: np.ndarray, resp: np.ndarray) -> Tensor:
    return ad.concat(ad.gather_rows(params["A_q"], qids), _response_embedding(params, resp))


def _step(params: ModelParams, xq: Tensor | None, xl: Tensor | None, is_q: np.ndarray,
          is_l: np.ndarray, trans: dict[str, np.ndarray], active: np.ndarray,
          state: CellState) -> CellState:
    """Advance a batch by one step.

    ``is_q``/``is_l`` select the input map per row, ``trans`` maps each
    transition name to its per-row indicator, ``active`` is zero on padding
    rows, whose state is carried over unchanged.
    """
    h, m = state
    batch = h.shape[0]
    # rows sharing one tensor (tied ablation) collapse into a single product
    groups: dict[int, tuple[str, np.ndarray]] = {}
    pre = {}
    for g in GATES:
        groups.clear()
        for tr in TRANSITIONS:
            w = trans[tr]
            if not w.any():
                continue
            key = id(params.transfer(g, tr))
            if key in groups:
                groups[key] = (groups[key][0], groups[key][1] + w)
            else:
                groups[key] = (tr, w)
        terms = []
        if xq is not None:
            terms.append(_masked(ad.matmul(xq, params[f"V_{g}Q"]), is_q))
        if xl is not None:
            terms.append(_masked(ad.matmul(xl, params[f"V_{g}L"]), is_l))
        for tr, w in groups.values():
            terms.append(_masked(ad.matmul(h, params.transfer(g, tr)), w))
        terms.append(ad.broadcast_rows(params[f"b_{g}"], batch))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        pre[g] = total

    i_t = ad.sigmoid(pre["i"])
    g_t = ad.tanh(pre["g"])
    f_t = ad.sigmoid(pre["f"])
    o_t = ad.sigmoid(pre["o"])
    m_new = f_t * m + i_t * g_t
    h_new = o_t * ad.tanh(m_new)
    if not active.all():
        keep = np.repeat((1.0 - active)[:, None], h.shape[1], axis=1)
        use = 1.0 - keep
        h_new = ad.mul(h_new, use) + ad.mul(h, keep)
        m_new = ad.mul(m_new, use) + ad.mul(m, keep)
    return CellState(h_new, m_new)


def _predict_batch(params: ModelParams, h: Tensor, qids: np.ndarray) -> Tensor:
    hyper = params.hyper
    joined = ad.concat(h, ad.gather_rows(params["A_q"], qids))
    w = ad.reshape(params["W_p"], (hyper.d_h + hyper.d_q, 1))
    z = ad.reshape(ad.matmul(joined, w), (h.shape[0],))
    return ad.sigmoid(z + params["b_p"])


@dataclass
class EncodedBatch:
    """Chunks laid out as ``[batch, time]`` integer/float arrays."""

    d: np.ndarray
    qid: np.ndarray
    lid: np.ndarray
    resp: np.ndarray
    valid: np.ndarray
    student_ids: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


def encode_batch(chunks: Sequence[StudentSequence], Q: int, L: int) -> EncodedBatch:
    if not chunks:
        raise ValidationError("cannot encode an empty batch")
    lengths = {len(c) for c in chunks}
    if len(lengths) != 1:
        raise ValidationError(f"chunks must share one length, got {sorted(lengths)}")
    B, T = len(chunks), lengths.pop()
    d = np.zeros((B, T), dtype=np.int64)
    qid = np.zeros((B, T), dtype=np.int64)
    lid = np.zeros((B, T), dtype=np.int64)
    resp = np.zeros((B, T))
    valid = np.zeros((B, T), dtype=bool)
    for b, chunk in enumerate(chunks):
        for t, a in enumerate(chunk.activities):
            if a.is_padding:
                continue
            if a.material_type == ASSESSED:
                if not 0 <= a.material_id < Q:
                    raise ValidationError(f"student {chunk.student_id}: unknown problem id {a.material_id} (Q={Q})")
                if a.response is None:
                    raise ValidationError(f"student {chunk.student_id}: assessed activity without response")
                qid[b, t] = a.material_id
                resp[b, t] = a.response
            elif a.material_type == NON_ASSESSED:
                if not 0 <= a.material_id < L:
                    raise ValidationError(f"student {chunk.student_id}: unknown lecture id {a.material_id} (L={L})")
                lid[b, t] = a.material_id
            else:
                raise ValidationError(f"student {chunk.student_id}: invalid material type {a.material_type!r}")
            d[b, t] = a.material_type
            valid[b, t] = True
    return EncodedBatch(d, qid, lid, resp, valid, [c.student_id for c in chunks])


@dataclass
class ForwardResult:
    predictions: Tensor        # [B, T]; p_t scores activity t from h_{t-1}
    targets: np.ndarray        # [B, T]
    mask: np.ndarray           # [B, T] bool, true where a prediction is emitted
    cold_start: np.ndarray     # [B, T] bool, emissions made from the zero state
    hidden: list | None = None  # h_t after each step, when requested


def forward_batch(batch: EncodedBatch, params: ModelParams, keep_hidden: bool = False) -> ForwardResult:
    """Unroll the cell over a batch, scoring every assessed step.

    The state starts at zero. The score for step ``t`` uses the state after
    step ``t - 1`` (the zero state for ``t = 0``) and the problem of step
    ``t``. Padding neither updates the state nor emits a prediction.
    """
    B, T = batch.shape
    d_h = params.hyper.d_h
    state = zero_state(d_h, B)
    mask = batch.valid & (batch.d == ASSESSED)
    neutral = Tensor(np.full(B, 0.5))
    prev_d = batch.d[:, 0].copy()
    preds = []
    hidden = [] if keep_hidden else None
    for t in range(T):
        if mask[:, t].any():
            preds.append(_predict_batch(params, state.h, batch.qid[:, t]))
        else:
            preds.append(neutral)

        active = batch.valid[:, t]
        if active.any():
            cur = batch.d[:, t]
            act = active.astype(float)
            is_q = act * (cur == ASSESSED)
            is_l = act * (cur == NON_ASSESSED)
            dc, dp = cur.astype(float), prev_d.astype(float)
            trans = {
                "QQ": act * (1 - dc) * (1 - dp),
                "QL": act * dc * (1 - dp),
                "LQ": act * (1 - dc) * dp,
                "LL": act * dc * dp,
            }
            xq = _embed_problems(params, batch.qid[:, t], batch.resp[:, t]) if is_q.any() else None
            xl = ad.gather_rows(params["A_l"], batch.lid[:, t]) if is_l.any() else None
            state = _step(params, xq, xl, is_q, is_l, trans, act, state)
            prev_d = np.where(active, cur, prev_d)
        if keep_hidden:
            hidden.append(state.h.value.copy())

    cold = np.zeros_like(mask)
    cold[:, 0] = mask[:, 0]
    return ForwardResult(ad.stack(preds, axis=1), batch.resp.copy(), mask, cold, hidden)


def forward_sequence(seq: StudentSequence, params: ModelParams, hyper: Hyperparams | None = None):
    """Run one padded chunk; returns ``(predictions [T], targets [T], mask [T])``."""
    hyper = hyper or params.hyper
    if len(seq) != hyper.seq_len:
        raise ValidationError(f"sequence has length {len(seq)}, expected seq_len={hyper.seq_len}")
    res = forward_batch(encode_batch([seq], params.Q, params.L), params)
    return ad.reshape(res.predictions, (len(seq),)), res.targets[0], res.mask[0]


def loss(predictions: Tensor, targets, mask, params: ModelParams | None, lambda_theta: float) -> Tensor:
    """Summed binary cross-entropy over masked entries plus ``lambda * ||theta||^2``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before the logs.
    Targets may be soft (numeric responses in ``[0, 1]``).
    """
    targets = np.asarray(targets, dtype=float)
    w = np.asarray(mask, dtype=float)
    if targets.shape != predictions.shape or w.shape != predictions.shape:
        raise DimensionError(
            f"loss shape mismatch: predictions {predictions.shape}, targets {targets.shape}, mask {w.shape}")
    p = ad.clamp(predictions, PROB_EPS, 1.0 - PROB_EPS)
    ll = ad.mul(ad.log(p), targets * w) + ad.mul(ad.log(1.0 - p), (1.0 - targets) * w)
    total = -ad.sum_all(ll)
    if lambda_theta and params is not None:
        reg = None
        for t in params:
            sq = ad.sum_all(t * t)
            reg = sq if reg is None else reg + sq
        total = total + ad.scale(reg, lambda_theta)
    return total


# --- single-sequence API ------------------------------------------------------

def embed_activity(activity: Activity, params: ModelParams, mode: str | None = None) -> Tensor:
    """Input vector for one activity: problem ⊕ response, or the lecture row."""
    mode = mode or params.hyper.response_mode
    if mode != params.hyper.response_mode:
        raise DomainError(f"params were built for {params.hyper.response_mode!r} responses, not {mode!r}")
    if activity.material_type == ASSESSED:
        if not 0 <= activity.material_id < params.Q:
            raise IndexError(f"problem id {activity.material_id} out of range for Q={params.Q}")
        x = _embed_problems(params, np.array([activity.material_id]), np.array([float(activity.response)]))
    else:
        if not 0 <= activity.material_id < params.L:
            raise IndexError(f"lecture id {activity.material_id} out of range for L={params.L}")
        x = ad.gather_rows(params["A_l"], np.array([activity.material_id]))
    return ad.reshape(x, (x.shape[1],))


def cell_step(x: Tensor, d_prev: int, d_curr: int, state: CellState, params: ModelParams) -> CellState:
    """One recurrent update for a single student."""
    ind = transition_indicators(d_prev, d_curr)
    hyper = params.hyper
    want = hyper.d_q + hyper.d_r if d_curr == ASSESSED else hyper.d_l
    if x.value.ndim != 1 or x.shape[0] != want:
        kind = "assessed" if d_curr == ASSESSED else "non-assessed"
        raise DimensionError(f"{kind} input must have length {want}, got shape {x.shape}")
    x2 = ad.reshape(x, (1, want))
    one, zero = np.ones(1), np.zeros(1)
    trans = {tr: (one if tr == ind.active else zero) for tr in TRANSITIONS}
    s = CellState(ad.reshape(state.h, (1, hyper.d_h)), ad.reshape(state.m, (1, hyper.d_h)))
    if d_curr == ASSESSED:
        out = _step(params, x2, None, one, zero, trans, one, s)
    else:
        out = _step(params, None, x2, zero, one, trans, one, s)
    return CellState(ad.reshape(out.h, (hyper.d_h,)), ad.reshape(out.m, (hyper.d_h,)))


def predict(h: Tensor, q_next_id: int, params: ModelParams) -> Tensor:
    """Probability of answering problem ``q_next_id`` correctly given state ``h``."""
    if not 0 <= q_next_id < params.Q:
        raise IndexError(f"problem id {q_next_id} out of range for Q={params.Q}")
    p = _predict_batch(params, ad.reshape(h, (1, params.hyper.d_h)), np.array([q_next_id]))
    return ad.reshape(p, ())
