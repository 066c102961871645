"""Two-phase training: backbone next-token pre-training, then gist-side
training against the per-sub-segment objective with the backbone frozen.

Also houses the synthetic corpora (repetition and needle probes) and the
adaptive-moment optimizer.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor, backward, cross_entropy, no_grad, scale, add
from .compressor import CompressConfig, CompressionSession, compress_step, compress_document, generate
from .model import TEXT, ParameterSet, causal_layout, encode_window
from .segmenter import SegmentPlan, build_plan


@dataclass
class TrainConfig:
    phase: str = "gist"
    lr: float = 3e-4
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    corpus: Optional[str] = None
    tau: float = 4.0
    segment_len: int = 128
    lambda_ent: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.phase not in ("backbone", "gist"):
            raise ValueError(f"unknown training phase {self.phase!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size >= 1")

    def compress_config(self) -> CompressConfig:
        return CompressConfig(lambda_ent=self.lambda_ent, tau=self.tau,
                              segment_len=self.segment_len)


class Adam:
    """Adaptive-moment optimizer over a named tensor set."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# corpora


def make_repetition_corpus(count: int, prefix_len: int, seed: int) -> list[np.ndarray]:
    """Documents of the form prefix + exact copy, prefix drawn uniformly
    over the byte vocabulary."""
    if prefix_len < 2:
        raise ValueError("prefix must span at least two tokens")
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(count):
        prefix = rng.integers(0, 256, size=prefix_len, dtype=np.int64)
        docs.append(np.concatenate([prefix, prefix]))
    return docs


@dataclass
class NeedleSample:
    doc: np.ndarray
    query: np.ndarray
    value: np.ndarray
    depth: float


NEEDLE_MARKER = b"##SECRET="
NEEDLE_TAIL = b"##"
NEEDLE_VALUE_LEN = 8


def make_needle_corpus(count: int, haystack_len: int, depths, seed: int) -> list[NeedleSample]:
    """Lowercase-filler haystacks with one uppercase key-value needle each.

    The query is the needle marker; recovering the value means generating
    its uppercase letters right after the marker.
    """
    depths = [float(d) for d in depths]
    for d in depths:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"needle depth must lie in [0, 1], got {d}")
    rng = np.random.default_rng(seed)
    lower = np.arange(ord("a"), ord("z") + 1)
    upper = np.arange(ord("A"), ord("Z") + 1)
    samples = []
    for depth in depths:
        for _ in range(count):
            value = rng.choice(upper, size=NEEDLE_VALUE_LEN)
            needle = np.concatenate([
                np.frombuffer(NEEDLE_MARKER, dtype=np.uint8).astype(np.int64),
                value,
                np.frombuffer(NEEDLE_TAIL, dtype=np.uint8).astype(np.int64)])
            if haystack_len < needle.size:
                raise ValueError("haystack shorter than the needle")
            filler = rng.choice(lower, size=haystack_len - needle.size)
            at = int(round(depth * (haystack_len - needle.size)))
            doc = np.concatenate([filler[:at], needle, filler[at:]]).astype(np.int64)
            query = np.frombuffer(NEEDLE_MARKER, dtype=np.uint8).astype(np.int64)
            samples.append(NeedleSample(doc, query, value.astype(np.int64), depth))
    return samples


def save_corpus(path, docs: list[np.ndarray]) -> None:
    """JSONL, one document per line, bytes carried as base64."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            raw = np.asarray(doc, dtype=np.uint8).tobytes()
            fh.write(json.dumps({"bytes_b64": base64.b64encode(raw).decode("ascii")}))
            fh.write("\n")


def load_corpus(path) -> list[np.ndarray]:
    """UTF-8 text (one document) or JSONL with "text" or "bytes_b64" docs."""
    p = Path(path)
    if not p.exists():
        raise OSError(f"corpus file not found: {path}")
    docs: list[np.ndarray] = []
    if p.suffix == ".jsonl":
        for i, line in enumerate(p.read_text(encoding="utf-8").splitlines()):
            if not line.strip():
                continue
            row = json.loads(line)
            if "bytes_b64" in row:
                raw = base64.b64decode(row["bytes_b64"])
            elif "text" in row:
                raw = row["text"].encode("utf-8")
            else:
                raise OSError(f"corpus line {i + 1} lacks both 'text' and 'bytes_b64'")
            docs.append(np.frombuffer(raw, dtype=np.uint8).astype(np.int64))
    else:
        raw = p.read_bytes()
        docs.append(np.frombuffer(raw, dtype=np.uint8).astype(np.int64))
    docs = [d for d in docs if d.size]
    if not docs:
        raise OSError(f"corpus is empty: {path}")
    return docs


def _validate_corpus(docs: list[np.ndarray], gist_id: int) -> None:
    if not docs:
        raise OSError("corpus is empty")
    for i, d in enumerate(docs):
        if d.size and d.max() >= gist_id:
            raise ValueError(f"corpus document {i} contains the reserved gist id")


# ---------------------------------------------------------------------------
# objectives


def gist_loss(model: ParameterSet, tokens, config: CompressConfig,
              plan: SegmentPlan | None = None) -> Tensor:
    """Mean next-token NLL over text positions of every sub-segment, each
    conditioned on the tree over all preceding sub-segments.

    Gist positions are masked out of the loss. Must run under an active
    Tape for gradients to flow.
    """
    session = CompressionSession(model, config)
    session.plan_turn(tokens, model, plan=plan)
    if session.planned_leaves < 2:
        raise ValueError("input too short: need at least two sub-segments")
    losses = []
    counts = []
    gist_id = model.config.gist_id
    while not session.exhausted:
        res = compress_step(session, model)
        w = len(res.window_ids) - 1
        if w < 2:
            continue
        targets = res.window_ids[1:]
        mask = [True] * (w - 1) + [False]
        assert targets[-1] == gist_id
        losses.append(cross_entropy(res.logits, targets, mask))
        counts.append(w - 1)
    total = sum(counts)
    if total == 0:
        raise ValueError("no predictable positions: all sub-segments are single tokens")
    out = scale(losses[0], counts[0] / total)
    for ce, c in zip(losses[1:], counts[1:]):
        out = add(out, scale(ce, c / total))
    return out


def position_nll(model: ParameterSet, tokens, config: CompressConfig,
                 plan: SegmentPlan | None = None) -> np.ndarray:
    """Per-document-position NLL under the gist pipeline (nan where the
    position is never a prediction target)."""
    arr = np.asarray(tokens, dtype=np.int64)
    out = np.full(arr.size, np.nan)
    with no_grad():
        session = CompressionSession(model, config)
        session.plan_turn(arr, model, plan=plan)
        turn = session.turns[0]
        while not session.exhausted:
            sub = turn.plan.subsegments[session.cursor]
            res = compress_step(session, model)
            w = len(res.window_ids) - 1
            if w < 2:
                continue
            ld = res.logits.data[:-1]
            m = ld.max(axis=1, keepdims=True)
            logz = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
            tg = np.asarray(res.window_ids[1:w], dtype=np.int64)
            nll = logz - ld[np.arange(w - 1), tg]
            out[sub.start + 1:sub.start + w] = nll
    return out


def repetition_eval(model: ParameterSet, docs: list[np.ndarray],
                    config: CompressConfig) -> dict:
    """Mean per-token NLL on the first and repeated halves of copy documents."""
    first, second = [], []
    for doc in docs:
        half = doc.size // 2
        nll = position_nll(model, doc, config)
        first.append(np.nanmean(nll[:half]))
        second.append(np.nanmean(nll[half:]))
    return {"first_half_nll": float(np.mean(first)),
            "repeated_half_nll": float(np.mean(second))}


def repetition_generation_accuracy(model: ParameterSet, docs: list[np.ndarray],
                                   config: CompressConfig, prompt_len: int = 4,
                                   keep_fraction: Optional[float] = None) -> float:
    """Compress each document's first half, then greedily regenerate the
    rest of it from a short prompt; returns mean token accuracy."""
    accs = []
    for doc in docs:
        half = doc.size // 2
        prefix = doc[:half]
        session = compress_document(prefix, model, config)
        out = generate(session, prefix[:prompt_len], half - prompt_len, model,
                       keep_fraction=keep_fraction)
        truth = prefix[prompt_len:]
        accs.append(float(np.mean(np.asarray(out) == truth)))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# training loops


def _chunk_windows(doc: np.ndarray, width: int, rng) -> np.ndarray:
    if doc.size <= width:
        return doc
    off = int(rng.integers(0, doc.size - width + 1))
    return doc[off:off + width]


def backbone_loss(model: ParameterSet, tokens) -> Tensor:
    """Plain causal LM loss over one window, no tree context."""
    ids = [int(t) for t in tokens]
    if len(ids) < 2:
        raise ValueError("window too short for next-token loss")
    layout = causal_layout(ids, [TEXT] * len(ids), n_context=0, base_position=0)
    _, logits = encode_window(model, layout, [])
    targets = ids[1:] + [0]                    # last row has no target
    mask = [True] * (len(ids) - 1) + [False]
    return cross_entropy(logits, targets, mask)


def train_backbone(model: ParameterSet, config: TrainConfig,
                   corpus: list[np.ndarray] | None = None,
                   report_path=None) -> list[dict]:
    """Ordinary next-token training of the backbone partition."""
    if corpus is None:
        corpus = load_corpus(config.corpus)
    _validate_corpus(corpus, model.config.gist_id)
    model.set_phase("backbone")
    opt = Adam(model.frozen, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    report = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        picks = rng.integers(0, len(corpus), size=config.batch_size)
        step_loss = 0.0
        for i in picks:
            window = _chunk_windows(corpus[int(i)], model.config.max_window, rng)
            with Tape():
                loss = scale(backbone_loss(model, window), 1.0 / config.batch_size)
                backward(loss)
            step_loss += loss.item() * config.batch_size
        opt.step()
        opt.zero_grad()
        report.append({"step": step, "loss": step_loss / config.batch_size,
                       "lr": config.lr,
                       "wall_ms": (time.perf_counter() - t0) * 1e3})
    _write_report(report_path, report)
    return report


def train_gist(model: ParameterSet, config: TrainConfig,
               corpus: list[np.ndarray] | None = None, report_path=None,
               stop_fn: Callable[[int, ParameterSet], bool] | None = None) -> list[dict]:
    """Train only the gist-side parameters; the backbone stays bit-frozen.

    stop_fn, when given, is polled after each step and may end training
    early (used by evaluation-driven budgets).
    """
    if corpus is None:
        corpus = load_corpus(config.corpus)
    _validate_corpus(corpus, model.config.gist_id)
    model.set_phase("gist")
    frozen_before = model.frozen_checksum()
    compress_cfg = config.compress_config()
    opt = Adam(model.trainable, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    plans: dict[int, SegmentPlan] = {}
    report = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        picks = rng.integers(0, len(corpus), size=config.batch_size)
        step_loss = 0.0
        for i in picks:
            i = int(i)
            if i not in plans:
                plans[i] = build_plan(corpus[i], compress_cfg, model)
            with Tape():
                loss = scale(gist_loss(model, corpus[i], compress_cfg, plan=plans[i]),
                             1.0 / config.batch_size)
                backward(loss)
            step_loss += loss.item() * config.batch_size
        opt.step()
        opt.zero_grad()
        report.append({"step": step, "loss": step_loss / config.batch_size,
                       "lr": config.lr,
                       "wall_ms": (time.perf_counter() - t0) * 1e3})
        if stop_fn is not None and stop_fn(step, model):
            break
    if model.frozen_checksum() != frozen_before:
        raise RuntimeError("frozen backbone changed during gist training")
    _write_report(report_path, report)
    return report


def _write_report(path, rows: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
