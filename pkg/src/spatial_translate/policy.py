"""Simultaneous READ/WRITE policy driven by oracle decoder emission streams,
with Average Lagging and corpus BLEU.

The neural recognisers are replaced by token streams that say when each
source token is recognised and when each target-CTC token becomes
available. The policy writes the next target token only when a new source
token has been recognised and the target-CTC count runs ahead of what has
already been written.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidSpec, UndefinedLatency

DEFAULT_CHUNK_S = 0.96
BLEU_EPS = 1e-9

READ = "READ"
WRITE = "WRITE"


@dataclass
class TokenStream:
    tokens: list
    emission_times: list[float]

    def __post_init__(self):
        self.tokens = list(self.tokens)
        self.emission_times = [float(t) for t in self.emission_times]
        if len(self.tokens) != len(self.emission_times):
            raise InvalidSpec("tokens and emission_times differ in length")
        if any(b < a for a, b in zip(self.emission_times, self.emission_times[1:])):
            raise InvalidSpec("emission times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.tokens)

    def count_at(self, t: float) -> int:
        return int(np.searchsorted(self.emission_times, t + 1e-12, side="right"))

    def delayed(self, delta: float) -> "TokenStream":
        return TokenStream(self.tokens, [x + delta for x in self.emission_times])


@dataclass
class OracleDecoders:
    src_ctc: TokenStream
    tgt_ctc: TokenStream
    duration_s: float | None = None
    refs: list[list[str]] = field(default_factory=list)

    @property
    def source_end(self) -> float:
        if self.duration_s is not None:
            return float(self.duration_s)
        return max(self.src_ctc.emission_times[-1] if len(self.src_ctc) else 0.0, 0.0)


@dataclass
class PolicyTrace:
    actions: list[tuple[float, str, object]]  # (time, READ|WRITE, token or None)
    chunk: float = DEFAULT_CHUNK_S

    @property
    def writes(self) -> list[tuple[float, object]]:
        return [(t, tok) for t, a, tok in self.actions if a == WRITE]

    @property
    def write_times(self) -> list[float]:
        return [t for t, _ in self.writes]

    @property
    def hypothesis(self) -> list:
        return [tok for _, tok in self.writes]


def run_policy(decoders: OracleDecoders, chunk_s: float = DEFAULT_CHUNK_S) -> PolicyTrace:
    """Simulate the policy on a chunk grid.

    Step ``k`` sees the source up to ``min((k + 1) * chunk_s, T)``. Every
    source token recognised by then licenses one WRITE; a licensed WRITE
    happens while target-CTC has more tokens than were written. Licences
    not used in a step carry over. After the source is exhausted the
    remaining target tokens are flushed one per step, each only once it is
    available.
    """
    if chunk_s <= 0:
        raise InvalidSpec("chunk size must be positive")
    src, tgt = decoders.src_ctc, decoders.tgt_ctc
    if len(src) == 0 and len(tgt) == 0:
        raise InvalidSpec("empty oracle streams")
    end = decoders.source_end
    actions: list[tuple[float, str, object]] = []
    written = 0
    k = 0
    while True:
        t = min((k + 1) * chunk_s, end)
        n_src = src.count_at(t)
        n_ctc = tgt.count_at(t)
        while written < n_src and written < n_ctc:
            actions.append((t, WRITE, tgt.tokens[written]))
            written += 1
        if t >= end:
            break
        actions.append((t, READ, None))
        k += 1
    # flush, one token per step from the end of the source
    t = end
    while written < len(tgt):
        if tgt.count_at(t) > written:
            actions.append((t, WRITE, tgt.tokens[written]))
            written += 1
        t += chunk_s
    return PolicyTrace(actions, chunk_s)


def average_lagging(trace: PolicyTrace | Sequence[float], source_duration_s: float,
                    target_len: int | None = None) -> float:
    """AL with the speech convention: mean over writes up to the first one at or
    after the source end of ``t_i - (i - 1) * T / |target|``."""
    times = trace.write_times if isinstance(trace, PolicyTrace) else [float(x) for x in trace]
    if not times:
        raise UndefinedLatency("no WRITE in trace")
    n_tgt = target_len or len(times)
    T = float(source_duration_s)
    tau = next((i + 1 for i, t in enumerate(times) if t >= T), len(times))
    lag = [times[i] - i * T / n_tgt for i in range(tau)]
    return float(sum(lag) / tau)


def tokenize(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return text.lower().split()
    return [str(t).lower() for t in text]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence[Sequence], max_n: int = 4,
                tokenizer: Callable = tokenize) -> float:
    """Corpus BLEU in [0, 100] with clipped n-gram counts pooled over the corpus,
    closest-reference brevity penalty and add-epsilon on zero n-gram matches."""
    if len(hypotheses) != len(references):
        raise InvalidSpec("one reference set per hypothesis is required")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        h = tokenizer(hyp)
        rs = [tokenizer(r) for r in refs]
        if not rs or not any(rs):
            raise InvalidSpec("empty reference")
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(h, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            # per-segment floor of one, as in the common nltk convention
            totals[n - 1] += max(1, sum(counts.values()))
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, tot in zip(matches, totals):
        p = (m if m > 0 else BLEU_EPS) / tot
        log_p += math.log(p) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return float(100.0 * bp * math.exp(log_p))


def bleu(hypothesis, references: Sequence, max_n: int = 4, tokenizer: Callable = tokenize) -> float:
    """Single-segment BLEU; ``hypothesis`` may be a TokenStream, list or string."""
    if isinstance(hypothesis, TokenStream):
        hypothesis = hypothesis.tokens
    references = [r.tokens if isinstance(r, TokenStream) else r for r in references]
    return corpus_bleu([hypothesis], [references], max_n, tokenizer)


def _stream(items) -> TokenStream:
    return TokenStream([it["tok"] for it in items], [it["t"] for it in items])


def decoders_from_dict(doc: dict) -> OracleDecoders:
    try:
        return OracleDecoders(_stream(doc["src"]), _stream(doc["tgt_ctc"]), doc.get("duration"),
                              [list(r) for r in doc.get("refs", [])])
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"malformed oracle stream: {exc}") from None


def load_streams(path) -> list[OracleDecoders]:
    """Read one oracle-stream object, or a list of them, from JSON."""
    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else doc.get("items", [doc])
    return [decoders_from_dict(d) for d in docs]


def synthetic_streams(n: int, seed: int = 0, words_per_s: float = 2.5,
                      max_duration_s: float = 8.0) -> list[OracleDecoders]:
    """Oracle streams for utterances with a speaking-rate-like token schedule."""
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(200)]
    out = []
    for _ in range(n):
        dur = float(rng.uniform(2.0, max_duration_s))
        n_src = max(1, int(rng.poisson(words_per_s * dur)))
        src_t = np.sort(rng.uniform(0.1, dur, n_src))
        n_tgt = max(1, int(round(n_src * rng.uniform(0.8, 1.2))))
        # target-CTC lags the source by a recogniser delay
        tgt_t = np.sort(np.minimum(dur, rng.uniform(0.3, dur, n_tgt) + rng.uniform(0.1, 0.6)))
        tgt = list(rng.choice(vocab, n_tgt))
        ref = [w if rng.random() > 0.15 else str(rng.choice(vocab)) for w in tgt]
        out.append(OracleDecoders(
            TokenStream(list(rng.choice(vocab, n_src)), src_t.tolist()),
            TokenStream(tgt, tgt_t.tolist()), dur, [ref]))
    return out


@dataclass
class PolicySummary:
    al_s: float
    bleu: float
    n_writes: int
    chunk_s: float


def simulate_corpus(items: list[OracleDecoders], chunk_s: float = DEFAULT_CHUNK_S) -> PolicySummary:
    traces = [run_policy(d, chunk_s) for d in items]
    als = [average_lagging(tr, d.source_end, len(d.tgt_ctc)) for tr, d in zip(traces, items)]
    hyps = [tr.hypothesis for tr in traces]
    refs = [d.refs or [d.tgt_ctc.tokens] for d in items]
    return PolicySummary(float(np.mean(als)), corpus_bleu(hyps, refs),
                         sum(len(tr.writes) for tr in traces), chunk_s)
