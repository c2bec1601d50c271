"""Synthetic activation traces and the line-delimited trace file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import SCHEMA_VERSION, ActivationTrace, ModelSpec, TraceError

# Exponent for a qwen-like hot expert (about half the tokens of a layer hit
# one expert with 8-of-64 routing). Found by sweeping generate_trace.
QWEN_LIKE_SKEW = 0.75

_STRUCTURE_STREAM = 0x5EED
_ITERATION_STREAM = 0x17E4


@dataclass(frozen=True)
class TraceGenConfig:
    model: ModelSpec
    batch: int = 512
    iterations: int = 4
    skew: float = 1.0
    affinity_strength: float = 0.3
    layer_locality: float = 0.3
    drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.iterations < 1:
            raise ValueError("batch and iterations must be >= 1")
        if self.skew < 0:
            raise ValueError("skew must be nonnegative")
        for name in ("affinity_strength", "layer_locality", "drift"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.model.experts_per_token > self.model.num_experts:
            raise ValueError("experts_per_token exceeds num_experts")


def zipf_probabilities(num_experts: int, skew: float) -> np.ndarray:
    w = np.arange(1, num_experts + 1, dtype=float) ** (-skew)
    return w / w.sum()


def layer_structure(cfg: TraceGenConfig, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Hot-expert ranking and co-activation partner table for one layer."""
    E = cfg.model.num_experts
    rng = np.random.default_rng([cfg.seed, _STRUCTURE_STREAM, layer])
    ranking = rng.permutation(E)
    # random perfect matching (the last expert partners itself when E is odd)
    order = rng.permutation(E)
    partner = np.arange(E)
    for a, b in zip(order[0::2], order[1::2]):
        partner[a], partner[b] = b, a
    return ranking, partner


def _rank_probabilities(cfg: TraceGenConfig, ranking: np.ndarray, iteration: int) -> np.ndarray:
    E = cfg.model.num_experts
    shift = int(math.floor(iteration * cfg.drift * E)) % E
    rotated = np.roll(ranking, shift)
    p = np.empty(E)
    p[rotated] = zipf_probabilities(E, cfg.skew)
    return p


def _sample_layer(rng, probs, partner, prev, cfg: TraceGenConfig) -> np.ndarray:
    B = cfg.batch
    E, e = cfg.model.num_experts, cfg.model.experts_per_token
    rows = np.arange(B)
    # Gumbel-top-k: argmax over unchosen experts samples without replacement
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    keys = logp[None, :] + rng.gumbel(size=(B, E))
    chosen_mask = np.zeros((B, E), dtype=bool)
    out = np.empty((B, e), dtype=np.int32)
    u_loc = rng.random((B, e))
    u_aff = rng.random((B, e))
    prev_order = None
    if prev is not None:
        prev_order = np.take_along_axis(prev, rng.random(prev.shape).argsort(axis=1), axis=1)

    for s in range(e):
        masked = np.where(chosen_mask, -np.inf, keys)
        pick = masked.argmax(axis=1)

        if s > 0 and cfg.affinity_strength > 0:
            cand = partner[out[:, s - 1]]
            ok = (~chosen_mask[rows, cand]) & (u_aff[:, s] < cfg.affinity_strength)
            pick = np.where(ok, cand, pick)

        if prev_order is not None and cfg.layer_locality > 0:
            free = ~chosen_mask[rows[:, None], prev_order]
            has = free.any(axis=1)
            first = prev_order[rows, free.argmax(axis=1)]
            ok = has & (u_loc[:, s] < cfg.layer_locality)
            pick = np.where(ok, first, pick)

        out[:, s] = pick
        chosen_mask[rows, pick] = True
    return out


def generate_trace(cfg: TraceGenConfig) -> ActivationTrace:
    """Seeded synthetic trace with Zipf skew, planted partners, layer locality and drift.

    Iteration ``i`` draws from its own stream seeded by ``(seed, i)``, so the
    result does not depend on the order iterations are generated in.
    """
    m = cfg.model
    if m.experts_per_token > m.num_experts:
        raise ValueError("experts_per_token exceeds num_experts")
    structure = [layer_structure(cfg, l) for l in range(m.num_layers)]
    arr = np.empty((cfg.iterations, m.num_layers, cfg.batch, m.experts_per_token), dtype=np.int32)
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, _ITERATION_STREAM, it])
        prev = None
        for l, (ranking, partner) in enumerate(structure):
            probs = _rank_probabilities(cfg, ranking, it)
            prev = _sample_layer(rng, probs, partner, prev, cfg)
            arr[it, l] = prev
    return ActivationTrace(arr, m.num_experts)


def write_trace(path, trace: ActivationTrace, extra: Optional[dict] = None) -> None:
    I, L, B, e = trace.experts.shape
    header = {"schema": SCHEMA_VERSION, "kind": "trace", "num_experts": trace.num_experts,
              "experts_per_token": e, "num_layers": L, "batch": B, "iterations": I}
    if extra:
        header.update({k: v for k, v in extra.items() if k not in header})
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for it in range(I):
            for l in range(L):
                for t, ex in enumerate(trace.experts[it, l].tolist()):
                    fh.write(f'{{"iter":{it},"layer":{l},"token":{t},"experts":{json.dumps(ex)}}}\n')


def load_trace(path) -> ActivationTrace:
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        raise TraceError("empty trace")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceError(f"line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_VERSION:
        raise TraceError(f"line 1: unsupported schema")
    try:
        E, e = int(header["num_experts"]), int(header["experts_per_token"])
        I, L, B = int(header["iterations"]), int(header["num_layers"]), int(header["batch"])
    except (KeyError, TypeError, ValueError):
        raise TraceError("line 1: header missing dimensions") from None

    arr = np.full((I, L, B, e), -1, dtype=np.int32)
    seen = np.zeros((I, L, B), dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            it, l, t = int(rec["iter"]), int(rec["layer"]), int(rec["token"])
            ex = [int(x) for x in rec["experts"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise TraceError(f"line {lineno}: malformed record") from None
        if not (0 <= it < I and 0 <= l < L and 0 <= t < B):
            raise TraceError(f"line {lineno}: index ({it},{l},{t}) outside header dimensions")
        if seen[it, l, t]:
            raise TraceError(f"line {lineno}: duplicate (iter,layer,token) key ({it},{l},{t})")
        if len(ex) != e:
            raise TraceError(f"line {lineno}: wrong expert-set size {len(ex)} (expected {e})")
        if len(set(ex)) != e:
            raise TraceError(f"line {lineno}: duplicate expert id")
        if min(ex) < 0 or max(ex) >= E:
            raise TraceError(f"line {lineno}: expert id out of range")
        arr[it, l, t] = ex
        seen[it, l, t] = True
    if not seen.all():
        missing = tuple(int(x) for x in np.argwhere(~seen)[0])
        raise TraceError(f"missing record for (iter,layer,token) {missing}")
    return ActivationTrace(arr, E)
