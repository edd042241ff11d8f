"""Sequence-length scaling measurements: the selective scan against a
quadratic softmax-attention reference, plus the analytic op-count report.
"""

from __future__ import annotations

import time

import numpy as np

from .model import ModelConfig, build, mac_count, param_and_flop_report
from .ssm import selective_scan
from .tensor import Tensor

LENGTHS = (1024, 2048, 4096, 8192)


def attention_reference(q, k, v) -> np.ndarray:
    """Plain softmax(QK^T/sqrt(d))V, materializing the L x L score matrix."""
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def time_scan(length: int, d_inner: int = 4, state: int = 8, reps: int = 3,
              seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    u = Tensor(rng.normal(size=(length, d_inner)).astype(np.float32))
    delta = Tensor(rng.uniform(0.01, 0.1, (length, d_inner)).astype(np.float32))
    A = Tensor(-rng.uniform(0.5, 2.0, (d_inner, state)).astype(np.float32))
    B = Tensor(rng.normal(size=(length, state)).astype(np.float32))
    C = Tensor(rng.normal(size=(length, state)).astype(np.float32))
    D = Tensor(np.ones(d_inner, dtype=np.float32))
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        selective_scan(u, delta, A, B, C, D)
        best = min(best, time.perf_counter() - t0)
    return best


def time_attention(length: int, dim: int = 64, reps: int = 3,
                   seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(length, dim)).astype(np.float32)
    k = rng.normal(size=(length, dim)).astype(np.float32)
    v = rng.normal(size=(length, dim)).astype(np.float32)
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        attention_reference(q, k, v)
        best = min(best, time.perf_counter() - t0)
    return best


def scaling_table(lengths=LENGTHS) -> list:
    """Rows of (L, scan seconds, attention seconds, and the time ratios
    against the previous length)."""
    rows = []
    prev = None
    for length in lengths:
        scan_s = time_scan(length)
        attn_s = time_attention(length)
        scan_ratio = scan_s / prev[1] if prev else float("nan")
        attn_ratio = attn_s / prev[2] if prev else float("nan")
        rows.append((length, scan_s, attn_s, scan_ratio, attn_ratio))
        prev = rows[-1]
    return rows


def format_table(rows) -> str:
    lines = ["length\tscan_s\tattn_s\tscan_x\tattn_x"]
    for length, scan_s, attn_s, scan_x, attn_x in rows:
        lines.append(f"{length}\t{scan_s:.4f}\t{attn_s:.4f}\t"
                     f"{scan_x:.2f}\t{attn_x:.2f}")
    return "\n".join(lines)


def op_count_report() -> str:
    """Doubling the pixel count scales analytic MACs by ~2 (linear)."""
    cfg = ModelConfig.tiny()
    params, a = param_and_flop_report(build(cfg, seed=0), (64, 64))
    b = mac_count(cfg, (64, 128))
    lines = [f"params: {params}", f"macs 64x64: {a}", f"macs 64x128: {b}",
             f"pixel-doubling ratio: {b / a:.4f}"]
    return "\n".join(lines)
