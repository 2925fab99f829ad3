"""Mini-batch training and evaluation loops."""
from __future__ import annotations

import csv
import math
import sys
import time

import numpy as np

from .nn import SGD, Model, backward, forward_with_logits, softmax_xent

LOG_HEADER = ("epoch", "split", "loss", "accuracy")


def step_schedule(epoch: int, epochs: int, lr: float) -> float:
    """Learning rate for 0-based ``epoch``: drops by 10x at 60% and again at 85% of the run."""
    drops = sum(epoch >= math.ceil(f * epochs) for f in (0.6, 0.85)) if epochs > 2 else 0
    return lr * 0.1**drops


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 64) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, predicted labels) in inference mode."""
    if len(x) == 0:
        return float("nan"), float("nan"), np.zeros(0, dtype=np.int64)
    logits = model.predict(x, batch)
    loss, _ = softmax_xent(logits, y, "sum")
    pred = logits.argmax(axis=1)
    return loss / len(y), float(np.mean(pred == y)), pred


def fit(model: Model, x: np.ndarray, y: np.ndarray, epochs: int, batch: int, lr: float, momentum: float = 0.9,
        seed: int = 0, test: tuple[np.ndarray, np.ndarray] | None = None, log_path=None, verbose: bool = True):
    """Train with momentum SGD; returns the list of log rows."""
    rng = np.random.default_rng(seed)
    opt = SGD(lr, momentum)
    params = model.param_dict()
    rows = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_HEADER)
    try:
        for epoch in range(epochs):
            opt.lr = step_schedule(epoch, epochs, lr)
            order = rng.permutation(len(x))
            tot_loss, correct, seen = 0.0, 0, 0
            t0 = time.perf_counter()
            for s in range(0, len(order), batch):
                idx = order[s : s + batch]
                if len(idx) < 2:
                    continue  # batch statistics of one item are still defined, but skip the ragged tail
                logits, cache = forward_with_logits(model, x[idx], train=True)
                loss, grads = backward(model, cache, y[idx])
                opt.step(params, grads)
                tot_loss += loss * len(idx)
                correct += int(np.sum(logits.argmax(axis=1) == y[idx]))
                seen += len(idx)
            row = (epoch + 1, "train", tot_loss / max(seen, 1), correct / max(seen, 1))
            rows.append(row)
            if writer:
                writer.writerow(row)
            if test is not None:
                tl, ta, _ = evaluate(model, test[0], test[1], batch)
                rows.append((epoch + 1, "test", tl, ta))
                if writer:
                    writer.writerow(rows[-1])
            if fh:
                fh.flush()
            if verbose:
                msg = f"epoch {epoch + 1}/{epochs} lr {opt.lr:.4g} train loss {row[2]:.4f} acc {row[3]:.4f}"
                if test is not None:
                    msg += f" test loss {rows[-1][2]:.4f} acc {rows[-1][3]:.4f}"
                print(f"{msg} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr, flush=True)
    finally:
        if fh:
            fh.close()
    return rows
