"""Controllability and fidelity metrics.

Controllability follows the re-extraction protocol: the condition is
recomputed from the generated image with the same generator that built
the dataset, then compared against the input condition with a
task-appropriate metric (edge F1 / SSIM / RMSE). Subject fidelity is a
masked MSE over the subject's palette-color mask; style fidelity is the
cosine similarity of 8-bin-per-channel color histograms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import (
    ConditionPair,
    box_blur3,
    colorize_condition,
    edge_condition,
    luminance_bytes,
    sobel_edges,
)


def _as_binary(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 0]
    return img > 0


def _dilate(mask: np.ndarray, tol: int) -> np.ndarray:
    """Chebyshev-ball dilation by tol pixels."""
    if tol <= 0:
        return mask
    p = np.pad(mask, tol, mode="constant")
    out = np.zeros_like(mask)
    size = 2 * tol + 1
    for dy in range(size):
        for dx in range(size):
            out |= p[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


def edge_f1(pred: np.ndarray, ref: np.ndarray, tol: int = 1) -> float:
    """F1 of binary edge maps with tolerance-`tol` Chebyshev matching.

    A predicted pixel is a true positive if any reference pixel lies
    within Chebyshev distance tol, and symmetrically for recall. Two
    empty maps score 1; empty-vs-nonempty scores 0.
    """
    pred = _as_binary(pred)
    ref = _as_binary(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {ref.shape}")
    n_pred = int(pred.sum())
    n_ref = int(ref.sum())
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if n_pred == 0 or n_ref == 0:
        return 0.0
    precision = float((pred & _dilate(ref, tol)).sum()) / n_pred
    recall = float((ref & _dilate(pred, tol)).sum()) / n_ref
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _window_sums(x: np.ndarray, win: int) -> np.ndarray:
    """Sliding-window sums over all fully interior windows (integral image)."""
    ii = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win]


def ssim(a: np.ndarray, b: np.ndarray, win: int = 7) -> float:
    """Structural similarity on 8-bit-range grayscale, uniform window.

    C1 = (0.01 * 255)^2, C2 = (0.03 * 255)^2; the score is the mean over
    all fully interior windows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"images must be at least {win}x{win}")
    n = win * win
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_a = _window_sums(a, win) / n
    mu_b = _window_sums(b, win) / n
    e_aa = _window_sums(a * a, win) / n
    e_bb = _window_sums(b * b, win) / n
    e_ab = _window_sums(a * b, win) / n
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared error over 8-bit intensity values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def color_histogram(img: np.ndarray, bins: int = 8) -> np.ndarray:
    """Concatenated per-channel histogram (bins * 3,), unnormalized counts."""
    img = np.asarray(img)
    out = []
    for c in range(img.shape[2]):
        hist, _ = np.histogram(img[..., c], bins=bins, range=(0, 256))
        out.append(hist)
    return np.concatenate(out).astype(np.float64)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def subject_mask(condition: np.ndarray) -> np.ndarray:
    """Non-white pixels of a subject condition (shape on white)."""
    return np.any(np.asarray(condition) != 255, axis=2)


def subject_fidelity(generated: np.ndarray, condition: np.ndarray) -> float:
    """1 - masked MSE normalized to [0, 1] over the subject mask."""
    mask = subject_mask(condition)
    if not mask.any():
        return 0.0
    g = np.asarray(generated, dtype=np.float64)[mask]
    c = np.asarray(condition, dtype=np.float64)[mask]
    return 1.0 - float(np.mean((g - c) ** 2)) / 255.0**2


def inpaint_known_mask(condition: np.ndarray) -> np.ndarray:
    """Pixels outside the zeroed rectangle (palette never hits exact zero)."""
    return np.any(np.asarray(condition) != 0, axis=2)


@dataclass
class ScoreRecord:
    task: str
    metric: str
    controllability: float
    style_similarity: float
    subject_fidelity: float | None = None


def controllability(task: str, generated: np.ndarray, condition: np.ndarray):
    """(metric name, value) for a generated image against its condition.

    Re-extraction is only defined from the image alone for edge, colorize,
    deblur, and inpaint; depth uses raw luminance RMSE as a proxy, and
    subject/style use their fidelity scores.
    """
    generated = np.asarray(generated)
    condition = np.asarray(condition)
    if task == "edge":
        return "edge_f1", edge_f1(sobel_edges(generated), condition[..., 0] > 0)
    if task == "colorize":
        return "rmse", rmse(colorize_condition(generated)[..., 0], condition[..., 0])
    if task == "deblur":
        return "ssim", ssim(
            luminance_bytes(box_blur3(generated)), luminance_bytes(condition)
        )
    if task == "inpaint":
        keep = inpaint_known_mask(condition)
        g = np.asarray(generated, dtype=np.float64)[keep]
        c = np.asarray(condition, dtype=np.float64)[keep]
        return "rmse", float(np.sqrt(np.mean((g - c) ** 2)))
    if task == "depth_proxy":
        return "rmse", rmse(luminance_bytes(generated), condition[..., 0])
    if task == "subject":
        return "subject_fidelity", subject_fidelity(generated, condition)
    if task == "style":
        return "hist_cos", cosine(color_histogram(generated), color_histogram(condition))
    raise ValueError(f"unknown task {task!r}")


def proxy_scores(generated: np.ndarray, pair: ConditionPair) -> ScoreRecord:
    """Task-appropriate controllability plus fidelity proxies for one pair."""
    metric, value = controllability(pair.task, generated, pair.condition)
    style_sim = cosine(color_histogram(generated), color_histogram(pair.target))
    fid = subject_fidelity(generated, pair.condition) if pair.task == "subject" else None
    return ScoreRecord(
        task=pair.task,
        metric=metric,
        controllability=value,
        style_similarity=style_sim,
        subject_fidelity=fid,
    )


def aggregate_scores(records: list) -> list:
    """Per-task mean/std rows: (task, n, metric, mean, std)."""
    rows = []
    by_task = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r)
    for task in sorted(by_task):
        group = by_task[task]
        values = {}
        for r in group:
            values.setdefault(r.metric, []).append(r.controllability)
            values.setdefault("style_cos", []).append(r.style_similarity)
            if r.subject_fidelity is not None:
                values.setdefault("subject_fidelity", []).append(r.subject_fidelity)
        for metric in sorted(values):
            v = np.asarray(values[metric], dtype=np.float64)
            rows.append((task, len(v), metric, float(v.mean()), float(v.std())))
    return rows


def write_report(rows: list, txt_path, tsv_path) -> None:
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("task\tn\tmetric\tmean\tstd\n")
        for task, n, metric, mean, std in rows:
            fh.write(f"{task}\t{n}\t{metric}\t{mean:.6f}\t{std:.6f}\n")
    widths = (14, 6, 18, 12, 12)
    header = ("task", "n", "metric", "mean", "std")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("".join(h.ljust(w) for h, w in zip(header, widths)) + "\n")
        fh.write("-" * sum(widths) + "\n")
        for task, n, metric, mean, std in rows:
            cells = (task, str(n), metric, f"{mean:.4f}", f"{std:.4f}")
            fh.write("".join(c.ljust(w) for c, w in zip(cells, widths)) + "\n")
