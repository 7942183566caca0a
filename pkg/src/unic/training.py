"""Rectified-flow training: objective, condition dropout, mixing, AdamW.

The objective is the straight-path flow: z_t = (1-t) x + t eps with
velocity target eps - x and logit-normal timestep sampling. Classifier-
free guidance is enabled by stochastic condition dropout whose rates
differ between pixel-level tasks and the other task families. The whole
loop is bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ConditionBundle, UnicModel
from .rng import make_rng
from .tensor import NonFiniteError, Parameter, Tensor

FAMILIES = ("pixel", "subject", "style")


@dataclass
class TrainSample:
    """One training record: images in [-1, 1], token ids, task labels."""

    target: np.ndarray
    condition: np.ndarray
    instruction: np.ndarray
    prompt: np.ndarray
    task: str
    family: str

    def __post_init__(self):
        if self.target.shape != self.condition.shape:
            raise ValueError("target/condition extents differ")
        if self.instruction.size == 0:
            raise ValueError("instruction token ids must be nonempty")


@dataclass
class DropoutSpec:
    """Condition dropout probabilities for classifier-free guidance.

    Pixel-level tasks drop only the text prompt. Other families sample
    three mutually exclusive events in order: drop text, drop both the
    instruction and the condition image, drop all three.
    """

    p_drop_txt_pixel: float = 0.15
    p_drop_txt: float = 0.05
    p_drop_ist_con: float = 0.05
    p_drop_all: float = 0.05

    def __post_init__(self):
        for name in ("p_drop_txt_pixel", "p_drop_txt", "p_drop_ist_con", "p_drop_all"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.p_drop_txt + self.p_drop_ist_con + self.p_drop_all > 1.0:
            raise ValueError("non-pixel dropout probabilities exceed 1")


@dataclass
class MixtureSpec:
    """Sampling weights per task family."""

    pixel: float = 0.4
    subject: float = 0.5
    style: float = 0.1

    def __post_init__(self):
        w = self.weights
        if any(x < 0 for x in w):
            raise ValueError("mixture weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(w)}")

    @property
    def weights(self):
        return (self.pixel, self.subject, self.style)


def rf_interpolate(x: np.ndarray, noise: np.ndarray, t):
    """Straight-path point z_t = (1-t) x + t noise and target noise - x."""
    x = np.asarray(x)
    noise = np.asarray(noise)
    if x.shape != noise.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {noise.shape}")
    t_arr = np.asarray(t, dtype=x.dtype)
    while t_arr.ndim < x.ndim:
        t_arr = t_arr[..., None]
    z_t = (1.0 - t_arr) * x + t_arr * noise
    return z_t, noise - x


def sample_timestep(rng: np.random.Generator, size=None):
    """Logit-normal draw: sigmoid(n), n ~ Normal(0, 1)."""
    n = rng.standard_normal(size)
    return 1.0 / (1.0 + np.exp(-n))


def condition_dropout(family: str, u: float, spec: DropoutSpec):
    """Map one uniform draw to (drop_txt, drop_ist_con) for a task family.

    Events are carved out of [0, 1) in the declared order, so they are
    mutually exclusive by construction.
    """
    if family == "pixel":
        return u < spec.p_drop_txt_pixel, False
    a = spec.p_drop_txt
    b = a + spec.p_drop_ist_con
    c = b + spec.p_drop_all
    if u < a:
        return True, False
    if u < b:
        return False, True
    if u < c:
        return True, True
    return False, False


def flow_loss(model: UnicModel, z_t, t, bundle: ConditionBundle, v_target) -> Tensor:
    """Mean squared error between the predicted and target velocity."""
    predicted = model.forward_velocity(z_t, t, bundle)
    loss = T.mse(predicted, Tensor(np.asarray(v_target, dtype=predicted.dtype)))
    if not np.isfinite(loss.data):
        raise NonFiniteError("flow loss is not finite")
    return loss


@dataclass
class OptimState:
    """AdamW with decoupled weight decay; moments exist only for trainables."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: OptimState, params: list[Parameter], grads: dict) -> None:
    """One decoupled-weight-decay update: p -= lr * (m_hat/(sqrt(v_hat)+eps) + wd*p)."""
    state.step_count += 1
    k = state.step_count
    bc1 = 1.0 - state.beta1**k
    bc2 = 1.0 - state.beta2**k
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(np.sum(g, dtype=np.float64)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data
        p.tensor.data = p.data - state.lr * update


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def load_training_samples(manifest_path: str, vocab, max_len: int = 32) -> list:
    """Manifest records -> in-memory TrainSamples ([-1, 1] floats, token ids)."""
    import os as _os

    from .embeddings import tokenize_text
    from .ppm import bytes_to_float
    from .synthdata import TASK_FAMILY, load_manifest, load_pair

    base = _os.path.dirname(_os.path.abspath(manifest_path))
    samples = []
    for record in load_manifest(manifest_path):
        pair = load_pair(record, base)
        samples.append(
            TrainSample(
                target=bytes_to_float(pair.target),
                condition=bytes_to_float(pair.condition),
                instruction=tokenize_text(pair.instruction, vocab, max_len),
                prompt=tokenize_text(pair.prompt, vocab, max_len),
                task=pair.task,
                family=TASK_FAMILY[pair.task],
            )
        )
    return samples


@dataclass
class TrainResult:
    checkpoint_path: str | None
    losses: list
    steps: int


def train_loop(
    model: UnicModel,
    samples: list[TrainSample],
    steps: int,
    batch: int,
    seed: int,
    out_dir: str | None = None,
    mixture: MixtureSpec | None = None,
    dropout: DropoutSpec | None = None,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
    grad_clip: float = 0.0,
    log_every: int = 50,
    ckpt_every: int = 1000,
    progress=None,
) -> TrainResult:
    """Seed-deterministic optimization of the model's trainable parameters.

    Each step draws one task family from the mixture, a batch of samples
    from that family, per-sample timesteps, noise, and dropout events, in
    a fixed order from a single PCG64 stream. Appends one metrics line per
    ``log_every`` steps and writes checkpoints every ``ckpt_every`` steps
    plus one at the end.
    """
    mixture = mixture or MixtureSpec()
    dropout = dropout or DropoutSpec()
    cfg = model.config

    by_family = {f: [] for f in FAMILIES}
    for s in samples:
        if s.family not in by_family:
            raise ValueError(f"unknown task family {s.family!r}")
        by_family[s.family].append(s)
    weights = np.asarray(mixture.weights, dtype=np.float64)
    for f, w in zip(FAMILIES, weights):
        if w > 0 and not by_family[f]:
            raise ValueError(f"mixture weight {w} for family {f!r} but no samples")

    rng = make_rng(seed)
    opt = OptimState(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=adam_eps)
    trainables = model.trainable_parameters()

    log_lines = []
    losses = []
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.unic")

    def write_log():
        if out_dir is None or not log_lines:
            return
        with open(os.path.join(out_dir, "metrics.log"), "a", encoding="utf-8") as fh:
            fh.writelines(log_lines)
        log_lines.clear()

    for step in range(1, steps + 1):
        family = FAMILIES[int(rng.choice(len(FAMILIES), p=weights))]
        pool = by_family[family]
        idx = rng.integers(0, len(pool), size=batch)
        t = sample_timestep(rng, batch)
        eps = rng.standard_normal((batch, cfg.channels, cfg.image_size, cfg.image_size))
        eps = eps.astype(cfg.np_dtype)
        u = rng.random(batch)

        chosen = [pool[int(i)] for i in idx]
        x = np.stack([s.target for s in chosen]).astype(cfg.np_dtype)
        con = np.stack([s.condition for s in chosen]).astype(cfg.np_dtype)
        txt = np.stack([s.prompt for s in chosen])
        ist = np.stack([s.instruction for s in chosen])
        drops = [condition_dropout(s.family, float(ui), dropout) for s, ui in zip(chosen, u)]
        drop_txt = np.asarray([d[0] for d in drops], dtype=bool)
        drop_ic = np.asarray([d[1] for d in drops], dtype=bool)

        z_t, v_target = rf_interpolate(x, eps, t.astype(cfg.np_dtype))
        bundle = ConditionBundle(txt, ist, con, drop_txt, drop_ic)

        model.zero_grad()
        try:
            # per-op finiteness checks are traded for explicit loss/grad
            # checks each step (flow_loss and adamw_step); ~15% faster
            with T.finite_checks(False):
                loss = flow_loss(model, z_t, t, bundle, v_target)
                loss.backward()
        except NonFiniteError as err:
            write_log()
            raise NonFiniteError(f"aborting at step {step}: {err}") from err

        grads = {
            p.name: p.tensor.grad for p in trainables if p.tensor.grad is not None
        }
        if grad_clip > 0.0:
            clip_gradients(grads, grad_clip)
        adamw_step(opt, trainables, grads)

        loss_value = float(loss.data)
        losses.append(loss_value)
        if step % log_every == 0:
            log_lines.append(f"{step}\t{family}\t{loss_value:.6f}\n")
            if progress is not None:
                progress(step, family, loss_value)
        if out_dir is not None and ckpt_every > 0 and step % ckpt_every == 0:
            write_log()
            save_checkpoint(model, os.path.join(out_dir, f"checkpoint-{step:06d}.unic"))

    write_log()
    if out_dir is not None:
        save_checkpoint(model, ckpt_path)
    return TrainResult(checkpoint_path=ckpt_path, losses=losses, steps=steps)
