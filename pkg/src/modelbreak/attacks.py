"""Input-space attacks on float models: PGD, FGSM, flip reporting and inversion."""

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import LossKind, check_executable, forward, loss, value_and_grad
from .errors import AttackConfigError
from .ir import ModelGraph, OpKind


class Mode(enum.Enum):
    UNTARGETED = "untargeted"
    TARGETED = "targeted"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.01
    alpha: float = 0.005
    num_iter: int = 100
    mode: Mode = Mode.UNTARGETED
    # Targeted: the output to steer toward (vector, or class index for CE).
    # Untargeted: optional ground-truth labels; defaults to the model's own
    # prediction on the clean input.
    target: object = None
    loss: LossKind = LossKind.BCE
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0
    last_iterate: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
            object.__setattr__(self, "loss", LossKind.parse(self.loss))
        except ValueError as e:
            raise AttackConfigError(str(e)) from None
        if not self.epsilon > 0:
            raise AttackConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.alpha > 0:
            raise AttackConfigError(f"alpha must be positive, got {self.alpha}")
        if int(self.num_iter) != self.num_iter or self.num_iter < 1:
            raise AttackConfigError(f"num_iter must be a positive integer, got {self.num_iter}")
        if not self.clip_min < self.clip_max:
            raise AttackConfigError(f"clip range [{self.clip_min}, {self.clip_max}] is empty")
        if self.mode is Mode.TARGETED and self.target is None:
            raise AttackConfigError("targeted mode needs a target")

    def to_json(self):
        t = self.target
        if t is not None:
            t = np.asarray(t).tolist()
        return {
            "epsilon": self.epsilon, "alpha": self.alpha, "num_iter": self.num_iter,
            "mode": self.mode.value, "target": t, "loss": self.loss.value,
            "random_start": self.random_start, "clip_min": self.clip_min,
            "clip_max": self.clip_max, "seed": self.seed, "last_iterate": self.last_iterate,
        }


@dataclass
class AttackResult:
    adversarial: np.ndarray
    initial_output: np.ndarray
    final_output: np.ndarray
    initial_loss: float
    final_loss: float
    linf: float
    iterations_run: int
    loss_trajectory: tuple
    best_iteration: int
    labels: np.ndarray
    config: AttackConfig
    post_save_verified: bool = None


def _labels(y0, cfg):
    if cfg.target is not None:
        return np.asarray(cfg.target)
    if cfg.loss is LossKind.BCE:
        return (y0 > 0.5).astype(np.float32)
    if cfg.loss is LossKind.CE:
        return np.argmax(y0.reshape(-1, y0.shape[-1]), axis=-1)
    return y0.copy()


def pgd(model: ModelGraph, x, config: AttackConfig) -> AttackResult:
    """Projected sign-gradient attack.

    Untargeted mode ascends the loss against ``labels``; targeted mode
    descends it toward ``config.target``.  Every iterate is projected onto the
    L-inf ball around ``x`` and clipped to the input range.  The returned
    input is the best iterate after at least one step (highest loss when
    untargeted, lowest when targeted) unless ``last_iterate`` is set.
    """
    cfg = config
    check_executable(model)
    x = np.asarray(x, dtype=np.float32)
    if (x < cfg.clip_min).any() or (x > cfg.clip_max).any():
        raise AttackConfigError(f"input lies outside [{cfg.clip_min}, {cfg.clip_max}]")
    y0 = forward(model, x)
    labels = _labels(y0, cfg)
    loss0 = loss(y0, labels, cfg.loss)

    eps, alpha = np.float32(cfg.epsilon), np.float32(cfg.alpha)
    lo = np.maximum(x - eps, np.float32(cfg.clip_min))
    hi = np.minimum(x + eps, np.float32(cfg.clip_max))
    adv = x.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
        adv = np.clip(x + noise, lo, hi)
    direction = np.float32(1 if cfg.mode is Mode.UNTARGETED else -1)

    def better(a, b):
        return b is None or (a > b if cfg.mode is Mode.UNTARGETED else a < b)

    trajectory = []
    best = best_loss = best_y = None
    best_k = 0
    for k in range(int(cfg.num_iter)):
        val, y, g = value_and_grad(model, adv, labels, cfg.loss)
        trajectory.append(val)
        if k >= 1 and better(val, best_loss):
            best, best_loss, best_y, best_k = adv, val, y, k
        adv = np.clip(adv + direction * alpha * np.sign(g), lo, hi).astype(np.float32)
    y = forward(model, adv)
    val = loss(y, labels, cfg.loss)
    trajectory.append(val)
    if cfg.last_iterate or better(val, best_loss):
        best, best_loss, best_y, best_k = adv, val, y, len(trajectory) - 1

    return AttackResult(
        adversarial=best,
        initial_output=y0,
        final_output=best_y,
        initial_loss=loss0,
        final_loss=best_loss,
        linf=float(np.max(np.abs(best - x))) if x.size else 0.0,
        iterations_run=int(cfg.num_iter),
        loss_trajectory=tuple(trajectory),
        best_iteration=best_k,
        labels=labels,
        config=cfg,
    )


def fgsm(model: ModelGraph, x, config: AttackConfig) -> AttackResult:
    """One step of size epsilon along the loss gradient sign, no random start."""
    return pgd(model, x, replace(config, alpha=config.epsilon, num_iter=1, random_start=False))


# -- threshold flips ----------------------------------------------------------


@dataclass(frozen=True)
class Flip:
    output: int
    initial: float
    final: float

    @property
    def direction(self):
        return "negative_to_positive" if self.final > self.initial else "positive_to_negative"

    @property
    def analogue(self):
        # a classifier that triggers a protective action when an output fires
        return "false positive (enable)" if self.final > self.initial else "false negative (bypass)"

    def to_json(self):
        return {"output": self.output, "initial": self.initial, "final": self.final,
                "direction": self.direction}


def threshold_flips(initial, final, threshold=0.5):
    """Outputs whose side of ``threshold`` changed.  Positive means strictly above."""
    a = np.asarray(initial, dtype=np.float64).reshape(-1)
    b = np.asarray(final, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise AttackConfigError(f"output shapes differ: {a.shape} vs {b.shape}")
    return tuple(Flip(i, float(a[i]), float(b[i]))
                 for i in range(a.size) if (a[i] > threshold) != (b[i] > threshold))


def flip_check(model: ModelGraph, result: AttackResult, threshold=0.5):
    if model.final_activation() is not OpKind.LOGISTIC:
        raise AttackConfigError(
            "flip_check needs a sigmoid head; compare raw outputs for other heads instead")
    return threshold_flips(result.initial_output, result.final_output, threshold)


# -- inversion --------------------------------------------------------------------


@dataclass
class InversionResult:
    input: np.ndarray
    start: np.ndarray
    trajectory: tuple
    initial_confidence: float
    best_confidence: float
    best_iteration: int
    class_index: int
    config: dict = field(default_factory=dict)


def invert(model: ModelGraph, class_index, iterations=200, step_size=0.01, seed=0,
           l2_weight=1e-4, clip_min=0.0, clip_max=1.0) -> InversionResult:
    """Sign-gradient ascent on one output's confidence.

    Starts at mid-range plus seeded uniform noise of amplitude 0.01.  The
    objective is confidence minus ``l2_weight`` times the squared distance to
    mid-range.  Returns the iterate with the highest confidence seen.
    """
    check_executable(model)
    width = model.output_shape[-1] if model.output_shape else 1
    if int(class_index) != class_index or not 0 <= class_index < width:
        raise AttackConfigError(f"class index {class_index} out of range for {width} outputs")
    if iterations < 0 or not step_size > 0 or l2_weight < 0 or not clip_min < clip_max:
        raise AttackConfigError("invalid inversion settings")
    k = int(class_index)
    mid = np.float32((clip_min + clip_max) / 2)
    rng = np.random.default_rng(seed)
    x = np.clip(mid + rng.uniform(-0.01, 0.01, size=model.input_shape).astype(np.float32),
                clip_min, clip_max).astype(np.float32)
    start = x.copy()
    lr, l2 = np.float32(step_size), np.float32(l2_weight)
    trajectory = []
    best = best_conf = None
    best_it = 0
    for it in range(int(iterations) + 1):
        y, tape = forward(model, x, record=True)
        conf = float(np.mean(y[..., k]))
        trajectory.append(conf)
        if best_conf is None or conf > best_conf:
            best, best_conf, best_it = x, conf, it
        if it == iterations:
            break
        gy = np.zeros_like(y)
        gy[..., k] = np.float32(1.0 / max(1, y[..., k].size))
        g = tape.backward(gy) - 2 * l2 * (x - mid)
        x = np.clip(x + lr * np.sign(g), clip_min, clip_max).astype(np.float32)
    return InversionResult(
        input=best, start=start, trajectory=tuple(trajectory),
        initial_confidence=trajectory[0], best_confidence=best_conf, best_iteration=best_it,
        class_index=k,
        config={"iterations": int(iterations), "step_size": step_size, "seed": seed,
                "l2_weight": l2_weight, "clip_min": clip_min, "clip_max": clip_max},
    )
