"""Knowledge-distillation loss and the joint compression objective."""

from dataclasses import dataclass

import numpy as np

from .conv import conv2d_direct, conv2d_tucker

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KDConfig:
    alpha: float = 0.5
    tau: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


def softmax(logits, tau=1.0):
    z = np.asarray(logits, dtype=float) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(p, q):
    """Mean over samples of ``-sum p log q`` with ``q`` floored at 1e-12."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    return float(np.mean(-np.sum(p * np.log(np.maximum(q, PROB_FLOOR)), axis=-1)))


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_logits(teacher, student, labels):
    teacher = np.atleast_2d(np.asarray(teacher, dtype=float))
    student = np.atleast_2d(np.asarray(student, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if teacher.shape != student.shape:
        raise ValueError(f"teacher logits {teacher.shape} vs student logits {student.shape}")
    if labels.shape[0] != student.shape[0]:
        raise ValueError("label count does not match sample count")
    return teacher, student, labels


def kd_loss(teacher_logits, student_logits, labels, cfg):
    """``alpha tau^2 H(Q_T^tau, Q_S^tau) + (1 - alpha) H(Y_true, Q_S)``, averaged over samples.

    The hard-label term uses the unscaled student softmax.
    """
    teacher, student, labels = _check_logits(teacher_logits, student_logits, labels)
    soft = cross_entropy(softmax(teacher, cfg.tau), softmax(student, cfg.tau))
    hard = cross_entropy(one_hot(labels, student.shape[1]), softmax(student))
    return cfg.alpha * cfg.tau ** 2 * soft + (1.0 - cfg.alpha) * hard


def kd_loss_grad(teacher_logits, student_logits, labels, cfg):
    """Gradient of :func:`kd_loss` with respect to the student logits."""
    teacher, student, labels = _check_logits(teacher_logits, student_logits, labels)
    n = student.shape[0]
    soft = softmax(student, cfg.tau) - softmax(teacher, cfg.tau)
    hard = softmax(student) - one_hot(labels, student.shape[1])
    return (cfg.alpha * cfg.tau * soft + (1.0 - cfg.alpha) * hard) / n


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class LayerTerm:
    """One layer's contribution to the joint objective.

    ``x`` is the full-precision input, ``x_quant`` the (quantized) input seen
    by the compressed layer and ``factors`` the compressed kernel.
    """

    w: np.ndarray
    factors: object
    x: np.ndarray
    x_quant: np.ndarray
    spec: object


def joint_terms(layers, teacher_logits, student_logits, labels, cfg, activation=relu,
                reference_from_quantized=False):
    """Weight error, activation error and KD components of the joint objective."""
    weight = 0.0
    act = 0.0
    for term in layers:
        w_compressed = term.factors.reconstruct()
        if np.shape(w_compressed) != np.shape(term.w):
            raise ValueError("compressed kernel shape differs from the original")
        weight += float(np.sum((term.w - w_compressed) ** 2))
        x_ref = term.x_quant if reference_from_quantized else term.x
        y = conv2d_direct(x_ref, term.w, term.spec)
        y_compressed = conv2d_tucker(term.x_quant, term.factors, term.spec)
        act += float(np.sum((activation(y) - activation(y_compressed)) ** 2))
    kd = kd_loss(teacher_logits, student_logits, labels, cfg)
    return weight, act, kd


def joint_objective(layers, teacher_logits, student_logits, labels, cfg, activation=relu,
                    reference_from_quantized=False):
    """``sum_n ||W - W~||^2 + lam ||sigma(Y) - sigma(W~ * X~)||^2 + L_KD``."""
    weight, act, kd = joint_terms(layers, teacher_logits, student_logits, labels, cfg,
                                  activation, reference_from_quantized)
    return weight + cfg.lam * act + kd
