"""Adaptive masking: uniform Y masking, ratio-coupled X masking, and the
correctness-driven second Y pass.

Two probability conventions exist for the second pass and genuinely
disagree in the source material; both are kept behind
`psi_convention` ∈ {main_text, appendix}:
  main_text: a kept-prediction slot is re-masked with 1 - psi(beta)
  appendix:  ... with psi(beta)
where beta is the pass-1 correctness ratio.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import EOS_ID, LENGTH_ID, MASK_ID, PAD_ID

MAPPING_KINDS = ("linear", "convex", "concave", "ladder", "fixed")
CONVENTIONS = ("main_text", "appendix")
SECOND_PASS_STRATEGIES = ("adaptive", "uniform", "none")

# source-side tokens that mask_x must never touch
_PROTECTED_X = (PAD_ID, EOS_ID, LENGTH_ID)


def round_half_up(x: float) -> int:
    """round(2.5) -> 3, unlike banker's rounding; masking counts use this."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MappingFunction:
    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in MAPPING_KINDS:
            raise ValueError(f"mapping kind must be one of {MAPPING_KINDS}, got {self.kind!r}")
        for name, v in (("a", self.a), ("b", self.b)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"mapping limit {name}={v} outside [0, 1]")


def eval_mapping(f: MappingFunction, r: float) -> float:
    """Map a ratio r in [0,1] through f; result clamped to [0,1]."""
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"mapping input {r} outside [0, 1]")
    a, b = f.a, f.b
    if f.kind == "fixed":
        v = a
    elif f.kind == "linear":
        v = (b - a) * r + a
    elif f.kind == "convex":
        v = (b - a) * r * r + b
    elif f.kind == "concave":
        v = (a - b) * r * r + 2.0 * (b - a) * r + b
    else:  # ladder: linear quantized to 0.05 steps
        v = 0.05 * round_half_up(((b - a) * r + a) / 0.05)
    return min(1.0, max(0.0, v))


@dataclass(frozen=True)
class MaskingPolicy:
    phi: MappingFunction = MappingFunction("linear", 0.3, 0.1)
    psi: MappingFunction = MappingFunction("linear", 0.2, 0.8)
    second_pass_strategy: str = "adaptive"
    same_ratio_flag: bool = False
    n_refine_passes: int = 2
    use_ground_truth_obs_flag: bool = False
    confidence_based_flag: bool = False
    psi_convention: str = "main_text"

    def __post_init__(self):
        if self.second_pass_strategy not in SECOND_PASS_STRATEGIES:
            raise ValueError(f"second_pass_strategy must be one of {SECOND_PASS_STRATEGIES}")
        if self.psi_convention not in CONVENTIONS:
            raise ValueError(f"psi_convention must be one of {CONVENTIONS}")
        if self.n_refine_passes not in (1, 2, 3):
            raise ValueError(f"n_refine_passes must be 1, 2 or 3, got {self.n_refine_passes}")
        if (self.n_refine_passes == 1) != (self.second_pass_strategy == "none"):
            raise ValueError("n_refine_passes=1 exactly when second_pass_strategy='none'")

    def effective_psi(self) -> MappingFunction:
        # same-ratio ablation: the second-pass ratio is beta itself,
        # i.e. psi is the identity map
        if self.same_ratio_flag:
            return MappingFunction("linear", 0.0, 1.0)
        return self.psi


@dataclass
class MaskedPass:
    """One masking realization; x_masked is filled by the training step."""

    y_input: np.ndarray
    mask_positions: np.ndarray
    obs_positions: np.ndarray
    alpha: float
    n_mask: int
    n_obs: int
    x_masked: np.ndarray | None = None


@dataclass(frozen=True)
class SecondPassPlan:
    beta: float
    psi_value: float
    p_pred: float
    p_obs: float


# ---------------------------------------------------------------------


def uniform_mask_y(y: np.ndarray, rng: np.random.Generator) -> MaskedPass:
    """CMLM first pass: m ~ U{1..L_Y}, m distinct slots become [MASK]."""
    y = np.asarray(y)
    L = len(y)
    if L < 1:
        raise ValueError("cannot mask an empty target")
    m = int(rng.integers(1, L + 1))
    positions = np.sort(rng.choice(L, size=m, replace=False))
    y_input = y.copy()
    y_input[positions] = MASK_ID
    obs = np.setdiff1d(np.arange(L), positions, assume_unique=True)
    return MaskedPass(y_input, positions, obs, m / L, m, L - m)


def mask_x(x: np.ndarray, alpha_dec: float, phi: MappingFunction, rng: np.random.Generator) -> np.ndarray:
    """Mask round(phi(alpha)*L_X) non-special source tokens, uniformly."""
    x = np.asarray(x)
    if len(x) < 1:
        raise ValueError("cannot mask an empty source")
    maskable = np.flatnonzero(~np.isin(x, _PROTECTED_X))
    count = min(round_half_up(eval_mapping(phi, alpha_dec) * len(x)), len(maskable))
    if count <= 0:
        return x.copy()  # no rng state consumed
    chosen = rng.choice(maskable, size=count, replace=False)
    out = x.copy()
    out[chosen] = MASK_ID
    return out


def compute_beta(pred_ids: np.ndarray, gold_ids: np.ndarray, mask_positions: np.ndarray) -> float:
    if len(mask_positions) == 0:
        raise ValueError("beta undefined over an empty mask set")
    pred_ids = np.asarray(pred_ids)
    gold_ids = np.asarray(gold_ids)
    return float(np.mean(pred_ids[mask_positions] == gold_ids[mask_positions]))


def plan_second_pass(beta: float, psi: MappingFunction, convention: str = "main_text") -> SecondPassPlan:
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta {beta} outside [0, 1]")
    psi_value = eval_mapping(psi, beta)
    if convention == "main_text":
        p_pred, p_obs = 1.0 - psi_value, psi_value
    else:
        p_pred, p_obs = psi_value, 1.0 - psi_value
    return SecondPassPlan(beta, psi_value, p_pred, p_obs)


def adaptive_mask_y(
    pred_ids: np.ndarray,
    gold_ids: np.ndarray,
    pass1: MaskedPass,
    plan: SecondPassPlan,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    pred_conf: np.ndarray | None = None,
) -> MaskedPass:
    """Second pass: re-mask per plan; surviving pass-1 slots carry predictions.

    Recursion-ready: surviving slots outside pass1.mask_positions carry
    pass1's decoder input, so a third pass can feed a second one in here.
    """
    gold_ids = np.asarray(gold_ids)
    pred_ids = np.asarray(pred_ids)
    L = len(gold_ids)
    was_pred = np.zeros(L, dtype=bool)
    was_pred[pass1.mask_positions] = True

    if policy.confidence_based_flag:
        if pred_conf is None:
            raise ValueError("confidence_based_flag requires pred_conf")
        # lowest-confidence predictions first, same expected count as Bernoulli
        want = round_half_up(plan.p_pred * pass1.n_mask)
        want = min(want, pass1.n_mask)
        order = pass1.mask_positions[np.argsort(pred_conf[pass1.mask_positions], kind="stable")]
        selected = np.zeros(L, dtype=bool)
        selected[order[:want]] = True
        if pass1.n_obs:
            u = rng.random(pass1.n_obs)
            selected[pass1.obs_positions] = u < plan.p_obs
    else:
        u = rng.random(L)
        prob = np.where(was_pred, plan.p_pred, plan.p_obs)
        selected = u < prob

    if not selected.any():
        selected[int(rng.integers(0, L))] = True  # loss needs a non-empty mask set

    carry = pass1.y_input.copy()
    if policy.use_ground_truth_obs_flag:
        carry[pass1.mask_positions] = gold_ids[pass1.mask_positions]
    else:
        carry[pass1.mask_positions] = pred_ids[pass1.mask_positions]
    y_input = np.where(selected, MASK_ID, carry)

    positions = np.flatnonzero(selected)
    obs = np.flatnonzero(~selected)
    n = len(positions)
    return MaskedPass(y_input, positions, obs, n / L, n, L - n)


def uniform_second_pass(
    pred_ids: np.ndarray,
    gold_ids: np.ndarray,
    pass1: MaskedPass,
    policy: MaskingPolicy,
    rng: np.random.Generator,
) -> MaskedPass:
    """Ablation: uniform re-mask selection, prediction carry-over unchanged."""
    gold_ids = np.asarray(gold_ids)
    L = len(gold_ids)
    m = int(rng.integers(1, L + 1))
    positions = np.sort(rng.choice(L, size=m, replace=False))
    selected = np.zeros(L, dtype=bool)
    selected[positions] = True

    carry = pass1.y_input.copy()
    if policy.use_ground_truth_obs_flag:
        carry[pass1.mask_positions] = gold_ids[pass1.mask_positions]
    else:
        carry[pass1.mask_positions] = np.asarray(pred_ids)[pass1.mask_positions]
    y_input = np.where(selected, MASK_ID, carry)
    obs = np.flatnonzero(~selected)
    return MaskedPass(y_input, positions, obs, m / L, m, L - m)


# ---------------------------------------------------------------------
# appendix expectation study


def expected_remask_ratio(beta_err: float) -> float:
    """Closed form E_r = 0.4*beta_err - 0.3*beta_err^2 (psi = linear(0.2, 0.8))."""
    if not (0.0 <= beta_err <= 1.0):
        raise ValueError(f"beta_err {beta_err} outside [0, 1]")
    return 0.4 * beta_err - 0.3 * beta_err * beta_err


def simulate_remask_expectation(
    L: int,
    beta_err: float,
    psi: MappingFunction,
    convention: str,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo mean fraction of the sequence re-masked in the second pass.

    Per trial: m ~ U{1..L} masked slots, round(beta_err*m) of them wrong,
    each wrong slot re-masked independently with the convention's kept-
    prediction probability.
    """
    if trials < 10_000:
        raise ValueError(f"need >= 1e4 trials, got {trials}")
    if L < 1:
        raise ValueError("L must be positive")
    plan = plan_second_pass(1.0 - beta_err, psi, convention)
    m = rng.integers(1, L + 1, size=trials)
    n_wrong = np.floor(beta_err * m + 0.5).astype(np.int64)
    remasked = rng.binomial(n_wrong, plan.p_pred)
    return float(np.mean(remasked / L))
