"""Empirical checks of the two structural guarantees of greedy training.

* Progressive improvement: with no downsampling and the identity start as a
  trajectory candidate, each layer's training risk is at most its
  predecessor's.
* Error cascading: if every layer solves its sub-problem only up to a
  relative error ``eps``, the final representation drifts by at most
  ``eps * (j(j-1)/2 * B + j * |x| + j)`` after ``j`` layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LIPSCHITZ_SLACK = 1e-9
# gaussian: Gaussian matrix over its top singular value.
# orthogonal: random orthogonal matrix, renormalized the same way.
# adversarial: permutations with nonnegative inputs, biases and perturbations,
#   so nothing is lost to the ReLU and drift accumulates at the worst rate.
OPERATOR_KINDS = ("gaussian", "orthogonal", "adversarial")


# -- progressive improvement ----------------------------------------------------------------------


@dataclass
class ProgressReport:
    layers: list  # dicts: layer, train_risk, applicable, holds, delta
    passed: bool
    strictly_decreasing: bool
    constant: bool

    def lines(self):
        out = []
        for row in self.layers:
            status = "n/a" if not row["applicable"] else ("ok" if row["holds"] else "VIOLATED")
            out.append(f"layer {row['layer']}: risk {row['train_risk']:.6f} [{status}]")
        return out


def check_progressive_improvement(net_or_history) -> ProgressReport:
    """Check the non-increasing chain of recorded training risks.

    Layers where the identity start was not admissible (downsampling, width
    change, normalization in the block) are reported as not applicable and
    excluded.
    """
    history = getattr(net_or_history, "history", net_or_history)
    rows, checked = [], []
    for j, rec in enumerate(history):
        applicable = j > 0 and bool(rec.get("identity_applicable"))
        row = {"layer": j, "train_risk": rec["train_risk"], "applicable": applicable, "holds": None, "delta": None}
        if applicable:
            prev = history[j - 1]["train_risk"]
            row["delta"] = rec["train_risk"] - prev
            row["holds"] = rec["train_risk"] <= prev
            checked.append(row)
        rows.append(row)
    passed = all(r["holds"] for r in checked)
    strict = bool(checked) and all(r["delta"] < 0 for r in checked)
    constant = bool(checked) and all(r["delta"] == 0 for r in checked)
    return ProgressReport(rows, passed, strict, constant)


# -- error cascade simulation --------------------------------------------------------------------------


@dataclass(frozen=True)
class CascadeSimConfig:
    depth: int = 8
    width: int = 16
    bias_bound: float = 1.0
    eps: float = 1e-3
    trials: int = 100
    seed: int = 0
    mode: str = "random"  # or "aligned"
    operators: str = "gaussian"  # "orthogonal", "adversarial"
    power_steps: int = 50
    power_tol: float = 1e-10

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.trials < 1:
            raise ConfigError("depth, width and trials must be positive")
        if self.eps < 0 or self.bias_bound < 0:
            raise ConfigError("eps and bias_bound must be non-negative")
        if self.mode not in ("random", "aligned"):
            raise ConfigError(f"mode must be 'random' or 'aligned', got {self.mode!r}")
        if self.operators not in OPERATOR_KINDS:
            raise ConfigError(f"operators must be one of {OPERATOR_KINDS}, got {self.operators!r}")


@dataclass
class CascadeResult:
    config: CascadeSimConfig
    deviations: np.ndarray  # (trials, depth + 1), column j = |x*_j - x^_j|
    bounds: np.ndarray  # same shape, closed-form bound per trial and depth
    input_norms: np.ndarray
    resamples: int = 0
    max_lipschitz: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return int((self.deviations > self.bounds).sum())

    @property
    def max_ratio(self) -> float:
        mask = self.bounds > 0
        return float((self.deviations[mask] / self.bounds[mask]).max()) if mask.any() else 0.0

    def mean_deviation(self, depth):
        return float(self.deviations[:, depth].mean())


def cascade_bound(depth, eps, bias_bound, input_norm):
    j = np.asarray(depth, dtype=np.float64)
    return eps * (j * (j - 1) / 2 * bias_bound + j * input_norm + j)


def top_singular_value(matrix, rng, steps=50, tol=1e-10):
    """Power iteration on ``M^T M``; returns the estimate of the spectral norm."""
    v = rng.standard_normal(matrix.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(steps):
        w = matrix.T @ (matrix @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = np.sqrt(norm)
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(matrix @ v))


def _raw_operator(width, rng, kind):
    if kind == "gaussian":
        return rng.standard_normal((width, width))
    if kind == "orthogonal":
        q, r = np.linalg.qr(rng.standard_normal((width, width)))
        return q * np.sign(np.diag(r))
    return np.eye(width)[rng.permutation(width)]


def lipschitz_operator(width, rng, steps=50, tol=1e-10, max_tries=1000, kind="gaussian"):
    """A random matrix scaled to spectral norm 1; resampled until verified.

    Returns ``(matrix, rejected_draws)``.
    """
    for attempt in range(max_tries):
        g = _raw_operator(width, rng, kind)
        sigma = top_singular_value(g, rng, steps, tol)
        if sigma == 0:
            continue
        w = g / sigma
        if np.linalg.norm(w, 2) <= 1 + LIPSCHITZ_SLACK:
            return w, attempt
    raise RuntimeError(f"no operator passed the Lipschitz check in {max_tries} draws")


def bounded_bias(width, bound, rng, nonnegative=False):
    b = rng.standard_normal(width)
    if nonnegative:
        b = np.abs(b)
    n = np.linalg.norm(b)
    return b * (bound / n) if n > 0 else b


def relu(x):
    return np.maximum(x, 0.0)


def run_trial(cfg: CascadeSimConfig, trial: int):
    """One optimal cascade and its perturbed twin; returns per-depth deviations."""
    rng = np.random.default_rng(cfg.seed + trial)
    positive = cfg.operators == "adversarial"
    x = rng.standard_normal(cfg.width)
    ops, resamples = [], 0
    for _ in range(cfg.depth):
        w, rejected = lipschitz_operator(cfg.width, rng, cfg.power_steps, cfg.power_tol, kind=cfg.operators)
        resamples += rejected
        ops.append((w, bounded_bias(cfg.width, cfg.bias_bound, rng, positive)))
    # unit directions drawn independently of eps so runs at different eps are coupled
    directions = rng.standard_normal((cfg.depth, cfg.width))
    if positive:
        x, directions = np.abs(x), np.abs(directions)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    star, hat = x.copy(), x.copy()
    deviations = [0.0]
    for j, (w, b) in enumerate(ops):
        size = cfg.eps * (1 + np.linalg.norm(star))
        u = directions[j]
        if cfg.mode == "aligned":
            gap = w @ hat - w @ star
            norm = np.linalg.norm(gap)
            if norm > 0:
                u = gap / norm
        star = relu(w @ star + b)
        hat = relu(w @ hat + b + size * u)
        deviations.append(float(np.linalg.norm(star - hat)))
    lip = max(np.linalg.norm(w, 2) for w, _ in ops)
    return np.array(deviations), float(np.linalg.norm(x)), resamples, float(lip)


def simulate_error_propagation(cfg: CascadeSimConfig) -> CascadeResult:
    devs, norms, resamples, lip = [], [], 0, 0.0
    for t in range(cfg.trials):
        d, n, r, l = run_trial(cfg, t)
        devs.append(d)
        norms.append(n)
        resamples += r
        lip = max(lip, l)
    devs = np.array(devs)
    norms = np.array(norms)
    depths = np.arange(cfg.depth + 1)
    bounds = cascade_bound(depths[None, :], cfg.eps, cfg.bias_bound, norms[:, None])
    return CascadeResult(cfg, devs, bounds, norms, resamples, lip)


def growth_exponent(depths, deviations):
    """Least-squares slope of ``log deviation`` against ``log depth``."""
    depths = np.asarray(depths, dtype=np.float64)
    deviations = np.asarray(deviations, dtype=np.float64)
    if (deviations <= 0).any():
        raise ValueError("growth exponent needs positive deviations")
    return float(np.polyfit(np.log(depths), np.log(deviations), 1)[0])


def depth_sweep(depths=(2, 4, 8, 16, 32), eps=1e-3, width=16, bias_bound=1.0, trials=100, seed=0, mode="random",
                operators="gaussian"):
    """Simulate every depth separately; returns ``{depth: CascadeResult}`` and the fitted exponent."""
    results = {
        J: simulate_error_propagation(CascadeSimConfig(J, width, bias_bound, eps, trials, seed, mode, operators))
        for J in depths
    }
    exponent = None
    if eps > 0:
        exponent = growth_exponent(list(results), [r.mean_deviation(J) for J, r in results.items()])
    return results, exponent


def nonexpansive_ratio(w, b, rng, pairs=100):
    """Largest observed ``|relu(Wa+b) - relu(Wc+b)| / |a - c|`` over random pairs."""
    worst = 0.0
    for _ in range(pairs):
        a, c = rng.standard_normal((2, w.shape[1]))
        num = np.linalg.norm(relu(w @ a + b) - relu(w @ c + b))
        worst = max(worst, num / np.linalg.norm(a - c))
    return worst
