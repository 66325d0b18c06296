import numpy as np


def central_diff(f, params, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. arrays mutated in place."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    return max(float(np.max(np.abs(a - n) / (1.0 + np.abs(n)))) for a, n in zip(analytic, numeric))


REGIME_A = (np.array([1.0, -0.5, 0.3, 2.0]), np.array([0.5, 1.0, -1.0]))
REGIME_B = (np.array([-1.0, 0.7, 1.5, -0.4]), np.array([-1.2, 0.4, 0.8]))


def regime_pset(m=20000, seed=0, two=True):
    """Noise-free perturbation set: regime A where x1 <= 0, regime B where x1 > 0.

    Returns the set and the 0/1 regime label per row. With ``two=False``
    every row follows regime A.
    """
    from liitr.vaegen import PerturbationSet

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, 4))
    t = rng.integers(0, 2, m).astype(float)
    h1 = np.column_stack([np.ones(m), x[:, 0], x[:, 1]])
    label = (x[:, 0] > 0).astype(int) if two else np.zeros(m, dtype=int)
    y = np.where(label == 1, x @ REGIME_B[0] + (h1 @ REGIME_B[1]) * t, x @ REGIME_A[0] + (h1 @ REGIME_A[1]) * t)
    return PerturbationSet("oracle", np.column_stack([t, x]), y), label


def coef_error(surrogate, regime):
    """Smallest max-abs coefficient error over experts for one true regime."""
    b1, b2 = regime
    return min(float(np.max(np.abs(np.r_[surrogate.b1[k] - b1, surrogate.b2[k] - b2])))
               for k in range(len(surrogate.experts)))


def gate_accuracy(surrogate, pset, label):
    """Agreement of hard routing with the regime labels, up to relabeling (two experts)."""
    a = surrogate.assign(pset.x)
    return max(float(np.mean(a == label)), float(np.mean(a != label)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
