#!/usr/bin/env python3
"""Smoke test for the staclab Python extension.

Builds the extension with cargo if needed, loads it, and checks a few
numerical identities end to end: the metaparameter transform, leaky V-trace
target reduction on on-policy data, the tabular operator's fixed point and
contraction certificate, and a short gridworld training run.

Run from the repository root:

    python3 python/smoke_test.py [--release]
"""

import argparse
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_and_import(release: bool):
    profile = "release" if release else "debug"
    lib = ROOT / "target" / profile / "libstaclab.so"
    cmd = ["cargo", "build", "-p", "staclab-py"]
    if release:
        cmd.append("--release")
    subprocess.run(cmd, cwd=ROOT, check=True)
    if not lib.exists():
        sys.exit(f"expected {lib} after the build")
    stage = pathlib.Path(tempfile.mkdtemp(prefix="staclab_py_"))
    shutil.copy2(lib, stage / "staclab.so")
    sys.path.insert(0, str(stage))
    import staclab

    return staclab


def approx(a, b, tol):
    return abs(a - b) <= tol


def check(name, ok, detail=""):
    status = "ok" if ok else "FAILED"
    print(f"  {name}: {status} {detail}")
    if not ok:
        sys.exit(1)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--release", action="store_true", help="build with --release")
    args = parser.parse_args()
    staclab = build_and_import(args.release)
    print("loaded staclab extension")

    # Metaparameter transform at the standard initialization.
    check(
        "sigmoid(4.6) ~ 0.99",
        approx(staclab.sigmoid(4.6), 0.99, 1e-3),
        f"(= {staclab.sigmoid(4.6):.5f})",
    )
    eff = staclab.meta_transform([4.6] * 6)
    check(
        "effective g_v at init",
        approx(eff["g_v"], staclab.sigmoid(4.6) * 0.25, 1e-12),
        f"(= {eff['g_v']:.5f})",
    )

    # Leaky weight corners.
    rho, c = staclab.leaky_weights([2.0], 0.99, 1.0, 1.0, 1.0)
    check("full truncation", rho == [1.0] and c == [1.0])
    rho, c = staclab.leaky_weights([2.0], 0.99, 1.0, 0.0, 0.0)
    check("no truncation", rho == [2.0] and c == [2.0])

    # On-policy targets reduce to bootstrapped returns.
    n, gamma = 6, 0.95
    rewards = [0.3, -0.1, 0.7, 0.0, 0.2, -0.4]
    probs = [0.5, 0.4, 0.8, 0.3, 0.6, 0.7]
    values = [0.1 * k for k in range(n + 1)]
    targets, _, _ = staclab.vtrace_targets(rewards, probs, probs, values, gamma)
    worst = 0.0
    for s in range(n):
        expect = gamma ** (n - s) * values[n]
        for j in range(s, n):
            expect += gamma ** (j - s) * rewards[j]
        worst = max(worst, abs(targets[s] - expect))
    check("on-policy bootstrapped-return reduction", worst < 1e-12, f"(worst {worst:.2e})")

    # Tabular operator: fixed point and certificate on a small MDP.
    transitions = [
        [[0.7, 0.3], [0.2, 0.8]],
        [[0.5, 0.5], [0.9, 0.1]],
    ]
    rewards_t = [[1.0, -0.5], [0.25, 0.75]]
    mdp = staclab.TabularMdp(transitions, rewards_t, 0.9)
    mu = [[0.6, 0.4], [0.3, 0.7]]
    pi = [[0.2, 0.8], [0.5, 0.5]]
    alpha = 0.7
    mix = mdp.mixture_policy(pi, mu, 1.0, alpha)
    vstar = mdp.exact_value(mix)
    rv = mdp.apply_operator(mu, pi, vstar, alpha, alpha)
    resid = max(abs(a - b) for a, b in zip(rv, vstar))
    check("operator fixed point", resid < 1e-10, f"(residual {resid:.2e})")
    beta, bound, empirical = mdp.contraction_certificate(mu, pi, alpha, alpha, pairs=200, seed=3)
    check(
        "contraction certificate",
        0.0 < beta <= 1.0 and empirical <= bound + 1e-12,
        f"(beta {beta:.3f}, empirical {empirical:.3f} <= bound {bound:.3f})",
    )
    dist = mdp.fixed_point_distances(mu, pi, [1.0, -1.0], 50, alpha, alpha)
    envelope_ok = all(
        d <= bound**k * dist[0] + 1e-9 for k, d in enumerate(dist)
    )
    check(
        "iteration within geometric envelope",
        envelope_ok and dist[-1] < dist[0] * 1e-4,
        f"(d0 {dist[0]:.2e} -> d50 {dist[-1]:.2e})",
    )

    # The certificate refuses transposed leak coefficients.
    try:
        mdp.contraction_certificate(mu, pi, 0.2, 0.9)
        check("leak ordering precondition", False)
    except ValueError:
        check("leak ordering precondition", True, "(alpha_rho < alpha_c rejected)")

    # Random-instance verification.
    reports = staclab.verify_random_instances(count=10, seed=0)
    ok = all(r["modulus_ok"] and r["residual_ok"] for r in reports)
    check("verification suite", ok, f"({len(reports)} instances)")

    # Short self-tuning training run.
    out = staclab.train_gridworld(seed=1, total_env_steps=30_000)
    frac = out["final_return"] / out["optimal_return"]
    check(
        "gridworld training run",
        math.isfinite(out["final_return"]) and frac > 0.5,
        f"(return {out['final_return']:.3f} = {100 * frac:.0f}% of optimal, "
        f"{out['meta_steps']} meta steps, movement {out['max_metaparam_movement']:.4f})",
    )

    print("smoke test passed")


if __name__ == "__main__":
    main()
