"""Gradient flow on W versus the factorized pair (W', M).

On an underdetermined least-squares problem, plain gradient flow from zero
stays in the row space of the data and lands on the minimum-norm solution.
The factorized flow fits the data too, but it follows a different path and
can end elsewhere.  The script prints the loss, the distance to the
minimum-norm solution and the nuclear norm at a few times.
"""

from nsl.gradflow import initial_state, integrate, random_problem, stability_threshold


def main():
    problem = random_problem(n=6, m=2, s=3, seed=0)
    for mode in ("standard", "nsl"):
        state = initial_state(problem, mode, seed=1)
        dt = 0.05 * stability_threshold(problem, state)
        traj = integrate(state, problem, dt=dt, steps=40000)
        print(f"{mode} flow, dt={traj.dt:.3g}")
        for k in (0, 10, 100, 1000, 10000, 40000):
            row = traj.rows[k]
            print(f"    t={row['t']:8.2f}  loss={row['loss']:.2e}  "
                  f"|W - W_min|={row['distance_to_min_norm']:.2e}  nuclear={row['nuclear_norm']:.4f}")


if __name__ == "__main__":
    main()
