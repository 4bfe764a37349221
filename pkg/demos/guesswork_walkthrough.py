"""How many guesses does an attacker need to re-identify one record?

Walks through the guesswork metric on hand-built score matrices: a perfect
attacker, a blind one, the worst possible ranking and a small mixed case,
checking the closed form against exhaustive enumeration each time.

    python demos/guesswork_walkthrough.py
"""

import numpy as np

from neurobf.metrics import PairScoreMatrix, brute_force_guesswork, guesswork, max_guesswork, uniform_guesswork


def show(title, S):
    g, oracle = guesswork(S), brute_force_guesswork(S) if S.scores.size <= 12 else None
    extra = f"  (enumerated: {oracle})" if oracle is not None else ""
    print(f"{title:<34} G = {str(g):>8} = {float(g):7.3f}{extra}")


def main():
    n = 3
    print("rows are raw records, columns encoded ones; the true pairs sit on the diagonal\n")

    show("perfect attacker", PairScoreMatrix.diagonal(np.eye(n)))

    flat = np.full((n, n), 1.0 / n**2)
    show("blind attacker (all ties)", PairScoreMatrix.diagonal(flat))
    print(f"{'':<34} uniform formula (mn+1)/(n+1) = {uniform_guesswork(n, n)}")

    worst = 1.0 - np.eye(n)
    show("adversarial ranking", PairScoreMatrix.diagonal(worst))
    print(f"{'':<34} ceiling mn-n+1 = {max_guesswork(n, n)}")

    # the top score is shared by a true pair and a decoy
    mixed = np.array([[0.9, 0.9, 0.1], [0.2, 0.5, 0.3], [0.1, 0.4, 0.3]])
    show("partly confused attacker", PairScoreMatrix.diagonal(mixed))

    # more encoded records than raw ones: m = 16 candidates, n = 16 targets
    big = PairScoreMatrix.diagonal(np.full((16, 16), 1.0))
    show("blind attacker, 16 x 16", big)


if __name__ == "__main__":
    main()
