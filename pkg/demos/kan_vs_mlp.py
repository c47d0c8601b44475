"""Parameter-matched KAN and MLP trained on a smooth spline target.

Prints the cross-entropy curves side by side and the epoch at which the KAN
first matches the MLP's final loss.
"""
from pepsite.synthetic import spline_target_instances
from pepsite.train import TrainConfig, compare_kan_mlp


def main() -> None:
    data = spline_target_instances()
    cfg = TrainConfig(epochs=20, lr=0.003, loss_mode="ce_only", lam=0.0, hidden=(8,), seed=0)
    rep = compare_kan_mlp(data[:20], data[20:], cfg)

    print(f"{'epoch':>5}  {'kan ce':>8}  {'mlp ce':>8}")
    for k, m in zip(rep.kan_log, rep.mlp_log):
        print(f"{k['epoch']:>5}  {k['ce']:8.4f}  {m['ce']:8.4f}")
    print()
    print(rep.summary())
    print("PASS" if rep.passed else "FAIL")


if __name__ == "__main__":
    main()
