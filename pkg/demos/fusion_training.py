"""Train one model per fusion kind and watch the loss and Lipschitz trajectories.

Usage: python demos/fusion_training.py [epochs]
"""

import sys

from mmlip.autoencoder import TrainConfig, default_spec, train
from mmlip.synthdata import SyntheticSpec, generate


def main(epochs: int = 60):
    ds = generate(SyntheticSpec())
    print(f"dataset: {ds.n_samples} samples, dims {ds.dims}, {int(ds.is_test.sum())} held out")
    cfg = TrainConfig(epochs=epochs, lipschitz_every=max(1, epochs // 6), seed=0)
    for method in ("sum", "concat", "attention"):
        log = train(default_spec(ds.dims, method), None, ds, cfg)
        traj = [(r.epoch, r.model_lipschitz) for r in log.records if r.model_lipschitz is not None]
        last = log.records[-1]
        print(f"\n{method}: loss {log.initial_loss:.2f} -> {last.combined_loss:.2f}, "
              f"test {sum(last.test_loss):.2f}")
        print("  model Lipschitz by epoch: " + ", ".join(f"{e}:{v:.3g}" for e, v in traj))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 60)
