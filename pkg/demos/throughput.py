"""Cost of monitoring: serve-path throughput with and without the pipeline.

Measures sequential read and write throughput over an in-memory device
in three configurations: raw serving, serving plus per-action metric
logging, and logging plus per-window inference.  Reads skip the entropy
and catalog-diff work, so their logging penalty is far smaller than the
write-side penalty.

Run from the repository root:  python3 demos/throughput.py
"""

import numpy as np

from diskmon import detector, fixtures, metrics, nbd

TOTAL = 16 << 20
REQUEST = 65536


def _benign_model():
    """A constant-benign ensemble so inference runs without ever halting."""
    rng = np.random.default_rng(0)
    X = rng.random((64, len(metrics.FEATURES)))
    y = (rng.random(64) < 0.25).astype(float)
    return detector.train_cart(
        X, y, list(metrics.FEATURES),
        params=detector.TrainParams(n_estimators=100, learning_rate=0.001),
    )


def main() -> None:
    spec = fixtures.FixtureSpec(
        device_size=32 << 20,
        files=(fixtures.FileSpec(size=262144, content_seed=1),),
    )
    image, _ = fixtures.build_fixture_image(spec)
    model = _benign_model()
    cfg = metrics.WindowConfig(1, 1)

    print(f"{'pattern':8s} {'raw':>10s} {'+logging':>10s} {'+inference':>11s}")
    for pattern in ("read", "write"):
        rates = nbd.bench_throughput(image, pattern, TOTAL, REQUEST,
                                     model=model, config=cfg, repeats=3)
        print(f"{pattern:8s} {rates['raw']:9.0f} {rates['logging']:9.0f} "
              f"{rates['logging_inference']:10.0f}   MB/s")

    print("\nWrites pay for entropy deltas and catalog updates; reads only")
    print("pay for classification of the touched regions.")


if __name__ == "__main__":
    main()
