"""End-to-end walkthrough: record workloads, train, then halt an attack.

Builds a small ext4 fixture image, replays benign and encryption
workloads through the monitored block-device server to collect labeled
action logs, aggregates them into classifier windows, trains the boosted
tree ensemble, and finally redeploys it live against a fresh encryption
session to show the rolling-vote halt firing.

Run from the repository root:  python3 demos/detect_and_halt.py
"""

import tempfile
from pathlib import Path

from diskmon import detector, metrics, workloads

WINDOW = metrics.WindowConfig(window=2, stride=2)

TRAIN_SESSIONS = [
    ("benign-read", 10),
    ("benign-copy", 11),
    ("benign-mixed", 12),
    ("encrypt-full", 20),
    ("encrypt-partial", 21),
]


def main() -> None:
    print("== 1. record labeled sessions over the monitored device ==")
    all_windows = []
    for profile, seed in TRAIN_SESSIONS:
        result = workloads.run_scenario(profile, seed=seed, repeats=2)
        ws = result.windows(WINDOW)
        all_windows.extend(ws)
        print(f"  {profile:18s} seed {seed}: {len(result.records):4d} actions "
              f"-> {len(ws):3d} windows")

    print("\n== 2. train the boosted ensemble on the window vectors ==")
    X = [w.values for w in all_windows]
    y = [1.0 if w.label == "malicious" else 0.0 for w in all_windows]
    model = detector.train_cart(X, y, list(metrics.FEATURES),
                                training_window=(WINDOW.window, WINDOW.stride))
    report = detector.evaluate(model, X, y)
    print(f"  {len(X)} windows, training accuracy {report.accuracy:.4f}")
    print("  top split features:",
          ", ".join(f"{n} x{c}" for n, c in detector.feature_importance(model)[:3]))

    with tempfile.TemporaryDirectory() as tmp:
        model_path = Path(tmp) / "model.json"
        detector.save_model(model, model_path)
        print(f"  saved to {model_path.name} "
              f"({model_path.stat().st_size} bytes)")

        print("\n== 3. deploy against a fresh encryption session ==")
        live = workloads.run_scenario(
            "encrypt-intermittent", seed=99, repeats=4, mode="deploy",
            model=detector.load_model(model_path), window=WINDOW,
            prelude_profile="benign-mixed", prelude_actions=40,
        )
    print(f"  requests sent {live.requests_sent}, "
          f"writes refused after halt {live.writes_refused}")
    print(live.stats().summary())

    print("\n== 4. control: the same model leaves benign work alone ==")
    control = workloads.run_scenario(
        "benign-mixed", seed=99, repeats=4, mode="deploy",
        model=model, window=WINDOW,
    )
    print(f"  halted: {'yes' if control.halted else 'no'}, "
          f"writes refused {control.writes_refused}")


if __name__ == "__main__":
    main()
