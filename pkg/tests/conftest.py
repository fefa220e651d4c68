import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# Published per-class window counts the synthetic raw fixtures reproduce:
# WISDM at 20-sample non-overlapping windows, UniMiB ADL at 151-sample instances.
WISDM_COUNTS = {
    "Walking": 21220,
    "Jogging": 17104,
    "Upstairs": 6146,
    "Downstairs": 5020,
    "Sitting": 2992,
    "Standing": 2419,
}
WISDM_TOTAL_ROWS = 1_098_207  # 54,901 windows * 20 rows + 187 dropped tail rows
UNIMIB_COUNTS = {
    "Running": 1985,
    "Walking": 1738,
    "GoingDownS": 1324,
    "GoingUpS": 921,
    "Jumping": 746,
    "LyingDownFS": 296,
    "StandingUpFL": 216,
    "SittingDown": 200,
    "StandingUpFS": 153,
}


def make_wisdm_raw(path, counts=None, window=20, users=36, seed=7, malformed=0):
    """Write a synthetic WISDM-style raw log whose 20/20 windowing reproduces
    the published class counts, with the published total row count.

    Runs are laid out user-major with a fixed class rotation so consecutive
    runs never share (user, activity); tail rows shorter than one window are
    appended to early runs to hit the exact published row total.
    """
    counts = dict(WISDM_COUNTS if counts is None else counts)
    rng = np.random.default_rng(seed)
    class_order = list(counts)

    # windows per (user, class), spread nearly evenly
    runs = []  # (user, class_name, n_windows)
    for name in class_order:
        total = counts[name]
        base, extra = divmod(total, users)
        for u in range(users):
            n_win = base + (1 if u < extra else 0)
            if n_win:
                runs.append((u + 1, name, n_win))
    runs.sort(key=lambda r: (r[0], class_order.index(r[1])))

    target_rows = sum(counts.values()) * window
    tail_budget = WISDM_TOTAL_ROWS - target_rows if counts == WISDM_COUNTS else 0
    tails = []  # each tail < window, so tails never mint extra windows
    while tail_budget > 0:
        t = min(window - 1, tail_budget)
        tails.append(t)
        tail_budget -= t

    lines = []
    timestamp = 1_000_000_000
    for i, (user, name, n_win) in enumerate(runs):
        n_rows = n_win * window + (tails[i] if i < len(tails) else 0)
        xyz = rng.normal(0.0, 3.0, size=(n_rows, 3))
        for j in range(n_rows):
            timestamp += 50_000_000
            lines.append(
                f"{user},{name},{timestamp},{xyz[j, 0]:.4f},{xyz[j, 1]:.4f},{xyz[j, 2]:.4f};"
            )
    for k in range(malformed):
        lines.insert(rng.integers(0, len(lines)), f"garbage line {k}")
    path.write_text("\n".join(lines) + "\n")
    return path


def make_unimib_csv(path, counts=None, length=151, seed=11):
    """Write a UniMiB-style CSV export with the published per-class instance counts."""
    counts = dict(UNIMIB_COUNTS if counts is None else counts)
    rng = np.random.default_rng(seed)
    lines = ["label,source_id," + ",".join(
        f"{axis}_{t}" for axis in "xyz" for t in range(length))]
    for name in counts:
        for i in range(counts[name]):
            flat = rng.normal(0.0, 2.0, size=3 * length)
            lines.append(f"{name},{i % 30 + 1}," + ",".join(f"{v:.4f}" for v in flat))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def wisdm_raw_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("wisdm") / "wisdm_raw.txt"
    return make_wisdm_raw(path, malformed=3)


@pytest.fixture(scope="session")
def unimib_csv_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("unimib") / "unimib_adl.csv"
    return make_unimib_csv(path)
