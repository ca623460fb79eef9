"""Smoke test for the goalcraft_py extension.

Build and run from the workspace root:

    cargo build -p goalcraft-py --features extension-module
    cp target/debug/libgoalcraft_py.so crates/python/python/goalcraft_py.so
    python3 crates/python/python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import goalcraft_py as gc


def main():
    assert abs(gc.win_probability(1650.0, 1500.0) - 0.7034) < 5e-4
    assert gc.elo_update(1500.0, 1500.0, 8.0, True) == (1504.0, 1496.0)

    move, turn = gc.guided_logits(([2.0, 0, 0, 0, 0, 0], [0.0] * 3), ([1.0] * 6, [0.0] * 3), 1.5)
    assert move[:2] == [3.5, -1.5] and turn == [0.0] * 3

    world = gc.World(3)
    frame = world.frame()
    assert len(frame) == 7 * 7 * 12 and all(0.0 <= v <= 1.0 for v in frame)
    events = []
    for _ in range(200):
        events += world.step(*world.expert_action("chop_trees"))
    assert "mine_block:tree" in events, events
    assert world.inventory()["wood"] == events.count("pickup:wood")
    assert world.tick == 200

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.mtrj")
        assert gc.generate_dataset(path, 1, 40, 7) == 5
        rows = gc.read_trajectories(path)
        assert [r["len"] for r in rows] == ["40"] * 5
        assert rows[0]["skill"] == "chop_trees"

    try:
        gc.World(1).step(9, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("bad action accepted")
    assert not math.isnan(gc.win_probability(0.0, 4000.0))
    print("goalcraft_py smoke test passed")


if __name__ == "__main__":
    main()
