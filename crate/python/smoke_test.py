"""Smoke test for the avss_py extension.

Build and install with
    pip install --no-build-isolation ./crates/python
then run
    python python/smoke_test.py
"""

import math
import random
import tempfile
from pathlib import Path

import avss_py


def check_stft_round_trip():
    rng = random.Random(0)
    x = [rng.uniform(-1, 1) for _ in range(avss_py.CHUNK_SAMPLES)]
    re, im = avss_py.stft(x)
    assert (len(re), len(re[0])) == (512, 256), (len(re), len(re[0]))
    y = avss_py.istft(re, im)
    err = max(abs(a - b) for a, b in zip(x[1022:-1022], y[1022:-1022]))
    assert err < 1e-9, err


def check_bss_eval():
    rng = random.Random(1)
    s = [rng.gauss(0, 1) for _ in range(4096)]
    n = [rng.gauss(0, 1) for _ in range(4096)]
    est = [a + 0.1 * b for a, b in zip(s, n)]
    m = avss_py.bss_eval(est, [s, n], target_index=0, filter_len=64)
    assert abs(m["sir"] - 20.0) < 1.5, m
    assert m["sdr"] <= m["sir"] + 1e-9, m


def check_volume_protocol():
    rng = random.Random(2)
    src = [[rng.gauss(0, 0.1) for _ in range(8192)] for _ in range(3)]
    out = avss_py.volume_protocol(src, 0, 0.5)
    rms = [math.sqrt(sum(v * v for v in s) / len(s)) for s in out]
    assert len(out) == 3 and all(r > 0 for r in rms), rms


def check_cli_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data, run = tmp / "data", tmp / "run"
        assert avss_py.run_cli(["dataset", "fixtures", "--out", str(data), "--seed", "1"]) == 0
        code = avss_py.run_cli([
            "train", "--manifest", str(data / "manifest.jsonl"), "--out", str(run),
            "--blocks", "4", "--base-channels", "2", "--batch-size", "2",
            "--max-steps", "2", "--visual", "none",
        ])
        assert code == 0
        sep = avss_py.Separator(str(run / "best.ckpt"))
        assert (sep.num_blocks, sep.base_channels, sep.use_visual) == (4, 2, False)
        out = sep.separate([0.1 * math.sin(0.01 * i) for i in range(20000)], 16000)
        assert len(out) == 20000
        assert all(math.isfinite(v) for v in out)
    assert avss_py.run_cli(["train", "--blocks", "5"]) == 2


if __name__ == "__main__":
    for check in (check_stft_round_trip, check_bss_eval, check_volume_protocol, check_cli_pipeline):
        check()
        print(f"ok {check.__name__}")
