"""Smoke test for the pystmil extension.

Build it first with `cargo build -p stmil-py --release`; the script picks up
target/release/libpystmil.so (or the path in $PYSTMIL_LIB).
"""

import importlib.util
import math
import os
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    lib = pathlib.Path(os.environ.get("PYSTMIL_LIB", ROOT / "target" / "release" / "libpystmil.so"))
    if not lib.exists():
        sys.exit(f"{lib} not found; run `cargo build -p stmil-py --release`")
    spec = importlib.util.spec_from_file_location("pystmil", lib)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    st = load_module()

    assert st.roc_auc([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert st.roc_auc([0.5] * 4, [True, False, True, False]) == 0.5

    loss, d_pos, d_neg = st.ranking_loss([0.9] * 49, [0.2] * 49)
    assert loss == 0.3, loss
    assert sum(1 for g in d_pos + d_neg if g != 0.0) == 2

    try:
        st.ranking_loss([0.5] * 10, [0.5] * 49)
    except st.StmilError:
        pass
    else:
        raise AssertionError("short score vector accepted")

    small = dict(channels=8, time=2, n_normal_videos=3, n_anomalous_videos=3, segments_per_video=2)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        written = st.synth(str(tmp / "train"), seed=1, **small)
        assert written > 0
        assert st.synth(str(tmp / "train"), seed=1, **small) == 0
        st.synth(str(tmp / "test"), seed=2, split="TEST", **small)

        rows = st.load_manifest(str(tmp / "train" / "manifest.txt"))
        assert len(rows) == 12 and {r[3] for r in rows} == {"NORMAL", "ANOMALOUS"}
        dims, values = st.read_cuboid(str(tmp / "train" / rows[0][0]))
        assert dims == (8, 2, 14, 14) and len(values) == math.prod(dims)

        flags = [f"--{k.replace('_', '-')}={v}" for k, v in small.items()]
        ckpt = tmp / "run" / "model.milc"
        code, out, err = st.run_cli(
            ["train", "--manifest", str(tmp / "train" / "manifest.txt"), "--checkpoint", str(ckpt),
             "--iterations", "3", "--pairs-per-batch", "4", *flags]
        )
        assert code == 0, err
        code, _, err = st.run_cli(
            ["score", "--manifest", str(tmp / "test" / "manifest.txt"), "--checkpoint", str(ckpt),
             "--out", str(tmp / "scores"), *flags]
        )
        assert code == 0, err
        auc, hit = st.evaluate(str(tmp / "scores"), planted=str(tmp / "test" / "planted.txt"))
        assert 0.0 <= auc <= 1.0 and 0.0 <= hit <= 1.0
        scores = st.read_scores(str(next((tmp / "scores").iterdir())))
        assert set(scores) == {0, 1} and all(len(v) == 49 for v in scores.values())

        net = st.Classifier.load(str(ckpt))
        assert net.widths[0] == 8 and net.widths[-1] == 1
        preds = net.predict([[0.1] * 8, [-0.3] * 8])
        assert len(preds) == 2 and all(0.0 < p < 1.0 for p in preds)
        fresh = st.Classifier(seed=3, widths=[4, 3, 1])
        fresh.save(str(tmp / "fresh.milc"))
        again = st.Classifier.load(str(tmp / "fresh.milc"))
        assert again.predict([[1.0, 2.0, 3.0, 4.0]]) == fresh.predict([[1.0, 2.0, 3.0, 4.0]])

        code, _, _ = st.run_cli(["train"])
        assert code == 1

    print(f"pystmil smoke test passed (frame AUC {auc:.3f}, hit rate {hit:.3f})")


if __name__ == "__main__":
    main()
