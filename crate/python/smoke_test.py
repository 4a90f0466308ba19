"""Quick end-to-end check of the Python bindings on a tiny synthetic dataset."""

import json
import math
import tempfile
from pathlib import Path

import neurofatigue_py as nf

TINY = """
[synth]
n_per_class = 3
shape = [8, 4, 8, 8]
roi_center = [2.0, 4.0, 4.0]
roi_radius_vox = 2.0

[encoder]
conv_channels = [4, 4, 4]
lstm_hidden = 8
embed_dim = 4
input_depth = 4
input_hw = [8, 8]

[augment]
crop_len = 6
"""


def main():
    assert nf.score_to_class(0.0) == 0
    assert nf.score_to_class(100.0) == 5
    assert abs(nf.cosine_sim([1.0, 0.0], [0.0, 2.0])) < 1e-12
    loss = nf.info_nce([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], 1.0)
    assert abs(loss - 0.31326) < 1e-5, loss
    assert nf.lr_at(130) == 0.003

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        index = nf.generate_dataset(str(tmp / "data"), TINY)
        assert len(index) == 18
        records = index.records()
        assert {r["label"] for r in records} == set(range(6))

        scan = nf.load_nifti(records[0]["path"])
        assert scan.shape == (8, 4, 8, 8)
        nf.save_nifti(scan, str(tmp / "copy.nii"))
        assert nf.load_nifti(str(tmp / "copy.nii")).values() == scan.values()

        enc = nf.Encoder(TINY, seed=1)
        z = enc.encode([scan, scan])
        assert len(z) == 2 and len(z[0]) == 4
        assert abs(math.sqrt(sum(v * v for v in z[0])) - 1.0) < 1e-4
        for row in enc.attention_weights([scan]):
            assert abs(sum(row) - 1.0) < 1e-4

        config = tmp / "tiny.toml"
        config.write_text(TINY + "\n[pretrain]\nepochs = 1\nqueue_size = 8\nbatch_size = 4\n"
                          "\n[finetune]\nepochs = 2\n")
        data = str(tmp / "data" / "manifest.tsv")
        out = str(tmp / "run")
        assert nf.run_cli(["finetune", "--config", str(config), "--data", data, "--out", out]) == 0
        clf = nf.Classifier.load(str(Path(out) / "checkpoints" / "classifier"))
        label, probs = clf.predict(scan)
        assert 0 <= label < 6 and abs(sum(probs) - 1.0) < 1e-9
        metrics = clf.evaluate(index)
        assert metrics["n"] == 18
        assert sum(map(sum, metrics["confusion"])) == 18
        assert nf.run_cli(["pretrain", "--bogus"]) == 2

    print("smoke test ok:", json.dumps({"loss": round(loss, 5), "acc": metrics["overall_acc"]}))


if __name__ == "__main__":
    main()
