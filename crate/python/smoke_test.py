"""Smoke test for the sparseseg Python extension.

Build and install first:
    pip install -e crates/py --no-build-isolation
"""

import sys
import tempfile
from pathlib import Path

import sparseseg


def main() -> int:
    # mask codec
    bits = bytes([0, 1, 1, 0, 1, 1])
    rle = sparseseg.rle_encode(bits, 2, 3)
    assert rle == "1,2,1,2", rle
    assert sparseseg.rle_decode(rle, 2, 3) == bits

    # matching
    pairs, total = sparseseg.hungarian([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    assert pairs == [(0, 0), (1, 1)] and total == 0.0, (pairs, total)
    assert sparseseg.mask_iou(bits, bits, 2, 3) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        tiles, instances = sparseseg.generate_dataset(str(data), n_tiles=8, seed=1, tile_extent=64)
        assert tiles == 8 and instances > 0
        summary = sparseseg.dataset_summary(str(data))
        assert [t for t, _ in summary][:2] == ["tile_00000", "tile_00001"]

        model = sparseseg.Model(n_instances=16, seed=0)
        assert model.n_instances == 16 and model.parameter_count() > 0
        losses = model.train(str(data), iterations=3, batch_size=2)
        assert len(losses) == 3 and all(l > 0 for l in losses)

        ckpt = Path(tmp) / "model.ckpt"
        model.save(str(ckpt))
        again = sparseseg.Model.load(str(ckpt))

        rgb = bytes(64 * 64 * 3)
        a = model.predict(rgb, 64, 64, score_threshold=0.0)
        b = again.predict(rgb, 64, 64, score_threshold=0.0)
        assert len(a) == 16, len(a)
        assert [(i.score, i.rle) for i in a] == [(i.score, i.rle) for i in b]
        assert len(a[0].mask()) == 64 * 64

        report = model.evaluate(str(data), split="test")
        assert 0.0 <= report["ap50"] <= 1.0
        fps = model.measure_fps(str(data), warmup=1, reps=2)
        assert fps["images_processed"] == 2 and fps["fps"] > 0

    print("sparseseg smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
