"""End-to-end check of the musicdet_py extension.

Build it first:

    cargo build --release -p musicdet-py
    cp target/release/libmusicdet_py.so python/musicdet_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import musicdet_py as md  # noqa: E402


def main():
    eer, threshold = md.compute_eer([0.1, 0.2, 0.3, 0.4], ["fake", "fake", "real", "real"])
    assert eer == 0.0, eer
    assert 0.2 < threshold <= 0.3, threshold
    roc = md.roc_curve([0.1, 0.2, 0.3, 0.4], ["fake", "real", "fake", "real"])
    assert roc[0] == (1.0, 0.0) and roc[-1] == (0.0, 1.0), roc
    assert md.detect(1.0, 0.5) == "real" and md.detect(0.0, 0.5) == "fake"

    samples, rate = md.synth_clip("real", 7)
    assert rate == 16000 and len(samples) > 0
    flat_real = md.spectral_flatness(samples, rate)
    flat_fake = md.spectral_flatness(*md.synth_clip("fake", 7))
    assert 0.0 < flat_real < 1.0 and 0.0 < flat_fake < 1.0

    try:
        md.compute_eer([0.1, 0.2], ["real", "real"])
    except md.MusicDetError:
        pass
    else:
        raise AssertionError("single-class scores must be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        manifest = md.build_corpus(os.path.join(tmp, "corpus"), n_real=12, n_fake=12, seed=3)
        model = md.train(
            str(manifest), epochs=2, batch_size=4, hidden=4, band_steps=1, global_steps=1, seed=3
        )
        assert len(model.log) == 2 and all(math.isfinite(v) for v in model.log)
        assert json.loads(model.config)["mode"] == "one-class"

        path = os.path.join(tmp, "model.mdt")
        model.save(path)
        loaded = md.Model.load(path)
        result = loaded.evaluate(str(manifest), split="test")
        assert result["n_real"] + result["n_fake"] == len(result["scores"])
        assert 0.0 <= result["eer"] <= 1.0

        clip_id, _, score = result["scores"][0]
        wav = os.path.join(tmp, "corpus", clip_id)
        assert model.score_wav(wav) == score == loaded.score_wav(wav)

    print(f"ok: {model!r}, {model.n_parameters} parameters, test EER {result['eer']:.3f}")


if __name__ == "__main__":
    main()
