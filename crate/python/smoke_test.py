#!/usr/bin/env python3
"""End-to-end smoke test for the cybervax Python bindings.

Trains a toy immune system and validator through the embedded CLI, then
exercises the bound types directly: vaccinate a crop, attack it, recover
the face, and classify the result. Finishes in well under a minute.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

WORKSPACE = Path(__file__).resolve().parent.parent


def locate_module():
    try:
        import cybervax

        return cybervax
    except ImportError:
        pass
    # Fall back to a cargo-built cdylib when the package is not installed.
    for profile in ("release", "debug"):
        for name in ("libcybervax.so", "libcybervax.dylib"):
            built = WORKSPACE / "target" / profile / name
            if built.is_file():
                dest = built.parent / "cybervax.so"
                if not dest.is_file() or built.stat().st_mtime > dest.stat().st_mtime:
                    shutil.copyfile(built, dest)
                sys.path.insert(0, str(dest.parent))
                import cybervax

                return cybervax
    sys.exit(
        "cybervax module not found; run `pip install -e python/ --no-build-isolation` "
        "or `cargo build -p cybervax-py --features extension-module` first"
    )


cybervax = locate_module()

TOY_UNET = {
    "resolution": 16,
    "in_channels": 4,
    "out_channels": 3,
    "base_width": 8,
    "res_blocks_per_level": 1,
    "attention_resolutions": [4, 8],
    "depth": 2,
}


def write_config(path):
    doc = {
        "resolution": 16,
        "model": {"vaccinator": TOY_UNET, "neutraliser": dict(TOY_UNET)},
        "validator": {"resolution": 16},
        "train": {"steps": 6, "batch_size": 2, "checkpoint_every": 3},
    }
    path.write_text(json.dumps(doc, indent=2))


def main():
    tmp = Path(tempfile.mkdtemp(prefix="cybervax-smoke-"))
    config = tmp / "toy.json"
    write_config(config)

    train_out = tmp / "train"
    rc = cybervax.run(
        ["train", "--config", str(config), "--synthetic", "12", "--out", str(train_out)]
    )
    assert rc == 0, f"train exited {rc}"
    immune_ckpt = train_out / "immune.ckpt"

    val_out = tmp / "validator"
    rc = cybervax.run(
        [
            "train-validator",
            "--config",
            str(config),
            "--checkpoint",
            str(immune_ckpt),
            "--synthetic",
            "12",
            "--out",
            str(val_out),
        ]
    )
    assert rc == 0, f"train-validator exited {rc}"

    system = cybervax.ImmuneSystem.load(str(immune_ckpt))
    assert system.resolution == 16
    assert system.step == 6
    print(system)

    images, masks = cybervax.synthetic_faces(2, 16, seed=123)
    assert images.shape == (2, 16, 16, 3) and masks.shape == (2, 16, 16)
    crop, mask = images[0], masks[0]

    vaccinated = system.vaccinate_crop(crop, mask)
    assert vaccinated.shape == crop.shape
    assert np.isfinite(cybervax.psnr(crop, vaccinated))
    # The face plateau is left untouched by vaccination.
    face = mask >= 1.0
    assert np.allclose(vaccinated[face], crop[face], atol=1e-5)

    infected = cybervax.mask_attack(vaccinated, mask)
    assert float(np.abs(infected[face]).max()) < 1e-5, "attack must black out the face"
    detected = cybervax.detect_mask(infected)
    assert detected.shape == mask.shape and detected.max() > 0.0

    # Detection path (no mask given), then the exact-mask path.
    assert system.neutralise_crop(infected).shape == crop.shape
    healed = system.neutralise_crop(infected, mask)
    # Outside the face the payload-carrying pixels pass through.
    background = mask <= 0.0
    assert np.allclose(healed[background], infected[background], atol=1e-5)
    assert 0.0 <= cybervax.ssim(crop, healed) <= 1.0
    assert abs(cybervax.ssim_region(crop, crop, mask) - 1.0) < 1e-6

    validator = cybervax.Validator.load(str(val_out / "validator.ckpt"))
    p = validator.probability(healed)
    assert 0.0 <= p <= 1.0
    assert isinstance(validator.is_vaccinated(healed), bool)
    print(f"validator probability on healed crop: {p:.3f}")

    # Full frames of arbitrary size go through crop-and-paste.
    frame = np.zeros((24, 24, 3), dtype=np.float32)
    frame[4:20, 4:20] = crop
    out = system.vaccinate(frame)
    assert out.shape == frame.shape
    out = system.neutralise(out)
    assert out.shape == frame.shape

    # Errors surface as exceptions, not process exits.
    try:
        cybervax.ImmuneSystem.load(str(tmp / "missing.ckpt"))
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing checkpoint must raise")

    shutil.rmtree(tmp, ignore_errors=True)
    print("smoke test passed")


if __name__ == "__main__":
    main()
