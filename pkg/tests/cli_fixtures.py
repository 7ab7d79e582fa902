"""Small on-disk fixtures and the seeded generate -> decode -> render chain shared by CLI tests."""

import hashlib
import itertools
import json
from pathlib import Path

import numpy as np

from slat3d.cli import main
from slat3d.io import save_archive, write_obj

GOLDEN = Path(__file__).parent / "golden" / "pipeline.json"


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv) -> int:
    return main([str(a) for a in argv])


def cube_obj(path, half=0.25):
    c = np.array(list(itertools.product([-half, half], repeat=3)))
    faces = []
    for a in range(3):
        for side in (0, 1):
            idx = [i for i in range(8) if (c[i, a] > 0) == side]
            o = [k for k in range(3) if k != a]
            ang = np.arctan2(c[idx, o[1]], c[idx, o[0]])
            q = [idx[i] for i in np.argsort(ang)]
            faces += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    write_obj(path, c, faces)
    return path


def camera_json(path, position=(1.2, -1.5, 0.8), size=24):
    Path(path).write_text(json.dumps({"position": list(position), "fov_y_deg": 40, "width": size, "height": size}))
    return path


def structure_field(path, pattern, gain=6.0):
    """A constant-velocity structure 'model' whose samples carry the sign of ``pattern`` (+-1, n^3 x 1)."""
    save_archive(path, {"velocity": -gain * np.asarray(pattern, dtype=np.float64)},
                 {"config": {"kind": "constant_field", "dim": int(np.size(pattern))},
                  "latent_shape": list(np.shape(pattern)), "decoder": {"kind": "sign", "levels": 2}})
    return path


PIPELINE_ARTIFACTS = ("lat.slat", "lat.structure.dnse", "gaussians.ply", "radiance.slat", "radiance.slat.json",
                      "mesh.obj", "r_gs.ppm", "r_gs.depth.pfm", "r_mesh.ppm", "r_mesh.planes.dnse", "r_rf.ppm",
                      "r_rf.alpha.pfm")


def pipeline(out: Path) -> dict:
    """Seeded init-weights -> generate -> decode (3 formats) -> render; returns artifact hashes."""
    out = Path(out)
    d = ["--out-dir", out]
    steps = [
        [*d, "--seed", 3, "init-weights", "structure-flow", "--hidden", 32, 32, "-o", "sflow"],
        [*d, "--seed", 4, "init-weights", "latent-flow", "--channels", 4, "--hidden", 32, "-o", "lflow"],
        [*d, "--seed", 5, "init-weights", "gaussian-head", "--channels", 4, "-k", 2, "-o", "gshead"],
        [*d, "--seed", 6, "init-weights", "radiance-head", "--channels", 4, "--scale", 0.3, "-o", "rfhead"],
        [*d, "--seed", 7, "init-weights", "mesh-upsampler", "--channels", 4, "-o", "mhead"],
        [*d, "--seed", 11, "generate", "--structure", out / "sflow", "--latent", out / "lflow", "--steps", 10,
         "-o", "lat.slat"],
        [*d, "decode", out / "lat.slat", "--format", "gs", "--head", out / "gshead"],
        [*d, "decode", out / "lat.slat", "--format", "rf", "--head", out / "rfhead"],
        [*d, "decode", out / "lat.slat", "--format", "mesh", "--head", out / "mhead"],
    ]
    for argv in steps:
        assert run(*argv) == 0, argv
    cam = camera_json(out / "cam.json")
    for asset, stem, extra in (("gaussians.ply", "r_gs", []), ("mesh.obj", "r_mesh", []),
                               ("radiance.slat", "r_rf", ["--step", 0.02])):
        assert run(*d, "render", out / asset, "--camera", cam, "-o", stem, *extra) == 0
    return {name: sha(out / name) for name in PIPELINE_ARTIFACTS}
