"""Exercises the Python bindings end to end on tiny inputs."""

import math
import tempfile
from pathlib import Path

import assemkit


def box(lo, hi, n=4):
    pts = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                pts.append([lo[d] + (hi[d] - lo[d]) * c / (n - 1) for d, c in enumerate((i, j, k))])
    return pts


def main():
    pose = assemkit.Pose.random(3, rotation_limit_deg=45.0, translation_limit=0.5)
    tokens = pose.tokens()
    assert len(tokens) == 9 and all(0 <= t < assemkit.NUM_BINS for t in tokens)
    back = assemkit.Pose.from_tokens(tokens)
    assert max(abs(a - b) for a, b in zip(back.translation, pose.translation)) <= 0.005 + 1e-12
    assert pose.compose(pose.inverse()).angle() < 1e-6

    bottom = box([-0.5, -0.5, 0.0], [0.5, 0.5, 0.5])
    top = box([-0.5, -0.5, 0.5], [0.5, 0.5, 0.9])
    assert assemkit.connectivity([top, bottom]) == [(0, 1)]
    assert assemkit.assembly_order([top, bottom]) == [1, 0]
    assert assemkit.chamfer(top, top) == 0.0
    assert math.isclose(assemkit.scd(pose, pose, top), 0.0, abs_tol=1e-15)

    objs = assemkit.generate_asset("stack", 7)
    assert len(objs) >= 2 and objs[0].startswith("v ")

    with tempfile.TemporaryDirectory() as tmp:
        mesh = Path(tmp) / "part.obj"
        mesh.write_text(objs[0])
        cloud = assemkit.sample_mesh(str(mesh), 256, seed=1)
        assert len(cloud) == 256
        model = assemkit.PoseModel(channels=8, seed=1)
        pred = model.predict(bottom, assemkit.farthest_point_sample(cloud, 64))
        assert len(pred.rotation) == 3 and all(math.isfinite(x) for x in pred.translation)
        ckpt = Path(tmp) / "model.ckpt"
        model.save(str(ckpt))
        again = assemkit.PoseModel.load(str(ckpt)).predict(bottom, assemkit.farthest_point_sample(cloud, 64))
        assert again.rotation == pred.rotation and again.translation == pred.translation
        assets, steps, failures = assemkit.generate_dataset(
            str(Path(tmp) / "data"), ["stack"], 2, seed=1, points=128, points_coarse=512
        )
        assert assets == 2 and steps >= 2 and failures == 0
        try:
            assemkit.PoseModel.load(str(Path(tmp) / "missing.ckpt"))
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise FileNotFoundError")
    print(f"smoke test ok ({model.parameter_count} parameters)")


if __name__ == "__main__":
    main()
