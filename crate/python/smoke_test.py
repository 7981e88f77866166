"""Smoke test for the illumfield_py extension.

Build the library first:

    cargo build --release -p illumfield-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built shared
library into a temporary directory under the importable module name.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    lib = os.environ.get("ILLUMFIELD_PY_LIB")
    if lib is None:
        for profile in ("release", "debug"):
            candidate = os.path.join(ROOT, "target", profile, "libillumfield_py.so")
            if os.path.exists(candidate):
                lib = candidate
                break
    if lib is None:
        sys.exit("libillumfield_py.so not found; build the illumfield-py crate first")
    tmp = tempfile.mkdtemp(prefix="illumfield_py_")
    shutil.copy(lib, os.path.join(tmp, "illumfield_py.so"))
    sys.path.insert(0, tmp)
    import illumfield_py

    return illumfield_py, tmp


def main():
    ilf, tmp = import_extension()
    print("illumfield_py", ilf.__version__)

    assert abs(ilf.learning_rate(500) - 1e-3) < 1e-15
    assert abs(ilf.learning_rate(250) - 5e-4) < 1e-15
    assert abs(ilf.learning_rate(50_000) - 5e-5) < 1e-15

    env = ilf.Environment.synthetic(3, 16, 32)
    assert (env.height, env.width) == (16, 32)
    path = os.path.join(tmp, "env.hdr")
    env.save(path)
    again = ilf.Environment.load(path)
    assert again.height == 16 and len(again.pixels()) == 16 * 32

    coeffs = ilf.fit_sh(env, 2)
    assert len(coeffs) == 9
    raster = ilf.render_sh(coeffs, 2, 16, 32)
    assert len(raster) == 16 * 32

    model = ilf.Model.random("so2", 27, "small", 0)
    assert model.latent_dim == 27 and model.mode == "so2"
    assert model.audit(20, 1) < 1e-4

    code = model.sample(4)
    a = model.eval([0.0, 0.0, 1.0], code)
    rotated = model.eval([1.0, 0.0, 0.0], code.rotated(90.0))
    assert max(abs(x - y) for x, y in zip(a, rotated)) < 1e-4, (a, rotated)

    decoded = model.decode(code, 8, 16)
    assert decoded.width == 16
    fitted, history = model.fit(decoded, steps=20)
    assert fitted.dim == 27 and len(history) == 20
    assert all(math.isfinite(v) for v in history)

    trained, losses = ilf.train_model([env, env.rotated(90.0)], "so2", 9, steps=20, arch="small", batch_size=128)
    assert trained.code_count() == 2 and len(losses) == 20

    renderer = ilf.Renderer(16, 8, 0.6)
    render = renderer.render_latent(model, code)
    assert len(render) == 256
    assert renderer.render_psnr(render, render) == math.inf

    try:
        ilf.LatentCode([1.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError("a code of length 2 should be rejected")

    shutil.rmtree(tmp, ignore_errors=True)
    print("smoke test passed")


if __name__ == "__main__":
    main()
