"""Smoke test for the hpt_py extension module.

Builds the cdylib if needed, imports it from a scratch directory, and
exercises every exported function. Run from anywhere:

    python3 python/smoke_test.py
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def locate_library() -> Path:
    names = ["libhpt_py.so", "libhpt_py.dylib", "hpt_py.dll"]
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in names
    ]
    for path in candidates:
        if path.exists():
            return path
    subprocess.run(
        ["cargo", "build", "-p", "hpt-python"], cwd=ROOT, check=True
    )
    for path in candidates:
        if path.exists():
            return path
    raise SystemExit("built hpt-python but found no library under target/")


def main() -> None:
    scratch = Path(tempfile.mkdtemp(prefix="hpt_py_"))
    shutil.copy(locate_library(), scratch / "hpt_py.so")
    sys.path.insert(0, str(scratch))
    import hpt_py

    hm = hpt_py.harmonic_mean(0.7795, 0.7074)
    assert abs(hm - 0.7417) < 1e-4, hm

    questions, extraction = hpt_py.render_instructions("tabby cat", "types of pets")
    assert len(questions) == 5
    joined = " ".join(questions) + extraction
    assert "[CLASS]" not in joined and "[TYPE]" not in joined
    assert "tabby cat" in questions[0]

    corpus = scratch / "corpus"
    n_classes, n_images = hpt_py.generate_corpus(str(corpus), seed=5)
    assert (n_classes, n_images) == (4, 16)

    bundle_path = corpus / "bundle.json"
    type_phrase, n_desc, classes = hpt_py.validate_bundle(bundle_path.read_bytes())
    assert n_desc == 5 and len(classes) == n_classes, (type_phrase, classes)

    broken = json.loads(bundle_path.read_text())
    del broken["categories"][0]["records"][0]["entities"]
    try:
        hpt_py.validate_bundle(json.dumps(broken).encode())
    except ValueError as e:
        assert "parse error" in str(e), e
    else:
        raise AssertionError("mutated bundle was accepted")

    prim_err, model_err = hpt_py.gradcheck(1)
    assert prim_err <= 1e-4 and model_err <= 1e-4, (prim_err, model_err)

    report = json.loads(hpt_py.evaluate_corpus(str(corpus), seed=5, epochs=2))
    assert report["protocol"] == "base-to-new"
    assert set(report["metrics"]) == {"base", "new", "hm"}
    assert report["runtime_s"] == 0.0

    print("smoke test passed:", len(classes), "classes, H =", report["metrics"]["hm"])


if __name__ == "__main__":
    main()
