"""Makes the bindings importable when the wheel is not installed.

Prefers an installed `maskgrid` package; otherwise assembles one in a temp
directory from the repo's python package plus a cmake-built `_core` module.
"""

import glob
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[2]


def _assemble_from_build():
    candidates = sorted(glob.glob(str(ROOT / "build*" / "bindings" / "_core*.so")))
    if not candidates:
        return
    staging = pathlib.Path(tempfile.mkdtemp(prefix="maskgrid_pkg_"))
    pkg = staging / "maskgrid"
    pkg.mkdir()
    shutil.copy2(ROOT / "python" / "maskgrid" / "__init__.py", pkg / "__init__.py")
    shutil.copy2(candidates[-1], pkg / pathlib.Path(candidates[-1]).name)
    sys.path.insert(0, str(staging))


try:
    import maskgrid  # noqa: F401
except ImportError:
    _assemble_from_build()
