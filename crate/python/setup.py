"""Build the `cybervax` extension module by delegating to cargo.

The module lives in the Rust workspace one directory up
(`crates/cybervax-py`); this shim compiles it and drops the produced
cdylib where setuptools expects the extension. Install with

    pip install -e python/ --no-build-isolation
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

WORKSPACE = Path(__file__).resolve().parent.parent


class CargoExtension(Extension):
    def __init__(self, name, crate):
        super().__init__(name, sources=[])
        self.crate = crate


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        if not isinstance(ext, CargoExtension):
            return super().build_extension(ext)
        subprocess.run(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                ext.crate,
                "--features",
                "extension-module",
            ],
            cwd=WORKSPACE,
            check=True,
        )
        built = None
        for name in ("libcybervax.so", "libcybervax.dylib", "cybervax.dll"):
            candidate = WORKSPACE / "target" / "release" / name
            if candidate.is_file():
                built = candidate
                break
        if built is None:
            raise FileNotFoundError("cargo build produced no cybervax cdylib")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, dest)


setup(
    ext_modules=[CargoExtension("cybervax", crate="cybervax-py")],
    cmdclass={"build_ext": CargoBuildExt},
    zip_safe=False,
)
