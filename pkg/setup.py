"""Build hook for the optional compiled kernel module.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here is deliberately non-fatal.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "semkp._kernels._fast",
                ["src/semkp/_kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"semkp: skipping compiled kernels ({exc}); pure-python fallback will be used")
    ext_modules = []

setup(ext_modules=ext_modules)
