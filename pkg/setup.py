import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VLTSEG_PURE", "") not in ("1", "true", "yes"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "vltseg.engine._kernels",
                    ["src/vltseg/engine/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # keep multiply and add as separate roundings (bitwise oracle parity)
                    extra_compile_args=["-O3", "-march=native", "-ffp-contract=off", "-fno-fast-math"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
