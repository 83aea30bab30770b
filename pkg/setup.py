from setuptools import setup, Extension

# The compiled kernel core is optional: if Cython (or a C compiler) is
# unavailable the package falls back to the NumPy implementations at import.
try:
    from Cython.Build import cythonize
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "proxyclust.kernels._core",
                ["src/proxyclust/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
