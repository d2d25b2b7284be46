import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = [
        Extension(
            "prefixasr._lattice_fast",
            ["src/prefixasr/_lattice_fast.pyx"],
            include_dirs=[np.get_include()],
            # No -ffast-math: the kernels rely on IEEE -inf semantics.
            extra_compile_args=["-O3"],
            optional=True,
        )
    ]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
else:
    ext_modules = []

setup(ext_modules=ext_modules)
