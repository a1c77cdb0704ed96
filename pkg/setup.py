"""Build script for the compiled convolution kernels.

The extension is optional: if Cython (or a C compiler) is unavailable the
package installs without it and `fna.kernels` falls back to the pure-numpy
implementation at import time.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/fna/_conv_cy.pyx"],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
