from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; lehd.kernels falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("lehd.kernels._fast", ["src/lehd/kernels/_fast.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
