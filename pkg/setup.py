from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:  # the package falls back to the numpy kernel
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "svie_mp._kernels",
                ["src/svie_mp/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
