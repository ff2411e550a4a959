"""Builds the compiled event-loop kernel when Cython and a C compiler are available.

Without them the package still installs and runs on the pure-Python loop.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [Extension("ringpipe.sim._kernel", ["src/ringpipe/sim/_kernel.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )


if ext_modules:
    from setuptools.command.build_ext import build_ext

    class OptionalBuildExt(build_ext):
        def run(self):
            try:
                super().run()
            except Exception as exc:  # no compiler: keep the Python fallback
                print(f"warning: compiled kernel not built ({exc}); using the Python loop")

        def build_extension(self, ext):
            try:
                super().build_extension(ext)
            except Exception as exc:
                print(f"warning: building {ext.name} failed ({exc}); using the Python loop")

    setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
else:
    setup()
