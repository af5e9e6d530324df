"""PEP 517 backend wrapping setuptools.build_meta.

The root-level setup.py is a workspace bootstrap script (not a setuptools
script), so this backend keeps setuptools from executing it and takes all
metadata from pyproject.toml instead.
"""
from setuptools import build_meta as _build_meta


class _Backend(_build_meta._BuildMetaBackend):
    def run_setup(self, setup_script='setup.py'):
        super().run_setup(setup_script='__no_setup_script__.py')


_backend = _Backend()

get_requires_for_build_wheel = _backend.get_requires_for_build_wheel
get_requires_for_build_sdist = _backend.get_requires_for_build_sdist
get_requires_for_build_editable = _backend.get_requires_for_build_editable
prepare_metadata_for_build_wheel = _backend.prepare_metadata_for_build_wheel
prepare_metadata_for_build_editable = _backend.prepare_metadata_for_build_editable
build_wheel = _backend.build_wheel
build_sdist = _backend.build_sdist
build_editable = _backend.build_editable
