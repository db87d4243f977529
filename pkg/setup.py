#!/usr/bin/env python3
# encoding: utf-8

import os

from setuptools import find_packages, setup

REPO_DIR = os.path.dirname(os.path.abspath(__file__))

METADATA = {
    "name": "advranking",
    "description": "Adversarial ranking attacks and defenses for small embedding models",
    "url": "https://github.com/advranking/advranking",
}

# Basic/common package dependencies
REQUIRES = [
    "dj-database-url<1.3",
    "django~=3.2",
    "numpy>=1.20",
    "pandas>=1.5",
]

# Extra dependencies for testing
TEST_REQUIRES = ["pytest", "pytest-django", "pyyaml", "hypothesis"]


def rpm_compat_version():
    """Constructs RPM-compatible version identifier"""

    def rpm_version_scheme(version):
        if version.exact:
            return version.format_with("{tag}")
        else:
            return version.format_with("{tag}.dev{distance}")

    return {"version_scheme": rpm_version_scheme}


with open(os.path.join(REPO_DIR, "README.md"), encoding="utf-8") as readme:
    long_description = readme.read()

setup(
    **METADATA,
    use_scm_version=rpm_compat_version,
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    py_modules=["manage"],
    include_package_data=True,
    python_requires=">=3.7",
    setup_requires=["pytest-runner", "setuptools_scm"],
    install_requires=REQUIRES,
    tests_require=TEST_REQUIRES,
    extras_require={"test": TEST_REQUIRES},
    entry_points={"console_scripts": ["advranking-manage = manage:main"]},
)
