"""
Setup script for Maskinator

Usage:
    python setup.py sdist bdist_wheel
"""

from setuptools import setup

# The version number; do not change this manually! It is updated by bumpversion (https://github.com/c4urself/bump2version)
__version__ = "0.1.0"

# The modules in src/ are installed individually, not as a package
PY_MODULES = [
    "cfno",
    "config",
    "ilt",
    "layout",
    "lgst",
    "litho",
    "maskinator",
    "metrics",
    "tensor_ad",
    "tiling",
    "utils",
]

with open("requirements.txt", "r", encoding="utf-8") as f:
    INSTALL_REQUIRES = [line.strip() for line in f if line.strip()]

setup(
    name="Maskinator",
    version=__version__,
    description="Desk-scale inverse lithography: ILT labels, CFNO mask prediction and litho-guided self training",
    package_dir={"": "src"},
    py_modules=PY_MODULES,
    install_requires=INSTALL_REQUIRES,
    python_requires=">=3.9",
    entry_points={"console_scripts": ["maskinator=maskinator:main"]},
)
