from setuptools import find_packages, setup

setup(
    name="sttpersonal",
    version="0.1.0",
    python_requires=">=3.12",
    install_requires=("numpy", "psutil"),
    extras_require={"test": ("pytest",)},
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    entry_points={"console_scripts": ("sttpersonal = sttpersonal.cli:main",)},
)
