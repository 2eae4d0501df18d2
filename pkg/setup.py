from setuptools import setup, find_packages

setup(
    name="precoder",
    version="0.1.0",
    description="Predictive-coding next-frame video prediction on a small numpy autograd engine",
    packages=find_packages(exclude=["test"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.24",
        "PyYAML>=6.0",
        "tqdm>=4.64",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": ["precoder = precoder.cli:main"],
    },
)
