#!/usr/bin/env python
from setuptools import find_packages, setup

setup(
    name="mode-interp-lab",
    version="0.0.1",
    description="Exact-score Gaussian-mixture diffusion laboratory for studying mode interpolation",
    packages=find_packages(include=["src", "src.*"]),
    install_requires=[
        "torch>=1.13",
        "pytorch-lightning>=1.9,<2.0",
        "torchmetrics>=0.7.0",
        "hydra-core>=1.3.0",
        "hydra-colorlog>=1.2.0",
        "numpy>=1.22",
        "scipy>=1.8",
        "pandas>=1.4",
        "python-dotenv",
        "rich",
        "tqdm",
    ],
    extras_require={"test": ["pytest", "sh"]},
)
