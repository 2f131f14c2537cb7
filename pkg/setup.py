"""Setup configuration for noisespace."""

from setuptools import setup, find_packages

setup(
    name="noisespace",
    version="0.1.0",
    description="Langevin posterior sampling in the noise space of deterministic generative maps",
    author="noisespace developers",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "numpy>=1.26.2",
        "scipy>=1.11.0",
        "scikit-learn>=1.3.0",
        "pandas>=2.0.0",
        "pydantic>=2.5.2",
        "pydantic-settings>=2.1.0",
        "pillow>=10.1.0",
        "tqdm>=4.65.0",
    ],
    extras_require={"test": ["pytest>=7.4.0"]},
    entry_points={"console_scripts": ["noisespace=noisespace.main:main"]},
    python_requires=">=3.9",
)
