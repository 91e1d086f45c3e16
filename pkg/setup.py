# type: ignore
from setuptools import setup, find_packages

setup(
    name="maceexplain",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    include_package_data=True,
    install_requires=[
        'Click',
        'numpy',
        'pandas',
        'matplotlib',
        'torch',
        'scipy',
    ],
    entry_points={
        'console_scripts': [
            'maceexplain=maceexplain.src.cli:cli',
        ],
    },
)
