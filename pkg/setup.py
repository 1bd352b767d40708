import re
from pathlib import Path

import setuptools


def read_version():
    try:
        v = [x for x in Path('flow_as_code/__init__.py').open() if x.startswith('__version__')][0]
        v = re.match(r"__version__ *= *'(.*?)'\n", v)[1]
        return v
    except Exception as e:
        raise RuntimeError(f"Unable to read version string: {e}")


setuptools.setup(
    name="flow_as_code",
    version=read_version(),
    author="Christopher Boyd",
    description="A workflow engine for iterative, data-driven pipelines of external tools",
    long_description_content_type="text/markdown",
    long_description=Path('README.md').read_text(),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent"
    ],
    python_requires=">=3.9",
    install_requires=[
        'jsonschema',
        'networkx',
        'tqdm'
    ],
    extras_require={
        'Testing': ['pytest', 'pytest-mock', 'pytest-cov']
    },
    packages=setuptools.find_packages(exclude=['tests', 'tests.*']),
    entry_points={
        'console_scripts': [
            'flow=flow_as_code._commands:menu',
            'flow-as-code=flow_as_code._commands:menu'
        ],
    }
)
