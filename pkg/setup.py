#!/usr/bin/env python
"""
Setup script for slotpolicy
"""

from pathlib import Path

from setuptools import setup

this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

setup(
    name='slotpolicy',
    version='0.2.0',
    description='Object-centric slot encoders and Gaussian-mixture behavior cloning on a 2.5D tabletop simulator',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=['slotpolicy'],
    python_requires='>=3.10',
    install_requires=[
        'numpy>=1.22',
        'Pillow>=9.0',
    ],
    extras_require={
        'dev': [
            'pytest>=7.0.0',
            'pytest-cov>=4.0.0',
            'pytest-benchmark>=4.0.0',
        ],
    },
    entry_points={
        'console_scripts': [
            'slotpolicy=slotpolicy.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'License :: OSI Approved :: GNU General Public License v2 (GPLv2)',
        'Programming Language :: Python :: 3',
        'Operating System :: POSIX :: Linux',
    ],
    keywords='slot-attention behavior-cloning robot-learning object-centric autodiff',
)
